"""Generic 5-tap perceptual feature extractor (identity-blind baseline).

A small convolutional encoder trained on image reconstruction over synthetic
renders. It exposes 5 intermediate activations, mirroring classic
perceptual-loss extractors, but carries no identity supervision by
construction.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from retexture.rendering import ImageTensor

NUM_TAPS = 5


class PerceptualExtractor(nn.Module):
    def __init__(self, base_channels: int = 8, seed: int = 0):
        super().__init__()
        b = base_channels
        chans = [b, b, 2 * b, 2 * b, 4 * b]
        self.convs = nn.ModuleList()
        prev = 3
        for i, c in enumerate(chans):
            self.convs.append(nn.Conv2d(prev, c, 3, padding=1, stride=2 if i % 2 else 1))
            prev = c
        self.decoder = nn.Conv2d(prev, 3, 3, padding=1)
        rng = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if p.dim() > 1:
                    p.normal_(0.0, p[0].numel() ** -0.5, generator=rng)
                else:
                    p.zero_()

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        acts = []
        for conv in self.convs:
            x = F.relu(conv(x))
            acts.append(x)
        return acts

    def forward(self, x):
        """5 activations for an ImageTensor or a (B, 3, h, w) torch batch."""
        if isinstance(x, ImageTensor):
            t = torch.tensor(x.pixels, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
            with torch.no_grad():
                return [a[0] for a in self.taps(t)]
        return self.taps(x)


def train_perceptual(
    images: list[ImageTensor],
    base_channels: int = 8,
    steps: int = 60,
    seed: int = 0,
) -> PerceptualExtractor:
    """Fit the extractor on image reconstruction (a non-identity task)."""
    net = PerceptualExtractor(base_channels=base_channels, seed=seed)
    x = torch.tensor(
        np.stack([img.pixels for img in images]), dtype=torch.float32
    ).permute(0, 3, 1, 2)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    torch.manual_seed(seed)
    for _ in range(steps):
        feats = net.taps(x)
        recon = net.decoder(feats[-1])
        recon = F.interpolate(recon, size=x.shape[2:], mode="bilinear", align_corners=False)
        loss = F.mse_loss(recon, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
