"""U-Net texture generator: person image in, full texture map out.

The input crop (taller than wide) is pooled to the square texture resolution by
an asymmetric stem, then a standard skip-connected encoder/decoder runs at
square resolutions. The final sigmoid keeps the texture in [0, 1] for any
parameters, so any scalar loss on the output yields parameter gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from retexture.errors import ConfigError, FormatError, ParameterError
from retexture.rendering import ImageTensor, Texture

_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    in_dims: tuple[int, int, int] = (128, 64, 3)  # (h, w, c)
    out_dims: tuple[int, int, int] = (64, 64, 3)  # (h_t, w_t, c)
    depth: int = 4
    base_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        div = 2**self.depth
        for name, (h, w, _) in (("in_dims", self.in_dims), ("out_dims", self.out_dims)):
            if h % div or w % div:
                raise ConfigError(
                    f"{name} spatial dims {(h, w)} must be divisible by 2^depth = {div}"
                )


class _DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), 0.2)
        return F.leaky_relu(self.conv2(x), 0.2)


class TextureGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        c_in = config.in_dims[2]
        self.enc = nn.ModuleList()
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        chans = [ch * 2**i for i in range(config.depth)]
        prev = c_in
        for c in chans:
            self.enc.append(_DoubleConv(prev, c))
            prev = c
        self.bottleneck = _DoubleConv(prev, prev * 2)
        prev = prev * 2
        for c in reversed(chans):
            self.up.append(nn.Conv2d(prev, c, 3, padding=1))
            self.dec.append(_DoubleConv(2 * c, c))
            prev = c
        self.head = nn.Conv2d(prev, config.out_dims[2], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, c, in_h, in_w) image batch -> (B, c, h_t, w_t) texture batch in [0, 1]."""
        in_h, in_w, _ = self.config.in_dims
        if x.shape[2] != in_h or x.shape[3] != in_w:
            raise ParameterError(f"expected input {(in_h, in_w)}, got {tuple(x.shape[2:])}")
        h_t, w_t, _ = self.config.out_dims
        # asymmetric stem pool: non-square crop to the square texture grid
        x = F.adaptive_avg_pool2d(x, (h_t, w_t))
        skips = []
        for enc in self.enc:
            x = enc(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


def generator_init(config: GeneratorConfig) -> TextureGenerator:
    """Build a generator with fan-in scaled random weights and zero biases.

    Deterministic for a fixed config seed, independent of global RNG state.
    """
    gen = TextureGenerator(config)
    rng = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in sorted(gen.named_parameters()):
            if p.dim() > 1:
                fan_in = p[0].numel()
                p.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=rng)
            else:
                p.zero_()
    return gen


def generator_forward(gen: TextureGenerator, image: ImageTensor) -> Texture:
    """Single-image convenience wrapper around the batched torch forward."""
    x = torch.tensor(image.pixels, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        out = gen(x)
    return Texture(out[0].permute(1, 2, 0).numpy().astype(np.float64).clip(0.0, 1.0))


def save_checkpoint(gen: TextureGenerator, path) -> None:
    """Documented container: parameter name -> array, plus the config, versioned."""
    arrays = {name: p.detach().numpy() for name, p in gen.named_parameters()}
    meta = json.dumps({"version": _CHECKPOINT_VERSION, "config": asdict(gen.config)})
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> TextureGenerator:
    try:
        data = np.load(path)
    except (OSError, ValueError) as e:
        raise FormatError(f"checkpoint unreadable: {e}") from e
    if "__meta__" not in data:
        raise FormatError("checkpoint missing __meta__ record")
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("version") != _CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version: {meta.get('version')!r}")
    cfg = meta["config"]
    cfg["in_dims"] = tuple(cfg["in_dims"])
    cfg["out_dims"] = tuple(cfg["out_dims"])
    config = GeneratorConfig(**cfg)
    gen = TextureGenerator(config)
    with torch.no_grad():
        for name, p in gen.named_parameters():
            if name not in data:
                raise FormatError(f"checkpoint missing parameter '{name}'")
            arr = data[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise FormatError(f"checkpoint parameter '{name}' has wrong shape {arr.shape}")
            p.copy_(torch.tensor(arr))
    return gen
