"""Scalar losses for texture training and its ablations.

All losses accept torch tensors (gradients flow) or numpy arrays (converted).
Each returns a 0-dim torch tensor; use float() for a plain number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from retexture.errors import ConfigError, ParameterError
from retexture.rendering import Texture

DEFAULT_LAMBDA_REID = 5e3
DEFAULT_LAMBDA_FACE = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_reid: float = DEFAULT_LAMBDA_REID
    lambda_face: float = DEFAULT_LAMBDA_FACE

    def __post_init__(self):
        for name in ("lambda_reid", "lambda_face"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ParameterError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class TripletMargin:
    alpha: float = 0.3

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ParameterError(f"margin must be finite and non-negative, got {self.alpha}")


@dataclass(frozen=True)
class ReferenceTexture:
    """Scanned-style reference texture plus the head/hand texel mask."""

    texture: Texture
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != self.texture.pixels.shape[:2]:
            raise ParameterError(
                f"mask shape {self.mask.shape} does not match texture "
                f"{self.texture.pixels.shape[:2]}"
            )


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _stack_list(stack):
    acts = getattr(stack, "activations", stack)
    return [_t(a) for a in acts]


def feature_distance(feats_x, feats_y) -> torch.Tensor:
    """Sum over layers of the unsquared Euclidean norm of the activation difference."""
    fx, fy = _stack_list(feats_x), _stack_list(feats_y)
    if len(fx) != len(fy):
        raise ParameterError(f"feature lists have different lengths: {len(fx)} vs {len(fy)}")
    total = None
    for a, b in zip(fx, fy):
        if a.shape != b.shape:
            raise ParameterError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        d = torch.linalg.vector_norm((a - b).reshape(-1))
        total = d if total is None else total + d
    return total


def reid_loss(fx, fy) -> torch.Tensor:
    """Layer-wise feature distance from the identity network (4 layers, no averaging)."""
    return feature_distance(fx, fy)


def face_loss(t, ref: ReferenceTexture) -> torch.Tensor:
    """L1 distance to the reference texture over the head/hand texel mask."""
    tp = _t(t.pixels if isinstance(t, Texture) else t)
    ts = _t(ref.texture.pixels)
    if tp.shape != ts.shape:
        raise ParameterError(f"texture dims {tuple(tp.shape)} do not match reference {tuple(ts.shape)}")
    mask = _t(ref.mask.astype(np.float64)).unsqueeze(-1)
    return (mask * (tp - ts)).abs().sum()


def pixel_l1_loss(x, y) -> torch.Tensor:
    """Sum of absolute pixel differences between two images."""
    xp = _t(x.pixels if hasattr(x, "pixels") else x)
    yp = _t(y.pixels if hasattr(y, "pixels") else y)
    if xp.shape != yp.shape:
        raise ParameterError(f"image dims differ: {tuple(xp.shape)} vs {tuple(yp.shape)}")
    return (xp - yp).abs().sum()


def perceptual_loss(extractor, x, y) -> torch.Tensor:
    """Layer-wise feature distance over a generic 5-tap extractor."""
    fx = extractor(x)
    fy = extractor(y)
    fx, fy = list(fx), list(fy)
    if len(fx) != 5 or len(fy) != 5:
        raise ConfigError(f"perceptual extractor must expose 5 taps, got {len(fx)}")
    return feature_distance(fx, fy)


def softmax_loss(gs_y, gs_x) -> torch.Tensor:
    """Per-part cross-entropy against the input image's softened, detached logits."""
    py = _t(gs_y)
    px = _t(gs_x)
    if py.shape != px.shape:
        raise ParameterError(f"logit shapes differ: {tuple(py.shape)} vs {tuple(px.shape)}")
    target = torch.softmax(px, dim=-1).detach()
    logp = torch.log_softmax(py, dim=-1)
    return -(target * logp).sum()


def triplet_hard_loss(g2_y, g2_p, g2_n, margin: TripletMargin) -> torch.Tensor:
    """Hinge of the squared-distance gap on flattened part features."""
    y, p, n = _t(g2_y).reshape(-1), _t(g2_p).reshape(-1), _t(g2_n).reshape(-1)
    if y.shape != p.shape or y.shape != n.shape:
        raise ParameterError("triplet features must share a shape")
    d_pos = ((y - p) ** 2).sum()
    d_neg = ((y - n) ** 2).sum()
    return torch.clamp(d_pos - d_neg + margin.alpha, min=0.0)


def deep_feature_loss(pf_x, pf_y) -> torch.Tensor:
    """L1 distance of the concatenated pooled and projected part features."""
    g1x, g2x = _t(pf_x.g1), _t(pf_x.g2)
    g1y, g2y = _t(pf_y.g1), _t(pf_y.g2)
    if g1x.shape != g1y.shape or g2x.shape != g2y.shape:
        raise ParameterError("part feature shapes differ")
    return (g1y - g1x).abs().sum() + (g2y - g2x).abs().sum()


def total_loss(reid, face, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the identity-feature term and the face term."""
    return w.lambda_reid * _t(reid) + w.lambda_face * _t(face)
