"""Evaluation metrics: SSIM, mask-SSIM, inception-style score and its masked form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from retexture.errors import ParameterError
from retexture.rendering import ImageTensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

@dataclass(frozen=True)
class MetricReport:
    ssim: float
    mask_ssim: float
    is_score: float
    mask_is: float
    n_images: int

    def __post_init__(self):
        if self.n_images <= 0:
            raise ParameterError("n_images must be positive")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_WINDOW = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _planes(image) -> np.ndarray:
    p = image.pixels if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float64)
    if p.ndim == 2:
        return p[..., None]
    return p


def _ssim_plane(gx: np.ndarray, gy: np.ndarray) -> float:
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = convolve2d(gx, _WINDOW, mode="valid")
    mu_y = convolve2d(gy, _WINDOW, mode="valid")
    exx = convolve2d(gx * gx, _WINDOW, mode="valid")
    eyy = convolve2d(gy * gy, _WINDOW, mode="valid")
    exy = convolve2d(gx * gy, _WINDOW, mode="valid")
    var_x = exx - mu_x * mu_x
    var_y = eyy - mu_y * mu_y
    cov = exy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(x, y) -> float:
    """Mean local SSIM over a Gaussian window, averaged across channels.

    Dynamic range 1.0; statistics from valid-mode windows only.
    """
    gx, gy = _planes(x), _planes(y)
    if gx.shape != gy.shape:
        raise ParameterError(f"image dims differ: {gx.shape} vs {gy.shape}")
    if gx.shape[0] < SSIM_WINDOW or gx.shape[1] < SSIM_WINDOW:
        raise ParameterError(
            f"image dims {gx.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    return float(np.mean([_ssim_plane(gx[..., c], gy[..., c]) for c in range(gx.shape[2])]))


def mask_ssim(x, y, mask: np.ndarray) -> float:
    """SSIM after zeroing both images by the pose mask (full-frame statistics)."""
    gx, gy = _planes(x), _planes(y)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != gx.shape[:2]:
        raise ParameterError(f"mask dims {m.shape} do not match image {gx.shape[:2]}")
    return ssim(gx * m[..., None], gy * m[..., None])


def inception_score(images, classifier, splits: int = 1) -> float:
    """exp of mean per-split KL between per-image class posteriors and the marginal."""
    n = len(images)
    if n == 0:
        raise ParameterError("image list is empty")
    if splits < 1 or n % splits != 0:
        raise ParameterError(f"splits = {splits} must divide the image count {n}")
    probs = np.stack([np.asarray(classifier(img), dtype=np.float64) for img in images])
    part = n // splits
    scores = []
    for s in range(splits):
        p = probs[s * part : (s + 1) * part]
        q = p.mean(axis=0, keepdims=True)
        kl = np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - np.log(np.maximum(q, 1e-300))), 0.0)
        scores.append(np.exp(kl.sum(axis=1).mean()))
    return float(np.mean(scores))


def mask_is(images, masks, classifier, splits: int = 1) -> float:
    """Inception-style score over images with backgrounds zeroed by their masks."""
    if len(images) != len(masks):
        raise ParameterError(f"got {len(images)} images but {len(masks)} masks")
    masked = []
    for img, m in zip(images, masks):
        p = img.pixels if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float64)
        masked.append(ImageTensor(p * np.asarray(m, dtype=np.float64)[..., None]))
    return inception_score(masked, classifier, splits)
