"""Rasterization into a precomputed sparse rendering operator.

For a fixed posed mesh and camera, rendering a texture is a linear map from
texel space to pixel space. That map is built once per image (z-buffered
rasterization, barycentric UV interpolation, bilinear texel weights) and then
applied as a sparse matrix, so texture optimization never touches geometry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from retexture.bodymodel import BodyMesh
from retexture.errors import FormatError, ParameterError

_ENTRY_DTYPE = np.dtype([("pixel", "<u4"), ("texel", "<u4"), ("weight", "<f4")])
_MAGIC = b"RTEN"
_VERSION = 1


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: pixel = scale * (X, Y) + center; Z kept for visibility."""

    scale: float
    center: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError(f"camera scale must be finite and positive, got {self.scale}")
        center = np.asarray(self.center, dtype=np.float64)
        if center.shape != (2,):
            raise ParameterError(f"camera center must have shape (2,), got {center.shape}")
        object.__setattr__(self, "center", center)


@dataclass(frozen=True)
class Texture:
    """Texel grid (h_t, w_t, 3) with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ParameterError(f"texture must be (h_t, w_t, 3), got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ParameterError("texture values must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)


@dataclass(frozen=True)
class ImageTensor:
    """Pixel grid (h_y, w_y, 3) with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ParameterError(f"image must be (h_y, w_y, 3), got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ParameterError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)


@dataclass
class RenderTensor:
    """Channel-shared sparse map from texels to covered pixels, plus coverage mask.

    entries are sorted by (pixel_index, texel_index); for every covered pixel the
    weights are non-negative and sum to 1.
    """

    image_dims: tuple[int, int]
    texture_dims: tuple[int, int]
    pixel_index: np.ndarray  # (E,) uint32, row-major pixel ids
    texel_index: np.ndarray  # (E,) uint32, row-major texel ids
    weights: np.ndarray  # (E,) float32
    coverage: np.ndarray  # (h_y, w_y) bool
    _torch_cache: object = field(default=None, repr=False, compare=False)

    def validate(self) -> None:
        h_y, w_y = self.image_dims
        h_t, w_t = self.texture_dims
        e = len(self.weights)
        if len(self.pixel_index) != e or len(self.texel_index) != e:
            raise FormatError("entry arrays have mismatched lengths")
        if self.coverage.shape != (h_y, w_y):
            raise FormatError(f"coverage must be {(h_y, w_y)}, got {self.coverage.shape}")
        if e:
            if self.pixel_index.max() >= h_y * w_y:
                raise FormatError("pixel_index out of range")
            if self.texel_index.max() >= h_t * w_t:
                raise FormatError("texel_index out of range")
            if np.any(self.weights < 0):
                raise FormatError("negative weight in render tensor")
            order = np.lexsort((self.texel_index, self.pixel_index))
            if not np.array_equal(order, np.arange(e)):
                raise FormatError("entries must be sorted by (pixel_index, texel_index)")
        covered = np.flatnonzero(self.coverage.ravel())
        entry_pixels = np.unique(self.pixel_index)
        if not np.array_equal(covered, entry_pixels):
            raise FormatError("coverage does not match the set of pixels with entries")
        if e:
            sums = np.zeros(h_y * w_y)
            np.add.at(sums, self.pixel_index, self.weights.astype(np.float64))
            if np.any(np.abs(sums[covered] - 1.0) > 1e-6):
                raise FormatError("covered-pixel weights must sum to 1 (+-1e-6)")

    def to_torch(self, device="cpu"):
        """Sparse (h_y*w_y, h_t*w_t) float32 matrix for autograd-based training."""
        if self._torch_cache is None:
            import torch

            h_y, w_y = self.image_dims
            h_t, w_t = self.texture_dims
            idx = torch.tensor(
                np.stack([self.pixel_index.astype(np.int64), self.texel_index.astype(np.int64)])
            )
            vals = torch.tensor(self.weights, dtype=torch.float32)
            mat = torch.sparse_coo_tensor(
                idx, vals, (h_y * w_y, h_t * w_t), check_invariants=False
            ).coalesce()
            self._torch_cache = mat.to(device)
        return self._torch_cache


def project(camera: Camera, mesh: BodyMesh) -> np.ndarray:
    """Per-vertex (pixel x, pixel y, depth z); z is the untouched vertex Z."""
    v = mesh.vertices
    out = np.empty_like(v)
    out[:, 0] = camera.scale * v[:, 0] + camera.center[0]
    out[:, 1] = camera.scale * v[:, 1] + camera.center[1]
    out[:, 2] = v[:, 2]
    return out


def build_render_tensor(
    mesh: BodyMesh,
    camera: Camera,
    image_dims: tuple[int, int],
    texture_dims: tuple[int, int],
) -> RenderTensor:
    """Rasterize the mesh into the sparse texel-to-pixel operator.

    Pixel centers are sampled at (col + 0.5, row + 0.5); the nearest (smallest
    depth) triangle wins each pixel; its barycentric UV is turned into the 4
    bilinear texel weights, clamped to the texel grid edges. Deterministic.
    """
    h_y, w_y = image_dims
    h_t, w_t = texture_dims
    pts = project(camera, mesh)
    faces = mesh.faces
    uvs = mesh.uv_coords

    depth = np.full((h_y, w_y), np.inf)
    face_id = np.full((h_y, w_y), -1, dtype=np.int64)
    bary = np.zeros((h_y, w_y, 3))

    for fi in range(faces.shape[0]):
        tri = pts[faces[fi]]  # (3, 3): x, y, z
        x, y = tri[:, 0], tri[:, 1]
        denom = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
        if abs(denom) < 1e-12:
            continue  # degenerate projected triangle
        c0 = max(int(np.floor(x.min() - 0.5)), 0)
        c1 = min(int(np.ceil(x.max() - 0.5)), w_y - 1)
        r0 = max(int(np.floor(y.min() - 0.5)), 0)
        r1 = min(int(np.ceil(y.max() - 0.5)), h_y - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols = np.arange(c0, c1 + 1)
        rows = np.arange(r0, r1 + 1)
        px = cols[None, :] + 0.5
        py = rows[:, None] + 0.5
        w1 = ((px - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (py - y[0])) / denom
        w2 = ((x[1] - x[0]) * (py - y[0]) - (px - x[0]) * (y[1] - y[0])) / denom
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        z = w0 * tri[0, 2] + w1 * tri[1, 2] + w2 * tri[2, 2]
        block = depth[r0 : r1 + 1, c0 : c1 + 1]
        better = inside & (z < block)
        if not better.any():
            continue
        block[better] = z[better]
        face_id[r0 : r1 + 1, c0 : c1 + 1][better] = fi
        sub = bary[r0 : r1 + 1, c0 : c1 + 1]
        sub[better] = np.stack([w0[better], w1[better], w2[better]], axis=-1)

    coverage = face_id >= 0
    rr, cc = np.nonzero(coverage)
    acc: dict[tuple[int, int], float] = {}
    for r, c in zip(rr.tolist(), cc.tolist()):
        fi = face_id[r, c]
        b = bary[r, c]
        uv = b @ uvs[fi]  # (2,)
        tx = np.clip(uv[0] * w_t - 0.5, 0.0, w_t - 1.0)
        ty = np.clip(uv[1] * h_t - 0.5, 0.0, h_t - 1.0)
        x0 = int(np.floor(tx))
        y0 = int(np.floor(ty))
        x1 = min(x0 + 1, w_t - 1)
        y1 = min(y0 + 1, h_t - 1)
        fx = tx - x0
        fy = ty - y0
        pix = r * w_y + c
        for tyi, txi, w in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0, x1, (1 - fy) * fx),
            (y1, x0, fy * (1 - fx)),
            (y1, x1, fy * fx),
        ):
            if w <= 0.0:
                continue
            key = (pix, tyi * w_t + txi)
            acc[key] = acc.get(key, 0.0) + w

    if acc:
        keys = sorted(acc.keys())
        pixel_index = np.array([k[0] for k in keys], dtype=np.uint32)
        texel_index = np.array([k[1] for k in keys], dtype=np.uint32)
        weights = np.array([acc[k] for k in keys], dtype=np.float32)
    else:
        pixel_index = np.zeros(0, dtype=np.uint32)
        texel_index = np.zeros(0, dtype=np.uint32)
        weights = np.zeros(0, dtype=np.float32)

    rt = RenderTensor(
        image_dims=image_dims,
        texture_dims=texture_dims,
        pixel_index=pixel_index,
        texel_index=texel_index,
        weights=weights,
        coverage=coverage,
    )
    rt.validate()
    return rt


def apply(rt: RenderTensor, texture: Texture, background: ImageTensor) -> ImageTensor:
    """Render: covered pixels get the weighted texel sum, the rest the background."""
    h_y, w_y = rt.image_dims
    h_t, w_t = rt.texture_dims
    if texture.pixels.shape[:2] != (h_t, w_t):
        raise ParameterError(
            f"texture dims {texture.pixels.shape[:2]} do not match render tensor {(h_t, w_t)}"
        )
    if background.pixels.shape[:2] != (h_y, w_y):
        raise ParameterError(
            f"background dims {background.pixels.shape[:2]} do not match render tensor {(h_y, w_y)}"
        )
    out = background.pixels.reshape(h_y * w_y, 3).copy()
    out[rt.coverage.ravel()] = 0.0
    tex = texture.pixels.reshape(h_t * w_t, 3)
    contrib = rt.weights.astype(np.float64)[:, None] * tex[rt.texel_index]
    np.add.at(out, rt.pixel_index, contrib)
    return ImageTensor(np.clip(out.reshape(h_y, w_y, 3), 0.0, 1.0))


def apply_raw(rt: RenderTensor, texture_values: np.ndarray) -> np.ndarray:
    """Linear part only: (h_t*w_t, k) texel values -> (h_y*w_y, k) pixel values."""
    h_y, w_y = rt.image_dims
    out = np.zeros((h_y * w_y, texture_values.shape[1]))
    contrib = rt.weights.astype(np.float64)[:, None] * texture_values[rt.texel_index]
    np.add.at(out, rt.pixel_index, contrib)
    return out


def apply_transpose(rt: RenderTensor, image_cotangent: np.ndarray) -> np.ndarray:
    """Exact adjoint of apply on the foreground: (h_y, w_y, c) -> (h_t, w_t, c)."""
    h_y, w_y = rt.image_dims
    h_t, w_t = rt.texture_dims
    cot = np.asarray(image_cotangent, dtype=np.float64)
    if cot.shape[:2] != (h_y, w_y):
        raise ParameterError(
            f"cotangent dims {cot.shape[:2]} do not match render tensor {(h_y, w_y)}"
        )
    c = cot.shape[2]
    flat = cot.reshape(h_y * w_y, c)
    grad = np.zeros((h_t * w_t, c))
    contrib = rt.weights.astype(np.float64)[:, None] * flat[rt.pixel_index]
    np.add.at(grad, rt.texel_index, contrib)
    return grad.reshape(h_t, w_t, c)


def pose_mask(rt: RenderTensor) -> np.ndarray:
    """Binary foreground mask of the rendered body (the operator's coverage)."""
    return rt.coverage.copy()


def save_render_tensor(rt: RenderTensor, path) -> None:
    """Binary cache: RTEN magic, dims, sorted entries, bit-packed coverage."""
    h_y, w_y = rt.image_dims
    h_t, w_t = rt.texture_dims
    entries = np.empty(len(rt.weights), dtype=_ENTRY_DTYPE)
    entries["pixel"] = rt.pixel_index
    entries["texel"] = rt.texel_index
    entries["weight"] = rt.weights
    packed = np.packbits(rt.coverage.astype(np.uint8).ravel())
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIIQ", _VERSION, h_y, w_y, h_t, w_t, len(entries)))
        f.write(entries.tobytes())
        f.write(packed.tobytes())


def load_render_tensor(path) -> RenderTensor:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 28 or data[:4] != _MAGIC:
        raise FormatError("render tensor cache: bad or missing RTEN header")
    version, h_y, w_y, h_t, w_t, count = struct.unpack_from("<IIIIIQ", data, 4)
    if version != _VERSION:
        raise FormatError(f"render tensor cache: unsupported version {version}")
    offset = 4 + 28
    entry_bytes = count * _ENTRY_DTYPE.itemsize
    cov_bytes = (h_y * w_y + 7) // 8
    if len(data) != offset + entry_bytes + cov_bytes:
        raise FormatError(
            f"render tensor cache: expected {offset + entry_bytes + cov_bytes} bytes, "
            f"got {len(data)}"
        )
    entries = np.frombuffer(data, dtype=_ENTRY_DTYPE, count=count, offset=offset)
    packed = np.frombuffer(data, dtype=np.uint8, offset=offset + entry_bytes)
    coverage = np.unpackbits(packed, count=h_y * w_y).reshape(h_y, w_y).astype(bool)
    rt = RenderTensor(
        image_dims=(h_y, w_y),
        texture_dims=(h_t, w_t),
        pixel_index=entries["pixel"].copy(),
        texel_index=entries["texel"].copy(),
        weights=entries["weight"].copy(),
        coverage=coverage,
    )
    rt.validate()
    return rt
