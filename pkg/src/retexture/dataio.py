"""Dataset scanning, pose sidecars, backgrounds, render-tensor precompute and
synthetic data generation.

Pose estimation is consumed, never computed: each image carries a JSON sidecar
with the body parameters and a pixel-space camera. The synthetic generator
produces identities with known ground-truth textures, which makes exact
texture-recovery oracles possible.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from retexture import bodymodel, rendering
from retexture.bodymodel import BodyModelSpec, PoseParams, ShapeParams, Translation
from retexture.errors import DatasetError, FormatError
from retexture.rendering import Camera, ImageTensor, Texture

SIDECAR_SUFFIX = ".pose.json"
CACHE_SUFFIX = ".rten"


# ---------------------------------------------------------------------------
# Records and index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    image_path: Path
    identity_id: int
    pose_sidecar_path: Path
    render_tensor_cache_path: Path | None = None


@dataclass
class DatasetIndex:
    records: list[Record]
    split: str = "train"

    def __post_init__(self):
        if not self.records:
            raise DatasetError("dataset index has no records")
        paths = [r.image_path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DatasetError("dataset index contains duplicate image paths")
        for r in self.records:
            if r.identity_id < 0:
                raise DatasetError(f"negative identity id for {r.image_path}")

    @property
    def identities(self) -> list[int]:
        return sorted({r.identity_id for r in self.records})


@dataclass
class DatasetScan:
    train: DatasetIndex | None
    test: DatasetIndex | None
    skipped: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def load_image(path, dims: tuple[int, int] | None = None) -> ImageTensor:
    """8-bit RGB from disk, scaled to [0, 1]; optional bilinear resize to (h, w)."""
    img = Image.open(path).convert("RGB")
    if dims is not None and img.size != (dims[1], dims[0]):
        img = img.resize((dims[1], dims[0]), Image.BILINEAR)
    return ImageTensor(np.asarray(img, dtype=np.float64) / 255.0)


def save_image(image, path) -> None:
    """Lossless 8-bit PNG."""
    p = image.pixels if isinstance(image, ImageTensor) else np.asarray(image)
    arr = quantize(p)
    Image.fromarray(arr).save(path, format="PNG")


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] reals to 8-bit, round-half-up matching PNG storage."""
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Pose sidecars
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseSidecar:
    beta: np.ndarray  # (10,)
    theta: np.ndarray  # (72,)
    gamma: np.ndarray  # (3,)
    camera: Camera


def save_pose_sidecar(sidecar: PoseSidecar, path) -> None:
    doc = {
        "beta": np.asarray(sidecar.beta).tolist(),
        "theta": np.asarray(sidecar.theta).tolist(),
        "gamma": np.asarray(sidecar.gamma).tolist(),
        "camera": {
            "scale": float(sidecar.camera.scale),
            "center": sidecar.camera.center.tolist(),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_pose_sidecar(path) -> PoseSidecar:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"pose sidecar is not valid JSON: {e}") from e
    lengths = {"beta": 10, "theta": 72, "gamma": 3}
    values = {}
    for name, n in lengths.items():
        if name not in doc:
            raise FormatError(f"pose sidecar missing field '{name}'")
        arr = np.asarray(doc[name], dtype=np.float64)
        if arr.shape != (n,):
            raise FormatError(f"pose sidecar field '{name}' must have length {n}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"pose sidecar field '{name}' contains non-finite values")
        values[name] = arr
    cam = doc.get("camera")
    if not isinstance(cam, dict) or "scale" not in cam or "center" not in cam:
        raise FormatError("pose sidecar missing field 'camera' with scale and center")
    center = np.asarray(cam["center"], dtype=np.float64)
    if center.shape != (2,) or not np.all(np.isfinite(center)):
        raise FormatError("pose sidecar field 'camera.center' must be a finite 2-vector")
    scale = float(cam["scale"])
    if not (np.isfinite(scale) and scale > 0):
        raise FormatError("pose sidecar field 'camera.scale' must be finite and positive")
    return PoseSidecar(camera=Camera(scale=scale, center=center), **values)


def posed_mesh_from_sidecar(spec: BodyModelSpec, sidecar: PoseSidecar):
    return bodymodel.pose_mesh(
        spec,
        ShapeParams(sidecar.beta),
        PoseParams(sidecar.theta),
        Translation(sidecar.gamma),
    )


# ---------------------------------------------------------------------------
# Scanning real-style datasets
# ---------------------------------------------------------------------------

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


def scan_dataset(root_dir, test_identities) -> DatasetScan:
    """Index <identity>_<rest>.<ext> images with sidecars; split by identity.

    Images with unknown labels (prefix -1 or 0000) are excluded; unparseable
    names and missing sidecars go to the skip report, never crash the scan.
    """
    root = Path(root_dir)
    test_ids = {int(i) for i in test_identities}
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_EXTS) if root.is_dir() else []
    if not files:
        raise DatasetError(f"no images found in {root}")
    train_recs, test_recs, skipped = [], [], []
    for p in files:
        prefix = p.name.split("_", 1)[0]
        try:
            identity = int(prefix)
        except ValueError:
            skipped.append(f"{p.name}: unparseable identity prefix '{prefix}'")
            continue
        if identity <= 0:
            continue  # unknown / junk label
        sidecar = p.with_name(p.name + SIDECAR_SUFFIX)
        if not sidecar.exists():
            skipped.append(f"{p.name}: missing sidecar {sidecar.name}")
            continue
        rec = Record(image_path=p, identity_id=identity, pose_sidecar_path=sidecar)
        (test_recs if identity in test_ids else train_recs).append(rec)
    train = DatasetIndex(train_recs, split="train") if train_recs else None
    test = DatasetIndex(test_recs, split="test") if test_recs else None
    if train is None and test is None:
        raise DatasetError(f"no usable records in {root}")
    return DatasetScan(train=train, test=test, skipped=skipped)


# ---------------------------------------------------------------------------
# Backgrounds
# ---------------------------------------------------------------------------


class BackgroundPool:
    """Uniform random crops from a directory of images; mid-gray fallback."""

    def __init__(self, directory, crop_dims: tuple[int, int], seed: int = 0):
        self.crop_dims = crop_dims
        self.rng = np.random.default_rng(seed)
        h, w = crop_dims
        self.images: list[np.ndarray] = []
        directory = Path(directory) if directory is not None else None
        if directory is not None and directory.is_dir():
            for p in sorted(directory.iterdir()):
                if p.suffix.lower() not in _IMAGE_EXTS:
                    continue
                arr = load_image(p).pixels
                if arr.shape[0] < h or arr.shape[1] < w:
                    warnings.warn(f"background {p.name} smaller than crop {crop_dims}, skipped")
                    continue
                self.images.append(arr)
        if not self.images:
            warnings.warn("no usable background images; falling back to solid mid-gray")

    def sample(self) -> ImageTensor:
        h, w = self.crop_dims
        if not self.images:
            return ImageTensor(np.full((h, w, 3), 0.5))
        arr = self.images[int(self.rng.integers(len(self.images)))]
        r = int(self.rng.integers(arr.shape[0] - h + 1))
        c = int(self.rng.integers(arr.shape[1] - w + 1))
        return ImageTensor(arr[r : r + h, c : c + w].copy())


def background_pool(directory, crop_dims: tuple[int, int], seed: int = 0) -> BackgroundPool:
    return BackgroundPool(directory, crop_dims, seed)


# ---------------------------------------------------------------------------
# Render-tensor precompute
# ---------------------------------------------------------------------------


def precompute_render_tensors(
    index: DatasetIndex,
    spec: BodyModelSpec,
    image_dims: tuple[int, int],
    texture_dims: tuple[int, int],
    cache_dir,
    workers: int = 1,
) -> tuple[DatasetIndex, list[str]]:
    """One cache file per record; existing valid caches are reused (idempotent).

    Returns the updated index and a per-record failure report. Raises only if
    every record fails.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    failures: list[str] = []
    results: dict[int, Record] = {}

    def build(i_rec):
        i, rec = i_rec
        cache = cache_dir / (Path(rec.image_path).stem + CACHE_SUFFIX)
        if cache.exists():
            try:
                rendering.load_render_tensor(cache)
                return i, replace(rec, render_tensor_cache_path=cache), None
            except FormatError:
                pass  # stale or corrupt cache, rebuild
        try:
            sidecar = load_pose_sidecar(rec.pose_sidecar_path)
            mesh = posed_mesh_from_sidecar(spec, sidecar)
            rt = rendering.build_render_tensor(mesh, sidecar.camera, image_dims, texture_dims)
            rendering.save_render_tensor(rt, cache)
            return i, replace(rec, render_tensor_cache_path=cache), None
        except Exception as e:  # per-record failure, collected
            return i, rec, f"{Path(rec.image_path).name}: {e}"

    items = list(enumerate(index.records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(build, items))
    else:
        outcomes = [build(it) for it in items]
    ok_records = []
    for i, rec, err in sorted(outcomes):
        if err is None:
            ok_records.append(rec)
        else:
            failures.append(err)
        results[i] = rec
    if not ok_records:
        raise DatasetError("render-tensor precompute failed for every record:\n" + "\n".join(failures))
    return DatasetIndex(ok_records, split=index.split), failures


# ---------------------------------------------------------------------------
# Synthetic dataset with ground-truth textures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_identities: int = 8
    views_per_identity: int = 8
    image_dims: tuple[int, int] = (128, 64)
    texture_dims: tuple[int, int] = (32, 32)
    pose_source: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.views_per_identity < 1:
            raise DatasetError("identity and view counts must be >= 1")


def walking_pose_source(n_poses: int, seed: int = 0) -> list[PoseParams]:
    """Procedural walking-style poses: swinging limbs around an upright root.

    The root is flipped so the model-space up axis maps to image rows top-down.
    """
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_poses):
        phase = 2.0 * np.pi * i / max(n_poses, 1)
        theta = np.zeros(72)
        theta[0] = np.pi  # face the camera, y-down image convention
        swing = 0.45 * np.sin(phase) + 0.05 * rng.standard_normal()
        # contralateral arm/leg swing about the x axis
        theta[16 * 3 + 0] = swing  # l_shoulder
        theta[17 * 3 + 0] = -swing  # r_shoulder
        theta[1 * 3 + 0] = -0.7 * swing  # l_hip
        theta[2 * 3 + 0] = 0.7 * swing  # r_hip
        theta[4 * 3 + 0] = 0.35 * abs(swing)  # l_knee
        theta[5 * 3 + 0] = 0.35 * abs(swing)  # r_knee
        theta[18 * 3 + 0] = 0.2 * swing  # l_elbow
        theta[19 * 3 + 0] = -0.2 * swing  # r_elbow
        theta[0 * 3 + 1] = 0.25 * np.sin(phase + rng.uniform(0, 0.3))  # slight body turn
        poses.append(PoseParams(theta))
    return poses


def fit_camera(mesh, image_dims: tuple[int, int], fill: float = 0.85) -> Camera:
    """Weak-perspective camera framing the posed mesh inside the image."""
    h_y, w_y = image_dims
    v = mesh.vertices
    span_x = v[:, 0].max() - v[:, 0].min()
    span_y = v[:, 1].max() - v[:, 1].min()
    scale = fill * min(w_y / max(span_x, 1e-9), h_y / max(span_y, 1e-9))
    cx = w_y / 2.0 - scale * (v[:, 0].max() + v[:, 0].min()) / 2.0
    cy = h_y / 2.0 - scale * (v[:, 1].max() + v[:, 1].min()) / 2.0
    return Camera(scale=scale, center=np.array([cx, cy]))


def identity_texture(seed: int, identity: int, texture_dims: tuple[int, int]) -> Texture:
    """Deterministic per-identity texture: smooth color fields plus stripes.

    Quantized to 8 bits so the on-disk PNG is the exact ground truth.
    """
    h_t, w_t = texture_dims
    rng = np.random.default_rng((seed, identity, 0xC01))
    yy, xx = np.meshgrid(np.linspace(0, 1, h_t), np.linspace(0, 1, w_t), indexing="ij")
    # Anchor each identity at a well-separated hue (golden-ratio sequence) so
    # identities stay discriminable; fields and stripes add texture on top.
    hue = (0.11 + identity * 0.61803398875) % 1.0
    base_rgb = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
    tex = np.zeros((h_t, w_t, 3))
    for c in range(3):
        a1, a2 = rng.uniform(0.04, 0.1, size=2)
        f1, f2 = rng.uniform(1.0, 4.0, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        tex[:, :, c] = base_rgb[c] + a1 * np.sin(2 * np.pi * f1 * yy + p1) + a2 * np.cos(
            2 * np.pi * f2 * xx + p2
        )
    n_stripes = int(rng.integers(2, 5))
    stripe_color = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.7, 0.8))
    for s in range(n_stripes):
        r0 = int(rng.integers(0, h_t - 2))
        tex[r0 : r0 + 2, :, :] = stripe_color
    tex = np.clip(tex, 0.0, 1.0)
    return Texture(quantize(tex) / 255.0)


def synthetic_background(seed: int, identity: int, view: int, dims: tuple[int, int]) -> ImageTensor:
    """Deterministic smooth gradient background for a synthetic record."""
    h, w = dims
    rng = np.random.default_rng((seed, identity, view, 0xB6))
    top = rng.uniform(0, 1, size=3)
    bottom = rng.uniform(0, 1, size=3)
    t = np.linspace(0, 1, h)[:, None, None]
    grad = (1 - t) * top + t * bottom
    bg = np.broadcast_to(grad, (h, w, 3)).copy()
    bg += 0.05 * np.sin(2 * np.pi * np.arange(w) / w)[None, :, None]
    return ImageTensor(quantize(np.clip(bg, 0, 1)) / 255.0)


def generate_synthetic_dataset(
    spec: SyntheticDatasetSpec,
    body: BodyModelSpec,
    out_dir,
) -> tuple[DatasetIndex, dict[int, Path]]:
    """Render a labeled multi-view dataset with known ground-truth textures.

    Layout: images/<id>_<view>.png (+ .pose.json sidecars), textures/<id>.png.
    Fully deterministic given the spec seed. Returns the index and the map
    identity -> ground-truth texture path.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    tex_dir = out / "textures"
    img_dir.mkdir(parents=True, exist_ok=True)
    tex_dir.mkdir(parents=True, exist_ok=True)
    poses = spec.pose_source or walking_pose_source(
        max(spec.views_per_identity, 4), seed=spec.seed + 17
    )
    records = []
    textures: dict[int, Path] = {}
    for identity in range(1, spec.n_identities + 1):
        tex = identity_texture(spec.seed, identity, spec.texture_dims)
        tex_path = tex_dir / f"{identity:04d}.png"
        save_image(ImageTensor(tex.pixels), tex_path)
        textures[identity] = tex_path
        for view in range(spec.views_per_identity):
            theta = poses[view % len(poses)]
            beta = ShapeParams.zeros()
            gamma = Translation.zeros()
            mesh = bodymodel.pose_mesh(body, beta, theta, gamma)
            camera = fit_camera(mesh, spec.image_dims)
            rt = rendering.build_render_tensor(mesh, camera, spec.image_dims, spec.texture_dims)
            bg = synthetic_background(spec.seed, identity, view, spec.image_dims)
            img = rendering.apply(rt, tex, bg)
            name = f"{identity:04d}_{view:03d}.png"
            img_path = img_dir / name
            save_image(img, img_path)
            sidecar_path = img_dir / (name + SIDECAR_SUFFIX)
            save_pose_sidecar(
                PoseSidecar(beta=beta.beta, theta=theta.theta, gamma=gamma.gamma, camera=camera),
                sidecar_path,
            )
            records.append(
                Record(image_path=img_path, identity_id=identity, pose_sidecar_path=sidecar_path)
            )
    return DatasetIndex(records, split="train"), textures


def split_by_views(index: DatasetIndex, test_views_per_identity: int = 2) -> DatasetScan:
    """Hold out the trailing views of every identity as the test split."""
    by_id: dict[int, list[Record]] = {}
    for rec in index.records:
        by_id.setdefault(rec.identity_id, []).append(rec)
    train, test = [], []
    for pid in sorted(by_id):
        recs = sorted(by_id[pid], key=lambda r: str(r.image_path))
        k = min(test_views_per_identity, len(recs) - 1)
        train.extend(recs[: len(recs) - k])
        test.extend(recs[len(recs) - k :])
    return DatasetScan(
        train=DatasetIndex(train, split="train"),
        test=DatasetIndex(test, split="test") if test else None,
    )
