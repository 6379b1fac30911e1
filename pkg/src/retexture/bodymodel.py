"""Parametric body mesh: shape blendshapes, forward kinematics and linear blend skinning.

The mesh is a function of shape coefficients (10), per-joint axis-angle rotations
(24 joints x 3) and a global translation. A procedural low-polygon mannequin
("desk body") with a non-overlapping UV atlas stands in for licensed body model
assets in tests and synthetic data generation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from retexture.errors import FormatError, ParameterError

NUM_JOINTS = 24
NUM_SHAPE_COEFFS = 10

# Parent of each joint; root (pelvis) has parent -1. Standard 24-joint layout:
# 0 pelvis, 1/2 hips, 3/6/9 spine, 4/5 knees, 7/8 ankles, 10/11 feet, 12 neck,
# 13/14 collars, 15 head, 16/17 shoulders, 18/19 elbows, 20/21 wrists, 22/23 hands.
JOINT_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)


@dataclass(frozen=True)
class ShapeParams:
    """Blendshape coefficients, length 10."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (NUM_SHAPE_COEFFS,):
            raise ParameterError(f"beta must have length {NUM_SHAPE_COEFFS}, got shape {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise ParameterError("beta must be finite")
        object.__setattr__(self, "beta", beta)

    @staticmethod
    def zeros() -> "ShapeParams":
        return ShapeParams(np.zeros(NUM_SHAPE_COEFFS))


@dataclass(frozen=True)
class PoseParams:
    """Axis-angle rotations, length 72 (root orientation + 23 body joints)."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (NUM_JOINTS * 3,):
            raise ParameterError(f"theta must have length {NUM_JOINTS * 3}, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ParameterError("theta must be finite")
        object.__setattr__(self, "theta", theta)

    @staticmethod
    def zeros() -> "PoseParams":
        return PoseParams(np.zeros(NUM_JOINTS * 3))


@dataclass(frozen=True)
class Translation:
    """Global translation of the posed mesh, model units."""

    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if gamma.shape != (3,):
            raise ParameterError(f"gamma must have length 3, got shape {gamma.shape}")
        if not np.all(np.isfinite(gamma)):
            raise ParameterError("gamma must be finite")
        object.__setattr__(self, "gamma", gamma)

    @staticmethod
    def zeros() -> "Translation":
        return Translation(np.zeros(3))


@dataclass(frozen=True)
class BodyModelSpec:
    """Rest-pose template with skinning data and a UV atlas.

    template_vertices: (N, 3), faces: (F, 3) int, joint_tree: (24,) parent ids,
    joint_regressor: (24, N), skin_weights: (N, 24), shape_dirs: (N, 3, 10),
    uv_coords: (F, 3, 2) per-face-corner UVs in [0, 1]^2,
    face_hand_mask: (Hm, Wm) binary texture-space mask of head and hand regions.
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    joint_tree: np.ndarray
    joint_regressor: np.ndarray
    skin_weights: np.ndarray
    shape_dirs: np.ndarray
    uv_coords: np.ndarray
    face_hand_mask: np.ndarray

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]


@dataclass(frozen=True)
class BodyMesh:
    """A posed, translated triangle mesh sharing faces and UVs with its spec."""

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray


def validate_spec(spec: BodyModelSpec) -> None:
    """Check all BodyModelSpec invariants; raise FormatError naming the bad field."""
    v = spec.template_vertices
    if v.ndim != 2 or v.shape[1] != 3:
        raise FormatError(f"template_vertices must be (N, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise FormatError("template_vertices contains non-finite values")
    n = v.shape[0]
    f = spec.faces
    if f.ndim != 2 or f.shape[1] != 3:
        raise FormatError(f"faces must be (F, 3), got {f.shape}")
    if f.size and (f.min() < 0 or f.max() >= n):
        raise FormatError("faces contains vertex index out of range")
    tree = spec.joint_tree
    if tree.shape != (NUM_JOINTS,):
        raise FormatError(f"joint_tree must have {NUM_JOINTS} entries, got {tree.shape}")
    roots = np.flatnonzero(tree < 0)
    if len(roots) != 1:
        raise FormatError("joint_tree must have exactly one root")
    # acyclicity: walking up from every joint must terminate at the root
    for j in range(NUM_JOINTS):
        seen = set()
        k = j
        while tree[k] >= 0:
            if k in seen:
                raise FormatError("joint_tree contains a cycle")
            seen.add(k)
            k = int(tree[k])
            if k >= NUM_JOINTS:
                raise FormatError("joint_tree parent index out of range")
    if spec.joint_regressor.shape != (NUM_JOINTS, n):
        raise FormatError(
            f"joint_regressor must be ({NUM_JOINTS}, {n}), got {spec.joint_regressor.shape}"
        )
    if not np.all(np.isfinite(spec.joint_regressor)):
        raise FormatError("joint_regressor contains non-finite values")
    w = spec.skin_weights
    if w.shape != (n, NUM_JOINTS):
        raise FormatError(f"skin_weights must be ({n}, {NUM_JOINTS}), got {w.shape}")
    if np.any(w < 0):
        raise FormatError("skin_weights contains negative entries")
    sums = w.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise FormatError("skin_weights rows must sum to 1 (+-1e-6)")
    if spec.shape_dirs.shape != (n, 3, NUM_SHAPE_COEFFS):
        raise FormatError(
            f"shape_dirs must be ({n}, 3, {NUM_SHAPE_COEFFS}), got {spec.shape_dirs.shape}"
        )
    if not np.all(np.isfinite(spec.shape_dirs)):
        raise FormatError("shape_dirs contains non-finite values")
    uv = spec.uv_coords
    if uv.shape != (f.shape[0], 3, 2):
        raise FormatError(f"uv_coords must be ({f.shape[0]}, 3, 2), got {uv.shape}")
    if uv.size and (uv.min() < 0.0 or uv.max() > 1.0):
        raise FormatError("uv_coords must lie in [0, 1]")
    m = spec.face_hand_mask
    if m.ndim != 2:
        raise FormatError(f"face_hand_mask must be 2-D, got {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise FormatError("face_hand_mask must be binary")


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (angle = vector norm).

    Below norm 1e-8 a second-order Taylor expansion is used to stay smooth
    through zero.
    """
    v = np.asarray(axis_angle, dtype=np.float64)
    if v.shape != (3,):
        raise ParameterError(f"axis_angle must have shape (3,), got {v.shape}")
    angle = np.linalg.norm(v)
    kx, ky, kz = v
    skew = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    if angle < 1e-8:
        # I + K + K^2/2 with K the (unnormalized) skew matrix
        return np.eye(3) + skew + 0.5 * (skew @ skew)
    k = skew / angle
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def shape_offsets(spec: BodyModelSpec, beta: ShapeParams) -> np.ndarray:
    """Per-vertex blendshape displacement, (N, 3)."""
    return np.einsum("vck,k->vc", spec.shape_dirs, beta.beta)


def pose_mesh(
    spec: BodyModelSpec,
    beta: ShapeParams,
    theta: PoseParams,
    gamma: Translation,
) -> BodyMesh:
    """Pose the template: shape blending, forward kinematics, linear blend skinning.

    Vertices are skinned against the joint transforms relative to the rest pose,
    then translated by gamma.
    """
    v_shaped = spec.template_vertices + shape_offsets(spec, beta)
    joints = spec.joint_regressor @ v_shaped  # (24, 3)
    rots = theta.theta.reshape(NUM_JOINTS, 3)

    # forward kinematics: world transform per joint, parents before children
    world = [None] * NUM_JOINTS
    order = _topological_order(spec.joint_tree)
    for j in order:
        r = rodrigues(rots[j])
        parent = int(spec.joint_tree[j])
        local = np.eye(4)
        local[:3, :3] = r
        if parent < 0:
            local[:3, 3] = joints[j]
            world[j] = local
        else:
            local[:3, 3] = joints[j] - joints[parent]
            world[j] = world[parent] @ local

    # relative-to-rest transforms: remove the rest-pose joint position
    rel = np.empty((NUM_JOINTS, 4, 4))
    for j in range(NUM_JOINTS):
        g = world[j].copy()
        g[:3, 3] -= g[:3, :3] @ joints[j]
        rel[j] = g

    blended = np.einsum("vj,jab->vab", spec.skin_weights, rel)  # (N, 4, 4)
    homo = np.concatenate([v_shaped, np.ones((v_shaped.shape[0], 1))], axis=1)
    posed = np.einsum("vab,vb->va", blended, homo)[:, :3]
    return BodyMesh(vertices=posed + gamma.gamma, faces=spec.faces, uv_coords=spec.uv_coords)


def _topological_order(tree: np.ndarray) -> list[int]:
    order: list[int] = []
    placed = [False] * len(tree)
    while len(order) < len(tree):
        for j in range(len(tree)):
            if placed[j]:
                continue
            p = int(tree[j])
            if p < 0 or placed[p]:
                order.append(j)
                placed[j] = True
    return order


# ---------------------------------------------------------------------------
# Procedural desk body
# ---------------------------------------------------------------------------

_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # 0 pelvis
    [-0.10, -0.05, 0.00],  # 1 l_hip
    [0.10, -0.05, 0.00],   # 2 r_hip
    [0.00, 0.15, 0.00],    # 3 spine1
    [-0.10, -0.50, 0.00],  # 4 l_knee
    [0.10, -0.50, 0.00],   # 5 r_knee
    [0.00, 0.30, 0.00],    # 6 spine2
    [-0.10, -0.95, 0.00],  # 7 l_ankle
    [0.10, -0.95, 0.00],   # 8 r_ankle
    [0.00, 0.45, 0.00],    # 9 spine3
    [-0.10, -1.02, 0.12],  # 10 l_foot
    [0.10, -1.02, 0.12],   # 11 r_foot
    [0.00, 0.60, 0.00],    # 12 neck
    [-0.08, 0.52, 0.00],   # 13 l_collar
    [0.08, 0.52, 0.00],    # 14 r_collar
    [0.00, 0.70, 0.00],    # 15 head
    [-0.20, 0.55, 0.00],   # 16 l_shoulder
    [0.20, 0.55, 0.00],    # 17 r_shoulder
    [-0.45, 0.55, 0.00],   # 18 l_elbow
    [0.45, 0.55, 0.00],    # 19 r_elbow
    [-0.70, 0.55, 0.00],   # 20 l_wrist
    [0.70, 0.55, 0.00],    # 21 r_wrist
    [-0.82, 0.55, 0.00],   # 22 l_hand
    [0.82, 0.55, 0.00],    # 23 r_hand
])

# (name, proximal joint, distal joint, radius); torso and head handled separately
_LIMB_SEGMENTS = [
    ("l_thigh", 1, 4, 0.085),
    ("r_thigh", 2, 5, 0.085),
    ("l_shin", 4, 7, 0.060),
    ("r_shin", 5, 8, 0.060),
    ("l_foot", 7, 10, 0.050),
    ("r_foot", 8, 11, 0.050),
    ("l_uparm", 16, 18, 0.055),
    ("r_uparm", 17, 19, 0.055),
    ("l_forearm", 18, 20, 0.045),
    ("r_forearm", 19, 21, 0.045),
    ("l_hand", 20, 22, 0.040),
    ("r_hand", 21, 23, 0.040),
]

_MASK_RESOLUTION = 64


def _frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(axis, helper)) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    return u, w


def _tube(a, b, radius, n_around, n_rings, uv_rect, weight_fn):
    """Open cylinder from a to b. Returns (verts, faces, face_uvs, weights)."""
    axis = b - a
    u, w = _frame(axis)
    verts, weights = [], []
    for r in range(n_rings):
        s = r / (n_rings - 1)
        center = a + s * axis
        for k in range(n_around):
            phi = 2.0 * np.pi * k / n_around
            verts.append(center + radius * (np.cos(phi) * u + np.sin(phi) * w))
            weights.append(weight_fn(s))
    faces, face_uvs = [], []
    u0, v0, u1, v1 = uv_rect

    def uv(r, k):
        # unwrapped cylinder coords mapped into the atlas rectangle
        return (
            u0 + (u1 - u0) * k / n_around,
            v0 + (v1 - v0) * r / (n_rings - 1),
        )

    for r in range(n_rings - 1):
        for k in range(n_around):
            k2 = (k + 1) % n_around
            i00 = r * n_around + k
            i01 = r * n_around + k2
            i10 = (r + 1) * n_around + k
            i11 = (r + 1) * n_around + k2
            faces.append((i00, i01, i11))
            face_uvs.append((uv(r, k), uv(r, k + 1), uv(r + 1, k + 1)))
            faces.append((i00, i11, i10))
            face_uvs.append((uv(r, k), uv(r + 1, k + 1), uv(r + 1, k)))
    return np.array(verts), np.array(faces), np.array(face_uvs), np.array(weights)


def _sphere(center, radius, n_lat, n_lon, uv_rect, joint):
    verts, weights = [], []
    for i in range(n_lat):
        lat = np.pi * (i / (n_lat - 1) - 0.5)
        for k in range(n_lon):
            lon = 2.0 * np.pi * k / n_lon
            p = center + radius * np.array(
                [np.cos(lat) * np.cos(lon), np.sin(lat), np.cos(lat) * np.sin(lon)]
            )
            verts.append(p)
            w = np.zeros(NUM_JOINTS)
            w[joint] = 1.0
            weights.append(w)
    faces, face_uvs = [], []
    u0, v0, u1, v1 = uv_rect

    def uv(i, k):
        return (u0 + (u1 - u0) * k / n_lon, v0 + (v1 - v0) * i / (n_lat - 1))

    for i in range(n_lat - 1):
        for k in range(n_lon):
            k2 = (k + 1) % n_lon
            i00 = i * n_lon + k
            i01 = i * n_lon + k2
            i10 = (i + 1) * n_lon + k
            i11 = (i + 1) * n_lon + k2
            faces.append((i00, i01, i11))
            face_uvs.append((uv(i, k), uv(i, k + 1), uv(i + 1, k + 1)))
            faces.append((i00, i11, i10))
            face_uvs.append((uv(i, k), uv(i + 1, k + 1), uv(i + 1, k)))
    return np.array(verts), np.array(faces), np.array(face_uvs), np.array(weights)


def _limb_weight_fn(ja, jb):
    def fn(s):
        w = np.zeros(NUM_JOINTS)
        wb = float(np.clip((s - 0.6) / 0.4, 0.0, 1.0))
        w[ja] = 1.0 - wb
        w[jb] = wb
        return w

    return fn


def _torso_weight_fn():
    chain = [0, 3, 6, 9, 12]
    # station heights of the spine chain, normalized to tube parameter s
    heights = np.array([_REST_JOINTS[j][1] for j in chain])
    lo, hi = -0.08, 0.60
    stations = (heights - lo) / (hi - lo)

    def fn(s):
        w = np.zeros(NUM_JOINTS)
        if s <= stations[0]:
            w[chain[0]] = 1.0
            return w
        if s >= stations[-1]:
            w[chain[-1]] = 1.0
            return w
        i = int(np.searchsorted(stations, s) - 1)
        t = (s - stations[i]) / (stations[i + 1] - stations[i])
        w[chain[i]] = 1.0 - t
        w[chain[i + 1]] = t
        return w

    return fn


def _atlas_rects():
    """16-cell atlas grid; parts get one padded cell each, in a fixed order."""
    rects = {}
    names = (
        ["torso", "head"]
        + [name for name, *_ in _LIMB_SEGMENTS]
    )
    pad = 0.015
    for idx, name in enumerate(names):
        row, col = divmod(idx, 4)
        u0 = col / 4.0 + pad
        v0 = row / 4.0 + pad
        u1 = (col + 1) / 4.0 - pad
        v1 = (row + 1) / 4.0 - pad
        rects[name] = (u0, v0, u1, v1)
    return rects


def make_desk_body(resolution: int = 1) -> BodyModelSpec:
    """Build the procedural low-poly mannequin. Deterministic for a fixed resolution."""
    if resolution < 1:
        raise ParameterError("resolution must be >= 1")
    rects = _atlas_rects()
    n_around = 4 * resolution + 4
    n_rings = resolution + 2

    parts = []
    torso_a = np.array([0.0, -0.08, 0.0])
    torso_b = np.array([0.0, 0.60, 0.0])
    parts.append(
        _tube(torso_a, torso_b, 0.16, n_around, 2 * n_rings, rects["torso"], _torso_weight_fn())
    )
    parts.append(
        _sphere(
            np.array([0.0, 0.78, 0.0]), 0.11, 2 * resolution + 3, n_around, rects["head"], 15
        )
    )
    for name, ja, jb, radius in _LIMB_SEGMENTS:
        parts.append(
            _tube(
                _REST_JOINTS[ja],
                _REST_JOINTS[jb],
                radius,
                n_around,
                n_rings,
                rects[name],
                _limb_weight_fn(ja, jb),
            )
        )

    verts = np.concatenate([p[0] for p in parts])
    offsets = np.cumsum([0] + [p[0].shape[0] for p in parts])
    faces = np.concatenate([p[1] + offsets[i] for i, p in enumerate(parts)]).astype(np.int64)
    face_uvs = np.concatenate([p[2] for p in parts])
    skin_weights = np.concatenate([p[3] for p in parts])

    # joints regressed as the mean of the nearest template vertices
    regressor = np.zeros((NUM_JOINTS, verts.shape[0]))
    for j in range(NUM_JOINTS):
        d = np.linalg.norm(verts - _REST_JOINTS[j], axis=1)
        nearest = np.argsort(d, kind="stable")[:6]
        regressor[j, nearest] = 1.0 / len(nearest)

    # smooth deterministic blendshapes: overall scale, widening, sinusoidal fields
    n = verts.shape[0]
    shape_dirs = np.zeros((n, 3, NUM_SHAPE_COEFFS))
    shape_dirs[:, :, 0] = 0.05 * verts
    shape_dirs[:, 0, 1] = 0.05 * verts[:, 0]
    shape_dirs[:, 2, 1] = 0.05 * verts[:, 2]
    for k in range(2, NUM_SHAPE_COEFFS):
        freq = 1.0 + 0.7 * k
        shape_dirs[:, 0, k] = 0.01 * np.sin(freq * verts[:, 1] + 0.3 * k)
        shape_dirs[:, 2, k] = 0.01 * np.cos(freq * verts[:, 1] + 0.5 * k)

    mask = np.zeros((_MASK_RESOLUTION, _MASK_RESOLUTION), dtype=np.uint8)
    for name in ("head", "l_hand", "r_hand"):
        u0, v0, u1, v1 = rects[name]
        r0, r1 = int(v0 * _MASK_RESOLUTION), int(np.ceil(v1 * _MASK_RESOLUTION))
        c0, c1 = int(u0 * _MASK_RESOLUTION), int(np.ceil(u1 * _MASK_RESOLUTION))
        mask[r0:r1, c0:c1] = 1

    spec = BodyModelSpec(
        template_vertices=verts,
        faces=faces,
        joint_tree=JOINT_PARENTS.copy(),
        joint_regressor=regressor,
        skin_weights=skin_weights,
        shape_dirs=shape_dirs,
        uv_coords=face_uvs,
        face_hand_mask=mask,
    )
    validate_spec(spec)
    return spec


def face_hand_mask_at(spec: BodyModelSpec, texture_dims: tuple[int, int]) -> np.ndarray:
    """Resample the texture-space head/hand mask to (h_t, w_t) via nearest lookup."""
    h_t, w_t = texture_dims
    hm, wm = spec.face_hand_mask.shape
    rows = np.minimum((np.arange(h_t) + 0.5) * hm / h_t, hm - 1).astype(np.int64)
    cols = np.minimum((np.arange(w_t) + 0.5) * wm / w_t, wm - 1).astype(np.int64)
    return spec.face_hand_mask[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# Model file (JSON, full-precision reals)
# ---------------------------------------------------------------------------

_MODEL_FORMAT = "retexture-body"
_MODEL_VERSION = 1


def save_model(spec: BodyModelSpec, path) -> None:
    doc = {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "template_vertices": spec.template_vertices.tolist(),
        "faces": spec.faces.tolist(),
        "joint_tree": spec.joint_tree.tolist(),
        "joint_regressor": spec.joint_regressor.tolist(),
        "skin_weights": spec.skin_weights.tolist(),
        "shape_dirs": spec.shape_dirs.tolist(),
        "uv_coords": spec.uv_coords.tolist(),
        "face_hand_mask": spec.face_hand_mask.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> BodyModelSpec:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"model file is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != _MODEL_FORMAT:
        raise FormatError("model file missing format marker 'retexture-body'")
    if doc.get("version") != _MODEL_VERSION:
        raise FormatError(f"unsupported model version: {doc.get('version')!r}")
    fields = {}
    dtypes = {
        "template_vertices": np.float64,
        "faces": np.int64,
        "joint_tree": np.int64,
        "joint_regressor": np.float64,
        "skin_weights": np.float64,
        "shape_dirs": np.float64,
        "uv_coords": np.float64,
        "face_hand_mask": np.uint8,
    }
    for name, dtype in dtypes.items():
        if name not in doc:
            raise FormatError(f"model file missing field '{name}'")
        try:
            fields[name] = np.asarray(doc[name], dtype=dtype)
        except (TypeError, ValueError) as e:
            raise FormatError(f"model field '{name}' is malformed: {e}") from e
    spec = BodyModelSpec(**fields)
    validate_spec(spec)
    return spec
