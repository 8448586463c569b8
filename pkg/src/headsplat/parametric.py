"""Parametric head model: blendshape morphing plus linear blend skinning.

The model follows the usual morphable-head layout: a template mesh, linear
shape/expression bases, pose-corrective blendshapes driven by the flattened
(R_j - I) of every non-root joint, a short kinematic chain, and convex
per-vertex skinning weights.  Synthetic models are generated from geodesic
spheres so any desk-scale vertex budget maps onto a closed, manifold proxy.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import rotvec_to_matrix
from .seeding import TAG_MODEL, seeded_rng
from .subdivision import unique_edges

MODEL_MANIFEST = "model.json"
MODEL_BLOB = "arrays.bin"
MODEL_FORMAT = "headsplat-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Manifest missing/corrupt or wrong format tag."""


class ModelTruncatedError(ModelFormatError):
    """Blob shorter than the manifest's array descriptors require."""


class ModelDimensionError(ModelFormatError):
    """Array shapes inconsistent with each other."""


@dataclass
class PoseParams:
    """beta: shape, theta: per-joint axis-angle (root first) + global
    translation in the last three entries, psi: expression."""

    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)

    @property
    def joint_rotvecs(self) -> np.ndarray:
        return self.theta[:-3].reshape(-1, 3)

    @property
    def global_translation(self) -> np.ndarray:
        return self.theta[-3:]

    @staticmethod
    def neutral(model: "ParametricHeadModel") -> "PoseParams":
        return PoseParams(
            beta=np.zeros(model.n_shape),
            theta=np.zeros(3 * model.n_joints + 3),
            psi=np.zeros(model.n_expr),
        )


@dataclass
class ParametricHeadModel:
    template: np.ndarray       # (V, 3) f32
    shape_basis: np.ndarray    # (V, 3, n_beta) f32
    pose_basis: np.ndarray     # (V, 3, 9*(n_joints-1)) f32
    expr_basis: np.ndarray     # (V, 3, n_psi) f32
    joint_rest: np.ndarray     # (J, 3) f32
    joint_shape: np.ndarray    # (J, 3, n_beta) f32 linear joint correction
    joint_parents: np.ndarray  # (J,) int32, -1 for root
    skin_weights: np.ndarray   # (V, J) f32, convex rows
    faces: np.ndarray          # (F, 3) u32

    def __post_init__(self):
        self.template = np.ascontiguousarray(self.template, dtype=np.float32)
        self.shape_basis = np.ascontiguousarray(self.shape_basis, dtype=np.float32)
        self.pose_basis = np.ascontiguousarray(self.pose_basis, dtype=np.float32)
        self.expr_basis = np.ascontiguousarray(self.expr_basis, dtype=np.float32)
        self.joint_rest = np.ascontiguousarray(self.joint_rest, dtype=np.float32)
        self.joint_shape = np.ascontiguousarray(self.joint_shape, dtype=np.float32)
        self.joint_parents = np.ascontiguousarray(self.joint_parents, dtype=np.int32)
        self.skin_weights = np.ascontiguousarray(self.skin_weights, dtype=np.float32)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.uint32)

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]

    @property
    def n_joints(self) -> int:
        return self.joint_rest.shape[0]

    def validate(self) -> None:
        v = self.n_vertices
        for name, arr, shape in [
            ("shape_basis", self.shape_basis, (v, 3, self.n_shape)),
            ("pose_basis", self.pose_basis, (v, 3, 9 * max(self.n_joints - 1, 0))),
            ("expr_basis", self.expr_basis, (v, 3, self.n_expr)),
            ("skin_weights", self.skin_weights, (v, self.n_joints)),
        ]:
            if tuple(arr.shape) != shape:
                raise ModelDimensionError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.joint_shape.shape != (self.n_joints, 3, self.n_shape):
            raise ModelDimensionError("joint_shape inconsistent with joints/beta dims")
        w = self.skin_weights.astype(np.float64)
        if np.any(w < -1e-6) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-5):
            raise ValueError("skin weights must be convex per row")
        if self.joint_parents.shape != (self.n_joints,):
            raise ModelDimensionError("joint_parents inconsistent with joint count")
        if self.n_joints and self.joint_parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(self.joint_parents):
            if p >= j or (j > 0 and p < 0):
                raise ValueError("joint parents must precede children")
        unique_edges(self.faces, check_manifold=True)
        if self.faces.size and int(self.faces.max()) >= v:
            raise ModelDimensionError("face index out of range")


# ---------------------------------------------------------------------------
# synthetic model generation

_ICO_VERTS = None
_ICO_FACES = None


def _icosahedron():
    global _ICO_VERTS, _ICO_FACES
    if _ICO_VERTS is None:
        p = (1.0 + np.sqrt(5.0)) / 2.0
        v = np.array([
            [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
            [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
            [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
        ], dtype=np.float64)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        f = np.array([
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ], dtype=np.int64)
        _ICO_VERTS, _ICO_FACES = v, f
    return _ICO_VERTS, _ICO_FACES


def geodesic_sphere(frequency: int):
    """Unit geodesic sphere from an icosahedron split into n^2 per face.

    Vertex/edge/face counts are 10n^2+2 / 30n^2 / 20n^2.  Shared lattice
    points are welded through canonical keys, so the construction is fully
    deterministic.
    """
    n = int(frequency)
    if n < 1:
        raise ValueError("frequency must be >= 1")
    base_v, base_f = _icosahedron()
    verts: list[np.ndarray] = []
    index: dict = {}

    def vid(key, pos):
        i = index.get(key)
        if i is None:
            i = len(verts)
            index[key] = i
            verts.append(pos / np.linalg.norm(pos))
        return i

    def lattice_key(face_id, ia, ib, ic, i, j):
        k = n - i - j
        if k == n:
            return ("v", ia)
        if i == n:
            return ("v", ib)
        if j == n:
            return ("v", ic)
        if j == 0:  # edge ia-ib, step i from ia
            lo, hi = (ia, ib) if ia < ib else (ib, ia)
            t = i if ia < ib else n - i
            return ("e", lo, hi, t)
        if i == 0:  # edge ia-ic, step j from ia
            lo, hi = (ia, ic) if ia < ic else (ic, ia)
            t = j if ia < ic else n - j
            return ("e", lo, hi, t)
        if k == 0:  # edge ib-ic, step j from ib
            lo, hi = (ib, ic) if ib < ic else (ic, ib)
            t = j if ib < ic else n - j
            return ("e", lo, hi, t)
        return ("f", face_id, i, j)

    faces = []
    for fid, (ia, ib, ic) in enumerate(base_f):
        va, vb, vc = base_v[ia], base_v[ib], base_v[ic]
        ids = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                pos = (va * (n - i - j) + vb * i + vc * j) / n
                ids[(i, j)] = vid(lattice_key(fid, ia, ib, ic, i, j), pos)
        for i in range(n):
            for j in range(n - i):
                faces.append((ids[(i, j)], ids[(i + 1, j)], ids[(i, j + 1)]))
                if i + j < n - 1:
                    faces.append((ids[(i + 1, j)], ids[(i + 1, j + 1)], ids[(i, j + 1)]))
    return np.asarray(verts), np.asarray(faces, dtype=np.uint32)


def _smooth_field(points: np.ndarray, rng: np.random.Generator,
                  amplitude: float, n_waves: int = 3) -> np.ndarray:
    """Smooth deterministic (V, 3) displacement field built from a few sines."""
    out = np.zeros_like(points)
    for _ in range(n_waves):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(points @ d * freq + phase)[:, None] * u
    return out * (amplitude / n_waves)


def make_synthetic_model(seed: int = 0, v_count: int = 642, n_beta: int = 10,
                         n_psi: int = 10, n_joints: int = 5) -> ParametricHeadModel:
    """Deterministic head-proxy model.

    ``v_count`` snaps up to the nearest geodesic count 10n^2+2 (642 -> exactly
    642).  Bases are smooth low-amplitude fields; joints form a root/neck/
    features chain of depth <= 3; weights are normalized Gaussian falloffs.
    """
    if v_count < 4:
        raise ValueError("v_count must be >= 4")
    if n_joints < 1:
        raise ValueError("need at least one joint")
    freq = max(1, int(np.ceil(np.sqrt(max(v_count - 2, 1) / 10.0))))
    sphere, faces = geodesic_sphere(freq)

    rng = seeded_rng(seed, TAG_MODEL)
    template = sphere * np.array([1.0, 1.15, 0.95])
    template = template + _smooth_field(sphere, rng, 0.04)

    v = template.shape[0]
    shape_basis = np.stack(
        [_smooth_field(sphere, rng, 0.06) for _ in range(n_beta)], axis=2)
    n_pose = 9 * max(n_joints - 1, 0)
    pose_basis = np.stack(
        [_smooth_field(sphere, rng, 0.01) for _ in range(n_pose)], axis=2) \
        if n_pose else np.zeros((v, 3, 0))
    expr_basis = np.stack(
        [_smooth_field(sphere, rng, 0.04) for _ in range(n_psi)], axis=2)

    joints = [np.array([0.0, -0.85, 0.0]), np.array([0.0, -0.45, 0.05])]
    for j in range(2, n_joints):
        az = 2 * np.pi * (j - 2) / max(n_joints - 2, 1)
        base = np.array([0.45 * np.sin(az), 0.15 + 0.1 * np.cos(az), 0.55])
        joints.append(base + rng.uniform(-0.05, 0.05, size=3))
    joint_rest = np.asarray(joints[:n_joints])
    joint_parents = np.array([-1, 0] + [1] * (n_joints - 2), dtype=np.int32)[:n_joints]
    joint_shape = rng.uniform(-0.02, 0.02, size=(n_joints, 3, n_beta))

    d2 = ((template[:, None, :] - joint_rest[None, :, :]) ** 2).sum(axis=2)
    w = np.exp(-d2 / (2 * 0.55 ** 2))
    w /= w.sum(axis=1, keepdims=True)

    model = ParametricHeadModel(
        template=template, shape_basis=shape_basis, pose_basis=pose_basis,
        expr_basis=expr_basis, joint_rest=joint_rest, joint_shape=joint_shape,
        joint_parents=joint_parents, skin_weights=w, faces=faces)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# morph + skin

def pose_feature(model: ParametricHeadModel, theta: np.ndarray) -> np.ndarray:
    """Flattened (R_j - I) over non-root joints; zero pose -> zero feature."""
    rots = np.asarray(theta, dtype=np.float64)[:-3].reshape(-1, 3)
    if rots.shape[0] != model.n_joints:
        raise ModelDimensionError(
            f"theta provides {rots.shape[0]} joint rotations, model has {model.n_joints}")
    if model.n_joints <= 1:
        return np.zeros(0)
    mats = rotvec_to_matrix(rots[1:])
    return (mats - np.eye(3)).reshape(-1)


def morph(model: ParametricHeadModel, params: PoseParams,
          offset: np.ndarray | None = None) -> np.ndarray:
    """Template + shape/pose-corrective/expression blendshapes + offsets."""
    if params.beta.shape[0] != model.n_shape:
        raise ModelDimensionError(
            f"shape_basis expects beta of length {model.n_shape}, got {params.beta.shape[0]}")
    if params.psi.shape[0] != model.n_expr:
        raise ModelDimensionError(
            f"expr_basis expects psi of length {model.n_expr}, got {params.psi.shape[0]}")
    if params.theta.shape[0] != 3 * model.n_joints + 3:
        raise ModelDimensionError(
            f"theta must have length {3 * model.n_joints + 3}, got {params.theta.shape[0]}")
    out = model.template.astype(np.float64)
    out = out + model.shape_basis.astype(np.float64) @ params.beta
    feat = pose_feature(model, params.theta)
    if feat.size:
        out = out + model.pose_basis.astype(np.float64) @ feat
    out = out + model.expr_basis.astype(np.float64) @ params.psi
    if offset is not None:
        off = np.asarray(offset, dtype=np.float64)
        if off.shape != out.shape:
            raise ModelDimensionError(
                f"offset shape {off.shape} must match vertices {out.shape}")
        out = out + off
    return out


def joint_transforms(model: ParametricHeadModel, beta: np.ndarray,
                     theta: np.ndarray):
    """Per-joint skinning rotations and translations (rest pose removed).

    Returns (R, t) with shapes (J, 3, 3) and (J, 3); a posed vertex under
    joint j alone is ``R[j] @ v + t[j]``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    joints = model.joint_rest.astype(np.float64) + \
        model.joint_shape.astype(np.float64) @ beta
    rots = rotvec_to_matrix(np.asarray(theta, dtype=np.float64)[:-3].reshape(-1, 3))
    n = model.n_joints
    world_r = np.empty((n, 3, 3))
    world_t = np.empty((n, 3))
    for j in range(n):
        p = int(model.joint_parents[j])
        if p < 0:
            world_r[j] = rots[j]
            world_t[j] = joints[j]
        else:
            local_t = joints[j] - joints[p]
            world_r[j] = world_r[p] @ rots[j]
            world_t[j] = world_r[p] @ local_t + world_t[p]
    skin_r = world_r
    skin_t = world_t - np.einsum("jab,jb->ja", world_r, joints)
    return skin_r, skin_t


def skin(model: ParametricHeadModel, t_p: np.ndarray, params: PoseParams) -> np.ndarray:
    """Linear blend skinning of morphed vertices through the kinematic chain.

    Written in delta form ``v + sum_j w_j ((R_j v + t_j) - v)`` so the rest
    pose maps through exactly; equivalent to the usual formulation for the
    convex weight rows the model requires.
    """
    w = model.skin_weights.astype(np.float64)
    if np.any(w < -1e-6):
        raise ValueError("skin weights must be non-negative")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("skin weight rows must sum to 1")
    t_p = np.asarray(t_p, dtype=np.float64)
    if t_p.shape != (model.n_vertices, 3):
        raise ModelDimensionError(
            f"posed template shape {t_p.shape}, expected {(model.n_vertices, 3)}")
    r, t = joint_transforms(model, params.beta, params.theta)
    # (J, V, 3) deltas are small for a short chain; stay vectorized
    per_joint = np.einsum("jab,vb->jva", r, t_p) + t[:, None, :] - t_p[None, :, :]
    out = t_p + np.einsum("vj,jva->va", w, per_joint)
    return out + params.global_translation


# ---------------------------------------------------------------------------
# model file IO: JSON manifest + raw little-endian blobs

_MODEL_ARRAYS = [
    ("template", "f32"), ("shape_basis", "f32"), ("pose_basis", "f32"),
    ("expr_basis", "f32"), ("joint_rest", "f32"), ("joint_shape", "f32"),
    ("joint_parents", "i32"), ("skin_weights", "f32"), ("faces", "u32"),
]

_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4"), "i32": np.dtype("<i4")}


def save_model(model: ParametricHeadModel, path) -> None:
    """Write model.json + arrays.bin into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    descriptors = []
    for name, kind in _MODEL_ARRAYS:
        arr = np.ascontiguousarray(getattr(model, name), dtype=_DTYPES[kind])
        raw = arr.tobytes()
        descriptors.append({
            "name": name, "dtype": kind, "shape": list(arr.shape),
            "file": MODEL_BLOB, "byte_offset": len(blob),
            "crc32": zlib.crc32(raw),
        })
        blob.extend(raw)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "dims": {
            "n_vertices": model.n_vertices, "n_faces": int(model.faces.shape[0]),
            "n_shape": model.n_shape, "n_expr": model.n_expr,
            "n_joints": model.n_joints,
        },
        "arrays": descriptors,
    }
    (root / MODEL_BLOB).write_bytes(bytes(blob))
    (root / MODEL_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_model(path) -> ParametricHeadModel:
    """Read a model directory (or its model.json path) written by save_model."""
    p = Path(path)
    manifest_path = p / MODEL_MANIFEST if p.is_dir() else p
    if not manifest_path.exists():
        raise ModelFormatError(f"no model manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"unreadable manifest: {e}") from e
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelFormatError(
            f"bad format tag {manifest.get('format')!r}, expected {MODEL_FORMAT!r}")
    if manifest.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {manifest.get('version')}")
    root = manifest_path.parent
    blobs: dict[str, bytes] = {}
    arrays = {}
    for desc in manifest.get("arrays", []):
        name, kind = desc["name"], desc["dtype"]
        if kind not in _DTYPES:
            raise ModelFormatError(f"array {name}: unknown dtype {kind!r}")
        fname = desc["file"]
        if fname not in blobs:
            fpath = root / fname
            if not fpath.exists():
                raise ModelFormatError(f"missing blob file {fname}")
            blobs[fname] = fpath.read_bytes()
        data = blobs[fname]
        shape = tuple(int(s) for s in desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(desc["byte_offset"])
        nbytes = count * 4
        if start < 0 or start + nbytes > len(data):
            raise ModelTruncatedError(
                f"array {name}: needs bytes [{start}, {start + nbytes}) "
                f"but blob has {len(data)}")
        raw = data[start:start + nbytes]
        if "crc32" in desc and zlib.crc32(raw) != desc["crc32"]:
            raise ModelFormatError(f"array {name}: checksum mismatch")
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[kind]).reshape(shape).copy()
    missing = [n for n, _ in _MODEL_ARRAYS if n not in arrays]
    if missing:
        raise ModelFormatError(f"manifest missing arrays: {missing}")
    model = ParametricHeadModel(**{n: arrays[n] for n, _ in _MODEL_ARRAYS})
    try:
        model.validate()
    except ValueError as e:
        raise ModelDimensionError(str(e)) from e
    return model
