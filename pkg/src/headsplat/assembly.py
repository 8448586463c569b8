"""Gaussian primitive assembly for the head and shoulder regions.

Head splats sit exactly on the subdivided mesh vertices: small MLP heads
map each fused per-vertex feature to a feature vector (first three channels
squashed to RGB), an opacity, an anisotropic scale around a density-derived
base, and a rotation.  Shoulder splats live on a camera-facing anchor
plane, one per masked cell of the screen-space feature grid, displaced
along their own view rays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit

from .geometry import Camera
from .neural import Mlp, MlpSpec, conv2d
from .seeding import TAG_HEADS, TAG_SHOULDER_CONV, derive_seed, seeded_rng
from .subdivision import unique_edges

HEAD_REGION = 0
SHOULDER_REGION = 1

SCALE_MIN = 1e-4
SCALE_MAX = 0.1
# sigmoid outputs are pinched into the open interval so float32 rounding can
# never produce an exact 0 or 1 opacity
OPACITY_LO = 1e-6
OPACITY_HI = 1.0 - 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)


class AssemblyError(RuntimeError):
    """Raised when a regressed attribute batch is unusable (NaN, bad shape)."""


@dataclass
class GaussianSet:
    """One renderable batch of splats.

    features carries C >= 3 channels, the first three being coarse RGB.
    All float arrays are float32, region is uint8.
    """

    positions: np.ndarray   # (N, 3)
    scales: np.ndarray      # (N, 3) world units, positive
    rotations: np.ndarray   # (N, 4) unit quaternions, wxyz
    opacities: np.ndarray   # (N,) in (0, 1)
    features: np.ndarray    # (N, C)
    region: np.ndarray      # (N,) HEAD_REGION / SHOULDER_REGION

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] < 3:
            raise AssemblyError(
                f"features must be (N, >=3), got {self.features.shape}")
        shapes = {
            "positions": (n, 3), "scales": (n, 3), "rotations": (n, 4),
            "opacities": (n,), "features": (n, self.features.shape[1]),
            "region": (n,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise AssemblyError(f"{name} has shape {arr.shape}, want {want}")

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.features.shape[1])

    def assert_finite(self):
        for name in ("positions", "scales", "rotations", "opacities",
                     "features"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise AssemblyError(f"non-finite values in {name}")


def combine(head: "GaussianSet", shoulder: "GaussianSet") -> "GaussianSet":
    """Concatenate, head splats first; feature widths must agree."""
    if head.n_channels != shoulder.n_channels:
        raise AssemblyError(
            f"feature width mismatch: head {head.n_channels} vs shoulder "
            f"{shoulder.n_channels}")
    return GaussianSet(
        positions=np.concatenate([head.positions, shoulder.positions]),
        scales=np.concatenate([head.scales, shoulder.scales]),
        rotations=np.concatenate([head.rotations, shoulder.rotations]),
        opacities=np.concatenate([head.opacities, shoulder.opacities]),
        features=np.concatenate([head.features, shoulder.features]),
        region=np.concatenate([head.region, shoulder.region]),
    )


def vertex_base_scale(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Mean incident edge length per vertex.

    Ties splat size to local mesh density so subdivided levels shrink their
    splats automatically.
    """
    edges, _ = unique_edges(np.asarray(faces, dtype=np.int64))
    d = np.linalg.norm(np.asarray(vertices, dtype=np.float64)[edges[:, 0]]
                       - np.asarray(vertices, dtype=np.float64)[edges[:, 1]],
                       axis=1)
    acc = np.zeros(len(vertices))
    cnt = np.zeros(len(vertices))
    np.add.at(acc, edges[:, 0], d)
    np.add.at(acc, edges[:, 1], d)
    np.add.at(cnt, edges[:, 0], 1.0)
    np.add.at(cnt, edges[:, 1], 1.0)
    cnt[cnt == 0] = 1.0
    return (acc / cnt).astype(np.float32)


def _activate_rotation(raw_q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(raw_q, axis=1, keepdims=True)
    bad = norms[:, 0] < 1e-8
    raw_q = raw_q.copy()
    raw_q[bad] = IDENTITY_QUAT
    norms = norms.copy()
    norms[bad] = 1.0
    return raw_q / norms


def _activate_opacity(logits: np.ndarray) -> np.ndarray:
    return np.clip(expit(logits), OPACITY_LO, OPACITY_HI)


@dataclass
class AttributeMlps:
    """The per-vertex regression heads."""

    feature: Mlp    # d -> C_feat, sigmoid applied to the first 3 channels
    opacity: Mlp    # d -> 1
    scale: Mlp      # d -> 3, log-space around the base scale
    rotation: Mlp   # d -> 4, identity-biased then normalised

    @classmethod
    def seeded(cls, feature_dim: int, hidden: int, c_feat: int, seed: int
               ) -> "AttributeMlps":
        def head(out_dim, sub, final_bias=None):
            spec = MlpSpec(widths=(feature_dim, hidden, out_dim),
                           activation="relu",
                           seed=derive_seed(seed, TAG_HEADS, sub))
            return Mlp(spec, final_bias=final_bias)

        return cls(
            feature=head(c_feat, 0),
            opacity=head(1, 1),
            scale=head(3, 2),
            rotation=head(4, 3, final_bias=IDENTITY_QUAT.astype(np.float64)),
        )

    def weight_arrays(self) -> dict:
        out = {}
        for name in ("feature", "opacity", "scale", "rotation"):
            for i, (w, b) in enumerate(getattr(self, name).layers):
                out[f"{name}/w{i}"] = w
                out[f"{name}/b{i}"] = b
        return out

    @classmethod
    def from_weight_arrays(cls, arrays: dict) -> "AttributeMlps":
        heads = {}
        for name in ("feature", "opacity", "scale", "rotation"):
            layers = []
            i = 0
            while f"{name}/w{i}" in arrays:
                layers.append((arrays[f"{name}/w{i}"], arrays[f"{name}/b{i}"]))
                i += 1
            if not layers:
                raise KeyError(f"no stored layers for head {name!r}")
            heads[name] = Mlp.from_weights(layers)
        return cls(**heads)


def regress_head(features: np.ndarray, base_positions: np.ndarray,
                 base_scale: np.ndarray, mlps: AttributeMlps,
                 s_min: float = SCALE_MIN, s_max: float = SCALE_MAX
                 ) -> GaussianSet:
    """Map fused per-vertex features to one head splat per vertex.

    Positions are the vertices verbatim.  Scales are base_scale * exp(raw)
    clamped to [s_min, s_max]; rotations renormalise after the identity
    bias, falling back to the identity if the raw output cancels it.
    """
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise AssemblyError("non-finite fused features")
    n = features.shape[0]
    if base_positions.shape != (n, 3):
        raise AssemblyError(
            f"base_positions {base_positions.shape} does not match {n} features")

    feat = np.asarray(mlps.feature(features), dtype=np.float64)
    feat[:, :3] = expit(feat[:, :3])
    opac = _activate_opacity(np.asarray(mlps.opacity(features))[:, 0])

    raw_s = mlps.scale(features)
    base = np.asarray(base_scale, dtype=np.float64).reshape(n, 1)
    scales = np.clip(base * np.exp(raw_s), s_min, s_max)

    rots = _activate_rotation(np.asarray(mlps.rotation(features),
                                         dtype=np.float64))

    out = GaussianSet(
        positions=np.asarray(base_positions).astype(np.float32),
        scales=scales.astype(np.float32),
        rotations=rots.astype(np.float32),
        opacities=opac.astype(np.float32),
        features=feat.astype(np.float32),
        region=np.full(n, HEAD_REGION, dtype=np.uint8),
    )
    out.assert_finite()
    return out


def shoulder_mask(portrait: np.ndarray, depth_map: np.ndarray,
                  eta: float = 0.5) -> np.ndarray:
    """Rows of the sitter the head mesh does not cover, in the lower frame.

    portrait: (H, W) boolean sitter mask; depth_map from the head raster
    (+inf where the mesh missed).  eta is the fraction of image height
    above which rows are never shoulder.
    """
    portrait = np.asarray(portrait, dtype=bool)
    if portrait.shape != depth_map.shape:
        raise ValueError(
            f"portrait {portrait.shape} vs depth {depth_map.shape}")
    h = portrait.shape[0]
    uncovered = ~np.isfinite(depth_map)
    rows = np.arange(h)[:, None] >= eta * h
    return portrait & uncovered & rows


def portrait_mask(image: np.ndarray, threshold: float = 1e-3) -> np.ndarray:
    """Non-background pixels of a matted portrait (black background)."""
    return np.asarray(image).max(axis=2) > threshold


@dataclass(frozen=True)
class ShoulderPlane:
    """Camera-facing anchor grid at a fixed camera depth.

    anchors is (Gh, Gw, 3) world points, one per feature-grid cell;
    directions the matching unit view rays.
    """

    anchors: np.ndarray
    directions: np.ndarray
    depth: float

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("plane directions must be unit length")


def build_shoulder_plane(camera: Camera, grid_h: int, grid_w: int,
                         depth: float) -> ShoulderPlane:
    """Unproject every cell center of a (grid_h, grid_w) plane to ``depth``."""
    rr, cc = np.mgrid[0:grid_h, 0:grid_w]
    px = (cc.ravel() + 0.5) * camera.width / grid_w
    py = (rr.ravel() + 0.5) * camera.height / grid_h
    anchors = camera.unproject(np.stack([px, py], axis=1),
                               np.full(px.shape, float(depth)))
    rays = anchors - camera.center()
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    return ShoulderPlane(anchors=anchors.reshape(grid_h, grid_w, 3),
                         directions=rays.reshape(grid_h, grid_w, 3),
                         depth=float(depth))


def mean_visible_depth(vertices: np.ndarray, camera: Camera,
                       visible: np.ndarray) -> float:
    """Average camera-space depth of the visible vertices."""
    rot = camera.camera_rotation()
    z = (np.asarray(vertices, dtype=np.float64) @ rot.T
         + camera.pose.translation)[:, 2]
    vis = np.asarray(visible, dtype=bool)
    if not np.any(vis):
        return float(np.mean(z))
    return float(np.mean(z[vis]))


@dataclass
class ShoulderConv:
    """Seeded 3x3 conv head over the local feature grid.

    Output channels: C_feat features, 1 opacity, 3 scales, 4 rotation, 1
    ray offset.
    """

    kernels: np.ndarray
    bias: np.ndarray
    c_feat: int

    @classmethod
    def seeded(cls, in_channels: int, c_feat: int, seed: int) -> "ShoulderConv":
        rng = seeded_rng(derive_seed(seed, TAG_SHOULDER_CONV))
        out_ch = c_feat + 9
        bound = 1.0 / np.sqrt(in_channels * 9)
        k = rng.uniform(-bound, bound, size=(out_ch, in_channels, 3, 3))
        return cls(kernels=k.astype(np.float32),
                   bias=np.zeros(out_ch, np.float32), c_feat=c_feat)


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Nearest-neighbor downsample of a pixel mask onto the feature grid."""
    h, w = mask.shape
    rows = ((np.arange(grid_h) + 0.5) * h / grid_h).astype(np.int64)
    cols = ((np.arange(grid_w) + 0.5) * w / grid_w).astype(np.int64)
    return np.asarray(mask, dtype=bool)[np.ix_(rows.clip(0, h - 1),
                                               cols.clip(0, w - 1))]


def regress_shoulder(feature_grid: np.ndarray, mask: np.ndarray,
                     camera: Camera, plane: ShoulderPlane, conv: ShoulderConv,
                     s_min: float = SCALE_MIN, s_max: float = SCALE_MAX
                     ) -> GaussianSet:
    """One splat per masked cell of the feature grid.

    The pixel mask is nearest-downsampled onto the grid; each surviving
    cell starts at its plane anchor and slides along its own view ray by
    the regressed offset.  The scale base is the world footprint of one
    cell at the plane depth; cells flatten row-major.
    """
    c_ch, gh, gw = feature_grid.shape
    if plane.anchors.shape[:2] != (gh, gw):
        raise ValueError(
            f"plane grid {plane.anchors.shape[:2]} does not match feature "
            f"grid ({gh}, {gw})")
    cell_mask = downsample_mask(mask, gh, gw)

    out = conv2d(np.asarray(feature_grid, dtype=np.float32),
                 conv.kernels, conv.bias)
    sel_r, sel_c = np.nonzero(cell_mask)
    n = sel_r.shape[0]
    cf = conv.c_feat
    if n == 0:
        return empty_set(cf)

    vals = np.asarray(out[:, sel_r, sel_c].T, dtype=np.float64)  # (n, cf+9)
    feat = vals[:, :cf].copy()
    feat[:, :3] = expit(feat[:, :3])
    opac = _activate_opacity(vals[:, cf])
    raw_s = vals[:, cf + 1:cf + 4]
    raw_q = vals[:, cf + 4:cf + 8] + IDENTITY_QUAT.astype(np.float64)
    off = vals[:, cf + 8]

    cell_world = plane.depth * 2.0 / (camera.focal * gw)
    scales = np.clip(cell_world * np.exp(raw_s), s_min, s_max)
    rots = _activate_rotation(raw_q)
    anchors = plane.anchors[sel_r, sel_c]
    rays = plane.directions[sel_r, sel_c]
    positions = anchors + off[:, None] * rays

    out_set = GaussianSet(
        positions=positions.astype(np.float32),
        scales=scales.astype(np.float32),
        rotations=rots.astype(np.float32),
        opacities=opac.astype(np.float32),
        features=feat.astype(np.float32),
        region=np.full(n, SHOULDER_REGION, dtype=np.uint8),
    )
    out_set.assert_finite()
    return out_set


def empty_set(c_feat: int = 3) -> GaussianSet:
    z = np.zeros
    return GaussianSet(
        positions=z((0, 3), np.float32), scales=z((0, 3), np.float32),
        rotations=z((0, 4), np.float32), opacities=z(0, np.float32),
        features=z((0, c_feat), np.float32), region=z(0, np.uint8),
    )
