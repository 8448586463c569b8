"""Multi-channel software splatting.

Projection maps each 3-D Gaussian to a screen-space footprint (mean, 2x2
covariance via the perspective Jacobian, conic, radius), then a tiled
compositor accumulates front-to-back per 16x16 tile.  A plain numpy
rasteriser with the same arithmetic serves as the reference; the two agree
to float rounding because contribution order and per-pixel math are
identical.  All accumulation is float64.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .geometry import Camera, quat_to_matrix
from .seeding import TAG_REFINER, derive_seed, seeded_rng

TILE_SIZE = 16
# raw footprints smaller than this (3-sigma extent, px) are dropped, and
# surviving eigenvalues are floored to the same value in px^2
MIN_EXTENT = 0.3

ALPHA_CAP = _kernels.ALPHA_CAP
TRANSMITTANCE_CUTOFF = _kernels.TRANSMITTANCE_CUTOFF
CHI2_CUTOFF = _kernels.CHI2_CUTOFF


@dataclass
class SplatPrimitives:
    """Screen-space splats, already culled, in input order."""

    means: np.ndarray       # (M, 2) pixel coords, float64
    cov: np.ndarray         # (M, 3) packed (a, b, c) after flooring
    conic: np.ndarray       # (M, 3) packed inverse covariance
    depths: np.ndarray      # (M,) camera z
    opacities: np.ndarray   # (M,)
    features: np.ndarray    # (M, C)
    radii: np.ndarray       # (M,) 3-sigma extent in px
    source_index: np.ndarray  # (M,) index into the pre-cull arrays

    @property
    def count(self) -> int:
        return int(self.means.shape[0])


def project_gaussians(positions, scales, rotations, opacities, features,
                      camera: Camera) -> SplatPrimitives:
    """Cull and project world-space Gaussians into screen space.

    positions (N, 3), scales (N, 3), rotations (N, 4) unit quaternions,
    opacities (N,), features (N, C).  Splats behind the near plane, past the
    far plane, or with a raw 3-sigma extent under MIN_EXTENT px are culled.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    for name, arr in (("scales", scales), ("rotations", rotations),
                      ("opacities", opacities), ("features", features)):
        rows = np.asarray(arr).shape[0]
        if rows != n:
            raise ValueError(f"{name} has {rows} rows, positions have {n}")
    if n == 0:
        return _empty_primitives(features)
    rot_w = camera.camera_rotation()
    cam_pts = positions @ rot_w.T + camera.pose.translation
    z = cam_pts[:, 2]
    keep = (z >= camera.near) & (z <= camera.far)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return _empty_primitives(features)

    cam_pts = cam_pts[idx]
    z = z[idx]
    s = np.asarray(scales, dtype=np.float64)[idx]
    q = np.asarray(rotations, dtype=np.float64)[idx]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    rmat = quat_to_matrix(q)

    # world covariance R diag(s^2) R^T, then rotate into camera axes
    m = rmat * s[:, None, :]
    cov_w = m @ np.transpose(m, (0, 2, 1))
    cov_c = np.einsum("ij,njk,lk->nil", rot_w, cov_w, rot_w)

    fx = camera.focal * camera.width / 2.0
    fy = camera.focal * camera.height / 2.0
    x = cam_pts[:, 0]
    y = cam_pts[:, 1]
    inv_z = 1.0 / z
    u = fx * x * inv_z + camera.width / 2.0
    v = fy * y * inv_z + camera.height / 2.0

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * x * inv_z * inv_z
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * y * inv_z * inv_z
    cov2 = np.einsum("nij,njk,nlk->nil", jac, cov_c, jac)

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam1 = mid + disc
    lam2 = mid - disc
    big = (3.0 * np.sqrt(np.maximum(lam1, 0.0))) >= MIN_EXTENT
    if not np.any(big):
        return _empty_primitives(features)
    idx = idx[big]
    a, b, c = a[big], b[big], c[big]
    lam1, lam2 = lam1[big], lam2[big]
    u, v, z = u[big], v[big], z[big]

    a, b, c = _floor_eigenvalues(a, b, c, lam1, lam2)
    lam1f = np.maximum(lam1, MIN_EXTENT)
    det = a * c - b * b
    inv_det = 1.0 / det
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    radii = 3.0 * np.sqrt(lam1f)

    return SplatPrimitives(
        means=np.stack([u, v], axis=1),
        cov=np.stack([a, b, c], axis=1),
        conic=conic,
        depths=z,
        opacities=np.asarray(opacities, dtype=np.float64)[idx],
        features=np.asarray(features, dtype=np.float64)[idx],
        radii=radii,
        source_index=idx.astype(np.int64),
    )


def _floor_eigenvalues(a, b, c, lam1, lam2):
    """Clamp both eigenvalues to MIN_EXTENT px^2, keeping the rotation."""
    need = (lam1 < MIN_EXTENT) | (lam2 < MIN_EXTENT)
    if not np.any(need):
        return a, b, c
    l1 = np.maximum(lam1, MIN_EXTENT)
    l2 = np.maximum(lam2, MIN_EXTENT)
    # principal axis of the original matrix; fall back to x when isotropic
    vx = np.where(np.abs(b) > 1e-12, b, lam1 - c)
    vy = np.where(np.abs(b) > 1e-12, lam1 - a, np.zeros_like(b))
    norm = np.sqrt(vx * vx + vy * vy)
    degen = norm < 1e-12
    vx = np.where(degen, 1.0, vx / np.where(degen, 1.0, norm))
    vy = np.where(degen, 0.0, vy / np.where(degen, 1.0, norm))
    fa = l1 * vx * vx + l2 * vy * vy
    fb = (l1 - l2) * vx * vy
    fc = l1 * vy * vy + l2 * vx * vx
    return (np.where(need, fa, a), np.where(need, fb, b),
            np.where(need, fc, c))


def _empty_primitives(features) -> SplatPrimitives:
    n_ch = np.asarray(features).shape[1] if np.asarray(features).ndim == 2 else 0
    e = np.zeros(0)
    return SplatPrimitives(
        means=np.zeros((0, 2)), cov=np.zeros((0, 3)), conic=np.zeros((0, 3)),
        depths=e, opacities=e, features=np.zeros((0, n_ch)), radii=e,
        source_index=np.zeros(0, dtype=np.int64),
    )


@dataclass
class RenderTarget:
    image: np.ndarray            # (H, W, C) float32
    alpha: np.ndarray            # (H, W) float32, 1 - final transmittance
    background: float = 0.0

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


def _integer_bbox(prims: SplatPrimitives, width: int, height: int):
    """Conservative pixel bbox of the 3-sigma circle, clamped to the frame."""
    mx = prims.means[:, 0]
    my = prims.means[:, 1]
    r = prims.radii
    c0 = np.clip(np.floor(mx - r - 0.5).astype(np.int64), 0, width - 1)
    c1 = np.clip(np.ceil(mx + r - 0.5).astype(np.int64), 0, width - 1)
    r0 = np.clip(np.floor(my - r - 0.5).astype(np.int64), 0, height - 1)
    r1 = np.clip(np.ceil(my + r - 0.5).astype(np.int64), 0, height - 1)
    return np.stack([c0, c1, r0, r1], axis=1)


def _bin_splats(prims: SplatPrimitives, width: int, height: int):
    """Build the CSR (starts, entries) of depth-sorted splats per tile.

    Ties in depth resolve by splat index, so the composited result does not
    depend on how the sort was performed or how tiles are split over threads.
    """
    grid_w = (width + TILE_SIZE - 1) // TILE_SIZE
    grid_h = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = grid_w * grid_h
    m = prims.count
    bbox = _integer_bbox(prims, width, height)
    if m == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), bbox, grid_w

    tx0 = bbox[:, 0] // TILE_SIZE
    tx1 = bbox[:, 1] // TILE_SIZE
    ty0 = bbox[:, 2] // TILE_SIZE
    ty1 = bbox[:, 3] // TILE_SIZE
    tw = tx1 - tx0 + 1
    th = ty1 - ty0 + 1
    counts = tw * th
    total = int(counts.sum())
    splat = np.repeat(np.arange(m, dtype=np.int64), counts)
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(total, dtype=np.int64) - np.repeat(offs, counts)
    tw_e = np.repeat(tw, counts)
    tile = (np.repeat(ty0, counts) + pos // tw_e) * grid_w \
        + np.repeat(tx0, counts) + pos % tw_e

    rank = np.empty(m, dtype=np.int64)
    rank[np.argsort(prims.depths, kind="stable")] = np.arange(m)
    key = tile * np.int64(m) + rank[splat]
    order = np.argsort(key, kind="stable")
    entries = splat[order]
    tiles_sorted = tile[order]
    starts = np.searchsorted(tiles_sorted, np.arange(n_tiles + 1))
    return starts.astype(np.int64), entries, bbox, grid_w


def rasterize(prims: SplatPrimitives, width: int, height: int,
              background: float = 0.0, threads: int = 1) -> RenderTarget:
    """Tiled front-to-back compositor.

    Threads own disjoint tile ranges, so output is identical for any thread
    count.  The unoccluded remainder of each pixel takes the background.
    """
    n_ch = prims.features.shape[1]
    image = np.zeros((height, width, n_ch), dtype=np.float64)
    transmit = np.ones((height, width), dtype=np.float64)
    starts, entries, bbox, grid_w = _bin_splats(prims, width, height)
    n_tiles = starts.shape[0] - 1
    threads = max(1, int(threads))

    args = (starts, entries,
            np.ascontiguousarray(prims.means),
            np.ascontiguousarray(prims.conic),
            np.ascontiguousarray(prims.opacities),
            np.ascontiguousarray(prims.features),
            np.ascontiguousarray(bbox))
    if threads == 1 or n_tiles < 2 * threads:
        _kernels.composite_tiles(0, n_tiles, grid_w, TILE_SIZE, *args,
                                 image, transmit)
    else:
        bounds = np.linspace(0, n_tiles, threads + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [
                pool.submit(_kernels.composite_tiles, int(bounds[k]),
                            int(bounds[k + 1]), grid_w, TILE_SIZE, *args,
                            image, transmit)
                for k in range(threads)
            ]
            for f in futs:
                f.result()

    image += transmit[:, :, None] * background
    return RenderTarget(image=image.astype(np.float32),
                        alpha=(1.0 - transmit).astype(np.float32),
                        background=background)


def rasterize_reference(prims: SplatPrimitives, width: int, height: int,
                        background: float = 0.0) -> RenderTarget:
    """Brute-force compositor: every splat against every pixel, depth order.

    Same support cutoff, alpha cap, and early-out threshold as the tiled
    path, evaluated in the same per-pixel order, so it is the ground truth
    the tiled path is checked against.
    """
    n_ch = prims.features.shape[1]
    image = np.zeros((height, width, n_ch), dtype=np.float64)
    transmit = np.ones((height, width), dtype=np.float64)
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    order = np.lexsort((np.arange(prims.count), prims.depths))
    for i in order:
        dx = xs[None, :] - prims.means[i, 0]
        dy = ys[:, None] - prims.means[i, 1]
        ia, ib, ic = prims.conic[i]
        chi2 = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
        mask = (chi2 <= CHI2_CUTOFF) & (transmit >= TRANSMITTANCE_CUTOFF)
        if not np.any(mask):
            continue
        alpha = np.where(
            mask,
            np.minimum(ALPHA_CAP, prims.opacities[i] * np.exp(-0.5 * chi2)),
            0.0)
        image += (transmit * alpha)[:, :, None] * prims.features[i]
        transmit *= 1.0 - alpha
    image += transmit[:, :, None] * background
    return RenderTarget(image=image.astype(np.float32),
                        alpha=(1.0 - transmit).astype(np.float32),
                        background=background)


def render(positions, scales, rotations, opacities, features, camera: Camera,
           background: float = 0.0, threads: int = 1,
           reference: bool = False) -> RenderTarget:
    """Project then rasterize in one call."""
    prims = project_gaussians(positions, scales, rotations, opacities,
                              features, camera)
    if reference:
        return rasterize_reference(prims, camera.width, camera.height,
                                   background)
    return rasterize(prims, camera.width, camera.height, background, threads)


class Refiner:
    """Two-level conv encoder-decoder with a skip, over all rendered channels.

    Produces a 3-channel residual for the RGB part of the render.  The
    output projection is zero-initialised by default, making an untrained
    refiner exactly the identity on channels 0..2.
    """

    def __init__(self, in_channels: int, width: int = 16, seed: int = 0,
                 zero_init: bool = True):
        rng = seeded_rng(derive_seed(seed, TAG_REFINER))
        self.in_channels = int(in_channels)
        self.width = width
        k = 3

        def conv_init(c_out, c_in, zero=False):
            if zero:
                w = np.zeros((c_out, c_in, k, k))
            else:
                bound = 1.0 / np.sqrt(c_in * k * k)
                w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
            return w.astype(np.float32), np.zeros(c_out, dtype=np.float32)

        self.enc1 = conv_init(width, self.in_channels)
        self.enc2 = conv_init(width, width)
        self.dec1 = conv_init(width, 2 * width)
        self.out = conv_init(3, width, zero=zero_init)

    def weight_arrays(self) -> dict:
        out = {}
        for name in ("enc1", "enc2", "dec1", "out"):
            w, b = getattr(self, name)
            out[f"{name}/w"] = w
            out[f"{name}/b"] = b
        return out

    def load_weight_arrays(self, arrays: dict):
        for name in ("enc1", "enc2", "dec1", "out"):
            setattr(self, name, (arrays[f"{name}/w"], arrays[f"{name}/b"]))

    def residual(self, features: np.ndarray) -> np.ndarray:
        """features: (H, W, C) rendered channels.  Returns (H, W, 3)."""
        from .neural import conv2d

        chw = np.transpose(np.asarray(features, dtype=np.float64), (2, 0, 1))
        f1 = np.maximum(conv2d(chw, *self.enc1), 0.0)
        f2 = np.maximum(conv2d(_avg_pool2(f1), *self.enc2), 0.0)
        up = _upsample2(f2, f1.shape[1], f1.shape[2])
        f3 = np.maximum(conv2d(np.concatenate([f1, up], axis=0), *self.dec1),
                        0.0)
        return np.transpose(conv2d(f3, *self.out), (1, 2, 0))


def refine(coarse: RenderTarget, refiner: Refiner) -> np.ndarray:
    """Refined RGB image: clip(render[..0:3] + residual(all channels), 0, 1).

    With a zero-initialised refiner the result equals the coarse RGB
    bit for bit.
    """
    feats = coarse.image
    if feats.ndim != 3 or feats.shape[2] != refiner.in_channels:
        raise ValueError(
            f"render has {feats.shape[2] if feats.ndim == 3 else '?'} "
            f"channels, refiner expects {refiner.in_channels}")
    res = refiner.residual(feats)
    out = np.asarray(feats[:, :, :3], dtype=np.float64) + res
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    t = x[:, : h2 * 2, : w2 * 2].reshape(c, h2, 2, w2, 2)
    return t.mean(axis=(2, 4))


def _upsample2(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    up = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    out = np.zeros((x.shape[0], out_h, out_w), dtype=x.dtype)
    h = min(out_h, up.shape[1])
    w = min(out_w, up.shape[2])
    out[:, :h, :w] = up[:, :h, :w]
    if up.shape[1] < out_h:
        out[:, up.shape[1]:, :w] = up[:, -1:, :w]
    if up.shape[2] < out_w:
        out[:, :h, up.shape[2]:] = out[:, :h, up.shape[2] - 1: up.shape[2]]
    return out
