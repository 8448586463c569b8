"""Mesh z-buffer visibility and occlusion-aware feature fusion.

A depth map is rasterised from the LOD mesh, each vertex is tested against
it at its own projected pixel, and screen-space samples are then added to
the per-vertex base features only where the vertex is visible:

    fused = base + sample * mask

so occluded vertices keep exactly their base features and visible ones get
exactly base + sample.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import _kernels
from .geometry import Camera

# default slack when comparing a vertex depth against the rasterised buffer;
# scaled by the camera depth range so it is resolution independent
RELATIVE_DEPTH_EPS = 1e-3


def default_eps(camera: Camera) -> float:
    return RELATIVE_DEPTH_EPS * (camera.far - camera.near)


def rasterize_depth(vertices: np.ndarray, faces: np.ndarray,
                    camera: Camera) -> np.ndarray:
    """Fill a (H, W) float64 depth map, +inf where nothing lands.

    Triangles with any vertex outside [near, far] are dropped whole;
    partially off-frame triangles are clipped by the pixel loop.  Back
    faces rasterise too, the depth min handles them.
    """
    pix, depth, _ = camera.project(vertices)
    zs = depth[np.asarray(faces, dtype=np.int64)]
    valid = np.all((zs >= camera.near) & (zs <= camera.far), axis=1)
    tri_pix = np.ascontiguousarray(pix[np.asarray(faces, dtype=np.int64)],
                                   dtype=np.float64)
    buf = np.full((camera.height, camera.width), np.inf, dtype=np.float64)
    _kernels.depth_raster(tri_pix, np.ascontiguousarray(zs, dtype=np.float64),
                          valid, buf)
    return buf


def vertex_pixels(vertices: np.ndarray, camera: Camera):
    """Projected pixel coords, integer raster cells, depths, in-frame flags.

    The raster cell of a point at the exact right/bottom frame edge clamps
    inward so every in-frame point owns a valid cell.
    """
    pix, depth, in_frame = camera.project(vertices)
    col = np.clip(np.floor(pix[:, 0]).astype(np.int64), 0, camera.width - 1)
    row = np.clip(np.floor(pix[:, 1]).astype(np.int64), 0, camera.height - 1)
    return pix, row, col, depth, in_frame


def visibility_mask(vertices: np.ndarray, camera: Camera,
                    depth_map: np.ndarray,
                    eps: Optional[float] = None) -> np.ndarray:
    """True where a vertex is in frame and no closer surface covers it.

    A vertex passes when its own depth is within eps of the buffer value at
    its pixel.  eps=0 demands the vertex depth not exceed the surface depth
    at all.
    """
    if eps is None:
        eps = default_eps(camera)
    _, row, col, depth, in_frame = vertex_pixels(vertices, camera)
    buffer_at = depth_map[row, col]
    return in_frame & (depth <= buffer_at + eps)


def sample_at_pixels(feature_grid: np.ndarray, pixels: np.ndarray,
                     width: int, height: int) -> np.ndarray:
    """Bilinear sample of a (C, Hf, Wf) grid stretched over the frame.

    Texel centers sit at pixel ((c + 0.5) * W / Wf, (r + 0.5) * H / Hf);
    coordinates clamp at the border.  A query landing exactly on a texel
    center returns that texel unchanged.
    """
    c_ch, hf, wf = feature_grid.shape
    gx = np.asarray(pixels[:, 0], dtype=np.float64) * (wf / width) - 0.5
    gy = np.asarray(pixels[:, 1], dtype=np.float64) * (hf / height) - 0.5
    gx = np.clip(gx, 0.0, wf - 1.0)
    gy = np.clip(gy, 0.0, hf - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    fx = gx - x0
    fy = gy - y0
    g = feature_grid.reshape(c_ch, -1)
    f00 = g[:, y0 * wf + x0]
    f01 = g[:, y0 * wf + x1]
    f10 = g[:, y1 * wf + x0]
    f11 = g[:, y1 * wf + x1]
    top = f00 * (1.0 - fx) + f01 * fx
    bot = f10 * (1.0 - fx) + f11 * fx
    return (top * (1.0 - fy) + bot * fy).T


def sample_local(feature_grid: np.ndarray, vertices: np.ndarray,
                 camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Per-vertex screen-space samples plus in-frame flags.

    Out-of-frame vertices sample as all zeros and are flagged False.
    """
    pix, _, in_frame = camera.project(vertices)
    samples = sample_at_pixels(feature_grid, pix, camera.width, camera.height)
    samples[~in_frame] = 0.0
    return samples, in_frame


def fuse(base: np.ndarray, local: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """base + local * mask, rows gated by per-vertex visibility.

    Masked-off rows return the base rows bit-exactly; masked-on rows are the
    exact elementwise sum.
    """
    base = np.asarray(base)
    local = np.asarray(local)
    if base.shape != local.shape:
        raise ValueError(
            f"fuse shape mismatch {base.shape} vs {local.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (base.shape[0],):
        raise ValueError(
            f"mask has shape {m.shape}, expected ({base.shape[0]},)")
    return np.where(m[:, None], base + local, base)


def fused_features(vertices: np.ndarray, faces: np.ndarray, camera: Camera,
                   feature_grid: np.ndarray, base: np.ndarray,
                   local_proj: Optional[np.ndarray] = None,
                   eps: Optional[float] = None
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Full pipeline: depth raster, visibility, sample, project, add.

    local_proj maps sample channels C to the base width when they differ.
    Returns (fused (N, d), visible (N,)).
    """
    depth_map = rasterize_depth(vertices, camera=camera, faces=faces)
    visible = visibility_mask(vertices, camera, depth_map, eps)
    samples, _ = sample_local(feature_grid, vertices, camera)
    if local_proj is not None:
        samples = samples @ np.asarray(local_proj, dtype=samples.dtype)
    fused = fuse(base, samples.astype(np.asarray(base).dtype, copy=False),
                 visible)
    return fused, visible
