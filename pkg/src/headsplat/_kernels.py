"""Numba kernels for the two per-pixel hot loops.

Everything here stays scalar float64 so the tiled path and the numpy
reference path perform identical arithmetic; tile regions are disjoint,
which makes the compositing kernel safe to run from multiple threads
(nogil) with bit-identical output for any thread count.
"""
from __future__ import annotations

import numpy as np
from numba import njit

TRANSMITTANCE_CUTOFF = 1e-4
ALPHA_CAP = 0.99
CHI2_CUTOFF = 9.0  # 3-sigma support; binning is conservative w.r.t. this


@njit(cache=True, nogil=True)
def depth_raster(pix, zs, valid, depth):
    """Z-buffer fill of triangles with perspective-correct depth.

    pix: (F, 3, 2) pixel coords, zs: (F, 3) camera z, valid: (F,) bool,
    depth: (H, W) preset to +inf, min-merged in place.  Pixel centers sit at
    half-integers; boundary pixels follow a top-left style rule so shared
    edges are claimed exactly once.
    """
    h, w = depth.shape
    for f in range(pix.shape[0]):
        if not valid[f]:
            continue
        x0 = pix[f, 0, 0]; y0 = pix[f, 0, 1]; z0 = zs[f, 0]
        x1 = pix[f, 1, 0]; y1 = pix[f, 1, 1]; z1 = zs[f, 1]
        x2 = pix[f, 2, 0]; y2 = pix[f, 2, 1]; z2 = zs[f, 2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            z1, z2 = z2, z1
            area = -area
        xmin = min(x0, min(x1, x2)); xmax = max(x0, max(x1, x2))
        ymin = min(y0, min(y1, y2)); ymax = max(y0, max(y1, y2))
        c0 = max(0, int(np.floor(xmin - 0.5)))
        c1 = min(w - 1, int(np.ceil(xmax - 0.5)))
        r0 = max(0, int(np.floor(ymin - 0.5)))
        r1 = min(h - 1, int(np.ceil(ymax - 0.5)))
        if c0 > c1 or r0 > r1:
            continue
        # edge i is opposite vertex i; inside => all e > 0 for positive area
        ex0 = x2 - x1; ey0 = y2 - y1
        ex1 = x0 - x2; ey1 = y0 - y2
        ex2 = x1 - x0; ey2 = y1 - y0
        tl0 = (ey0 < 0.0) or (ey0 == 0.0 and ex0 > 0.0)
        tl1 = (ey1 < 0.0) or (ey1 == 0.0 and ex1 > 0.0)
        tl2 = (ey2 < 0.0) or (ey2 == 0.0 and ex2 > 0.0)
        iz0 = 1.0 / z0; iz1 = 1.0 / z1; iz2 = 1.0 / z2
        inv_area = 1.0 / area
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                e0 = ex0 * (py - y1) - ey0 * (px - x1)
                e1 = ex1 * (py - y2) - ey1 * (px - x2)
                e2 = ex2 * (py - y0) - ey2 * (px - x0)
                if (e0 > 0.0 or (e0 == 0.0 and tl0)) and \
                   (e1 > 0.0 or (e1 == 0.0 and tl1)) and \
                   (e2 > 0.0 or (e2 == 0.0 and tl2)):
                    l0 = e0 * inv_area
                    l1 = e1 * inv_area
                    l2 = e2 * inv_area
                    z = 1.0 / (l0 * iz0 + l1 * iz1 + l2 * iz2)
                    if z < depth[r, c]:
                        depth[r, c] = z
    return depth


@njit(cache=True, nogil=True)
def composite_tiles(t_begin, t_end, grid_w, tile_size,
                    starts, entries, means, conic, opac, feats, bbox,
                    image, transmit):
    """Front-to-back compositing of one range of tiles.

    entries holds splat indices sorted by (tile, depth, index); starts is the
    CSR offset array over tiles.  image is (H, W, C) float64, transmit is the
    per-pixel transmittance, both updated in place.  A contribution is only
    evaluated inside the chi^2 <= 9 ellipse (matching the binning radius) and
    a pixel stops accumulating once transmittance falls below 1e-4.
    """
    h, w, n_ch = image.shape
    for t in range(t_begin, t_end):
        ty = t // grid_w
        tx = t - ty * grid_w
        tr0 = ty * tile_size
        tc0 = tx * tile_size
        tr1 = min(tr0 + tile_size, h) - 1
        tc1 = min(tc0 + tile_size, w) - 1
        lo = starts[t]
        hi = starts[t + 1]
        if hi <= lo:
            continue
        live = (tr1 - tr0 + 1) * (tc1 - tc0 + 1)
        for e in range(lo, hi):
            i = entries[e]
            r0 = bbox[i, 2]
            r1 = bbox[i, 3]
            c0 = bbox[i, 0]
            c1 = bbox[i, 1]
            if r0 < tr0:
                r0 = tr0
            if r1 > tr1:
                r1 = tr1
            if c0 < tc0:
                c0 = tc0
            if c1 > tc1:
                c1 = tc1
            if r0 > r1 or c0 > c1:
                continue
            mx = means[i, 0]; my = means[i, 1]
            ia = conic[i, 0]; ib = conic[i, 1]; ic = conic[i, 2]
            o = opac[i]
            for r in range(r0, r1 + 1):
                py = r + 0.5
                dy = py - my
                for c in range(c0, c1 + 1):
                    t_val = transmit[r, c]
                    if t_val < TRANSMITTANCE_CUTOFF:
                        continue
                    dx = (c + 0.5) - mx
                    chi2 = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                    if chi2 > CHI2_CUTOFF:
                        continue
                    alpha = o * np.exp(-0.5 * chi2)
                    if alpha > ALPHA_CAP:
                        alpha = ALPHA_CAP
                    for ch in range(n_ch):
                        image[r, c, ch] += t_val * alpha * feats[i, ch]
                    t_new = t_val * (1.0 - alpha)
                    transmit[r, c] = t_new
                    if t_new < TRANSMITTANCE_CUTOFF:
                        live -= 1
            if live <= 0:
                break
