"""Training losses, gradient checking, curriculum sampling, attention cost.

The photometric stack is weighted L2 + structural dissimilarity + a patch
statistics perceptual distance + an offset magnitude regulariser.  L2 and
SSIM come with closed-form gradients; grad_check verifies any (f, grad)
pair by central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.signal import convolve

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    l2: float = 10.0
    ssim: float = 1.0
    perceptual: float = 0.1
    offset: float = 0.1


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA
                    ) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise ValueError(f"expected (H, W) or (H, W, C) image, got {img.shape}")


def _ssim_channel(a, b, w):
    mu_a = convolve(a, w, mode="valid")
    mu_b = convolve(b, w, mode="valid")
    ca2 = convolve(a * a, w, mode="valid")
    cb2 = convolve(b * b, w, mode="valid")
    cab = convolve(a * b, w, mode="valid")
    var_a = ca2 - mu_a * mu_a
    var_b = cb2 - mu_b * mu_b
    cov = cab - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity, channels averaged, dynamic range 1.

    The window shrinks to the image when the image is smaller than 11 px.
    """
    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    size = min(SSIM_WINDOW, a.shape[0], a.shape[1])
    w = gaussian_window(size)
    vals = []
    for ch in range(a.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_channel(a[:, :, ch], b[:, :, ch], w)
        vals.append(np.mean(a1 * a2 / (b1 * b2)))
    return float(np.mean(vals))


def ssim_and_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """SSIM plus its exact gradient with respect to the first image.

    The valid-mode window sums have full-mode convolution as their adjoint
    (the window is symmetric), which spreads each per-window partial back
    onto the pixels it came from.
    """
    a3 = _as_channels(a)
    b3 = _as_channels(b)
    if a3.shape != b3.shape:
        raise ValueError(f"shape mismatch {a3.shape} vs {b3.shape}")
    size = min(SSIM_WINDOW, a3.shape[0], a3.shape[1])
    w = gaussian_window(size)
    n_ch = a3.shape[2]
    grad = np.zeros_like(a3)
    vals = []
    for ch in range(n_ch):
        ac = a3[:, :, ch]
        bc = b3[:, :, ch]
        mu_a, mu_b, a1, a2, b1, b2 = _ssim_channel(ac, bc, w)
        d = b1 * b2
        s = a1 * a2 / d
        vals.append(np.mean(s))
        n_win = s.size
        # partials w.r.t. the window sums of a, a^2 and a*b
        d_mu = 2.0 * mu_b * (a2 - a1) / d + 2.0 * mu_a * s * (1.0 / b2 - 1.0 / b1)
        d_ca2 = -s / b2
        d_cab = 2.0 * a1 / d
        g = (convolve(d_mu, w, mode="full")
             + 2.0 * ac * convolve(d_ca2, w, mode="full")
             + bc * convolve(d_cab, w, mode="full"))
        grad[:, :, ch] = g / (n_win * n_ch)
    value = float(np.mean(vals))
    if np.asarray(a).ndim == 2:
        return value, grad[:, :, 0]
    return value, grad


def l2_loss(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def l2_loss_and_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a - b
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise in dB for range-[0, 1] images; inf when equal."""
    mse = l2_loss(a, b)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def patch_feature_distance(a: np.ndarray, b: np.ndarray, grid: int = 8
                           ) -> float:
    """Mean squared distance between per-patch statistics of two images.

    Stands in for a feature-space comparison; images crop to a multiple of
    the grid so any size works.
    """
    from .neural import patch_statistics

    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[2] != 3:
        # stats operate on 3 channels; tile or trim
        a = np.repeat(a[:, :, :1], 3, axis=2) if a.shape[2] == 1 else a[:, :, :3]
        b = np.repeat(b[:, :, :1], 3, axis=2) if b.shape[2] == 1 else b[:, :, :3]
    h = (a.shape[0] // grid) * grid
    w = (a.shape[1] // grid) * grid
    if h == 0 or w == 0:
        return l2_loss(a, b)
    fa = patch_statistics(a[:h, :w], grid)
    fb = patch_statistics(b[:h, :w], grid)
    return float(np.mean((fa - fb) ** 2))


def offset_penalty(offsets: np.ndarray) -> float:
    """Euclidean norm of the flattened vertex-offset block."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.size == 0:
        return 0.0
    return float(np.linalg.norm(offsets.ravel()))


def total_loss(driven: np.ndarray, coarse: np.ndarray, refined: np.ndarray,
               offsets: np.ndarray, weights: LossWeights = LossWeights(),
               perceptual: Optional[Callable[[np.ndarray, np.ndarray], float]]
               = None) -> Tuple[float, dict]:
    """Weighted objective over both render stages plus a term breakdown.

    Photometric, structural and perceptual terms each compare the driving
    frame against the coarse and the refined image; the offset term takes
    the norm of the regressed vertex displacements.
    """
    driven = np.asarray(driven, dtype=np.float64)
    for name, img in (("coarse", coarse), ("refined", refined)):
        if np.asarray(img).shape != driven.shape:
            raise ValueError(
                f"{name} image {np.asarray(img).shape} does not match the "
                f"driving frame {driven.shape}")
    if perceptual is None:
        perceptual = patch_feature_distance
    terms = {
        "l2": l2_loss(driven, coarse) + l2_loss(driven, refined),
        "ssim": (1.0 - ssim(driven, coarse)) + (1.0 - ssim(driven, refined)),
        "perceptual": (float(perceptual(driven, coarse))
                       + float(perceptual(driven, refined))),
        "offset": offset_penalty(offsets),
    }
    total = (weights.l2 * terms["l2"] + weights.ssim * terms["ssim"]
             + weights.perceptual * terms["perceptual"]
             + weights.offset * terms["offset"])
    terms["total"] = total
    return total, terms


def grad_check(fn: Callable[[np.ndarray], float],
               grad_fn: Callable[[np.ndarray], np.ndarray],
               x0: np.ndarray, eps: float = 1e-4,
               n_samples: int = 40, seed: int = 0) -> float:
    """Max relative error of grad_fn against central differences at x0.

    Coordinates are sampled when x0 has more entries than n_samples.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    analytic = np.asarray(grad_fn(x0))
    if analytic.shape != x0.shape:
        raise ValueError(
            f"gradient shape {analytic.shape} does not match input {x0.shape}")
    flat = x0.ravel()
    g_flat = analytic.ravel()
    if flat.size <= n_samples:
        coords = np.arange(flat.size)
    else:
        coords = np.random.default_rng(seed).choice(
            flat.size, size=n_samples, replace=False)
    worst = 0.0
    for c in coords:
        xp = flat.copy(); xp[c] += eps
        xm = flat.copy(); xm[c] -= eps
        num = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * eps)
        denom = max(abs(num), abs(g_flat[c]), 1e-8)
        worst = max(worst, abs(num - g_flat[c]) / denom)
    return worst


# training schedule: coarse levels first, then a fixed mixture that keeps a
# trickle of coarse updates
CURRICULUM_COARSE_UNTIL = 0.1
CURRICULUM_MID_UNTIL = 0.3
CURRICULUM_MIX = {2: 0.7, 1: 0.2, 0: 0.1}


def curriculum_probs(progress: float) -> dict:
    """Level -> probability at a given training progress in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    if progress <= CURRICULUM_COARSE_UNTIL:
        return {0: 1.0, 1: 0.0, 2: 0.0}
    if progress <= CURRICULUM_MID_UNTIL:
        return {0: 0.0, 1: 1.0, 2: 0.0}
    return dict(CURRICULUM_MIX)


def curriculum_sample(progress: float, rng: np.random.Generator) -> int:
    """Draw a training LOD level for one step."""
    probs = curriculum_probs(progress)
    u = rng.random()
    acc = 0.0
    levels = sorted(probs, key=lambda k: -probs[k])
    for lvl in levels:
        acc += probs[lvl]
        if u < acc:
            return lvl
    return levels[-1]


@dataclass(frozen=True)
class AttentionCostConfig:
    """Dimensions that enter the query-token attention flop count."""

    layers: int
    heads: int
    level: int          # each subdivision level multiplies queries by 4
    base_queries: int
    tokens: int
    dim: int


def attention_cost(cfg: AttentionCostConfig) -> int:
    """layers * heads * 4^level * base_queries * tokens * dim, exact int."""
    return (int(cfg.layers) * int(cfg.heads) * (4 ** int(cfg.level))
            * int(cfg.base_queries) * int(cfg.tokens) * int(cfg.dim))


def cost_ratio(a: AttentionCostConfig, b: AttentionCostConfig) -> float:
    return attention_cost(a) / attention_cost(b)


# a dense full-resolution transformer pass vs the coarse query path used here
DENSE_BASELINE_COST = attention_cost(AttentionCostConfig(
    layers=10, heads=16, level=2, base_queries=5000, tokens=1369, dim=1024))
COARSE_QUERY_COST = attention_cost(AttentionCostConfig(
    layers=2, heads=8, level=0, base_queries=5000, tokens=1369, dim=256))
