"""Deterministic stand-ins for the learned blocks of the pipeline.

Weights are synthesized from seeds (uniform in +-1/sqrt(fan_in)) so every
forward pass is reproducible bit-for-bit; there is no training anywhere.
The backbone distills an image into per-patch statistics instead of running
a real vision transformer, but it keeps the production interface: one
spatial feature map plus a sequence of identity tokens.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import BackboneConfig
from .seeding import seeded_rng


@dataclass(frozen=True)
class MlpSpec:
    """widths = (in, hidden..., out); at least one affine layer."""

    widths: tuple
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    """Affine stack with activation between layers (never after the last)."""

    def __init__(self, spec: MlpSpec, final_bias=None):
        self.spec = spec
        rng = seeded_rng(spec.seed)
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(len(spec.widths) - 1):
            fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
            b = rng.uniform(-bound, bound, size=fan_out).astype(np.float32)
            self.layers.append((w, b))
        if final_bias is not None:
            w, _ = self.layers[-1]
            self.layers[-1] = (w, np.asarray(final_bias, dtype=np.float32).copy())

    @classmethod
    def from_weights(cls, layers, activation: str = "relu") -> "Mlp":
        widths = [layers[0][0].shape[0]] + [w.shape[1] for w, _ in layers]
        obj = cls.__new__(cls)
        obj.spec = MlpSpec(tuple(widths), activation=activation)
        obj.layers = [(np.asarray(w, dtype=np.float32),
                       np.asarray(b, dtype=np.float32)) for w, b in layers]
        return obj

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float32)
        squeeze = h.ndim == 1
        h = np.atleast_2d(h)
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input width {h.shape[1]}, expected {self.in_dim}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i != last and self.spec.activation == "relu":
                np.maximum(h, 0, out=h)
        return h[0] if squeeze else h


def mlp_forward(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    return Mlp(spec)(x)


def linear_projection(c_in: int, c_out: int, seed: int) -> np.ndarray:
    """Seeded (c_in, c_out) matrix scaled like a single affine layer."""
    rng = seeded_rng(seed)
    bound = 1.0 / np.sqrt(c_in)
    return rng.uniform(-bound, bound, size=(c_in, c_out)).astype(np.float32)


def positional_encoding_table(v_count: int, dim: int, seed: int) -> np.ndarray:
    """Per-vertex learned-style positional encodings, uniform in +-0.02."""
    rng = seeded_rng(seed)
    return rng.uniform(-0.02, 0.02, size=(v_count, dim)).astype(np.float32)


# ---------------------------------------------------------------------------
# attention

def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax(q k^T / sqrt(d_head))."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    logits = q @ k.T / np.sqrt(q.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return attention_weights(q, k) @ np.asarray(v, dtype=np.float64)


class CrossAttention:
    """Stack of cross-attention blocks: attention + residual + relu FF.

    Queries have width d (split across heads), keys/values come in with
    width kv_dim and are projected per block.
    """

    def __init__(self, d: int, kv_dim: int, layers: int = 2, heads: int = 8,
                 seed: int = 0, ff_mult: int = 4):
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.kv_dim, self.n_layers, self.heads = d, kv_dim, layers, heads
        rng = seeded_rng(seed)

        def mat(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)

        self.blocks = []
        for _ in range(layers):
            self.blocks.append({
                "wq": mat(d, d), "wk": mat(kv_dim, d), "wv": mat(kv_dim, d),
                "wo": mat(d, d),
                "w1": mat(d, ff_mult * d), "b1": np.zeros(ff_mult * d, np.float32),
                "w2": mat(ff_mult * d, d), "b2": np.zeros(d, np.float32),
            })

    def __call__(self, queries: np.ndarray, kv: np.ndarray) -> np.ndarray:
        x = np.asarray(queries, dtype=np.float32)
        kv = np.asarray(kv, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"queries must be (N, {self.d})")
        if kv.ndim != 2 or kv.shape[1] != self.kv_dim:
            raise ValueError(f"keys/values must be (T, {self.kv_dim})")
        dh = self.d // self.heads
        n, t = x.shape[0], kv.shape[0]
        for blk in self.blocks:
            q = (x @ blk["wq"]).reshape(n, self.heads, dh)
            k = (kv @ blk["wk"]).reshape(t, self.heads, dh)
            v = (kv @ blk["wv"]).reshape(t, self.heads, dh)
            mixed = np.empty_like(q)
            for h in range(self.heads):
                mixed[:, h, :] = scaled_dot_attention(q[:, h], k[:, h], v[:, h])
            x = x + mixed.reshape(n, self.d).astype(np.float32) @ blk["wo"]
            hdn = np.maximum(x @ blk["w1"] + blk["b1"], 0)
            x = x + hdn @ blk["w2"] + blk["b2"]
        return x


def cross_attention(queries: np.ndarray, kv: np.ndarray, layers: int = 2,
                    heads: int = 8, seed: int = 0) -> np.ndarray:
    """Convenience wrapper building the block stack from the array widths."""
    queries = np.asarray(queries)
    kv = np.asarray(kv)
    attn = CrossAttention(queries.shape[1], kv.shape[1], layers=layers,
                          heads=heads, seed=seed)
    return attn(queries, kv)


# ---------------------------------------------------------------------------
# convolution helper (shared by shoulder regression and the refiner)

def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """'same' zero-padded conv: (C, H, W) x (O, C, kh, kw) -> (O, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    kernels = np.asarray(kernels, dtype=np.float32)
    o, c, kh, kw = kernels.shape
    if x.shape[0] != c:
        raise ValueError(f"conv input has {x.shape[0]} channels, kernels expect {c}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, H, W, kh, kw)
    out = np.einsum("chwij,ocij->ohw", win, kernels, optimize=True)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float32)[:, None, None]
    return out.astype(np.float32)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-wise bilinear resize of (C, h, w) sampling at cell centers."""
    c, h, w = grid.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    g = grid.astype(np.float64)
    top = g[:, y0][:, :, x0] * (1 - fx) + g[:, y0][:, :, x1] * fx
    bot = g[:, y1][:, :, x0] * (1 - fx) + g[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic backbone

@dataclass
class FeatureBundle:
    """Backbone output: spatial map + identity tokens (+ per-LOD vertex
    features filled in by the pipeline)."""

    local: np.ndarray                 # (C, Hf, Wf) float32
    identity: np.ndarray              # (T, D) float32
    global_per_vertex: dict = field(default_factory=dict)  # level -> (N_k, d)

    @property
    def shapes(self) -> dict:
        out = {"local": tuple(self.local.shape),
               "identity": tuple(self.identity.shape)}
        for k, v in sorted(self.global_per_vertex.items()):
            out[f"global_l{k}"] = tuple(v.shape)
        return out


N_PATCH_STATS = 12  # mean, std, |dx| mean, |dy| mean, per RGB channel


def patch_statistics(image: np.ndarray, grid: int) -> np.ndarray:
    """(grid, grid, 12) per-patch stats; gradients never cross patch edges."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    ph, pw = h // grid, w // grid
    if ph < 1 or pw < 1:
        raise ValueError(f"image {h}x{w} too small for a {grid}x{grid} patch grid")
    crop = img[:ph * grid, :pw * grid]
    patches = crop.reshape(grid, ph, grid, pw, 3).transpose(0, 2, 1, 3, 4)
    mean = patches.mean(axis=(2, 3))
    std = patches.std(axis=(2, 3))
    if pw > 1:
        dx = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3))
    else:
        dx = np.zeros_like(mean)
    if ph > 1:
        dy = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3))
    else:
        dy = np.zeros_like(mean)
    return np.concatenate([mean, std, dx, dy], axis=2)


def synthetic_backbone(image: np.ndarray, config: BackboneConfig,
                       seed: int = 0) -> FeatureBundle:
    """Deterministic feature extraction standing in for a vision backbone.

    Per-patch statistics are projected by seeded linear maps into identity
    tokens (one per patch) and into channels of a local map, which is then
    bilinearly resized to the configured resolution.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    if img.shape[0] < config.patch_grid or img.shape[1] < config.patch_grid:
        raise ValueError(
            f"degenerate image dims {img.shape[:2]} for patch grid {config.patch_grid}")
    if np.nanmin(img) < -1e-6 or np.nanmax(img) > 1 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    stats = patch_statistics(img, config.patch_grid)  # (g, g, 12)
    g = config.patch_grid
    rng = seeded_rng(seed, 1)
    bound = 1.0 / np.sqrt(N_PATCH_STATS)
    w_tok = rng.uniform(-bound, bound, size=(N_PATCH_STATS, config.token_dim))
    w_loc = rng.uniform(-bound, bound, size=(N_PATCH_STATS, config.local_channels))
    tokens = (stats.reshape(g * g, N_PATCH_STATS) @ w_tok).astype(np.float32)
    local_grid = (stats @ w_loc).transpose(2, 0, 1)  # (C, g, g)
    local = bilinear_resize(local_grid, config.local_size, config.local_size)
    return FeatureBundle(local=local, identity=tokens)
