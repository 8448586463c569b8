import numpy as np
import pytest
from scipy.signal import convolve2d

from headsplat.config import BackboneConfig, PipelineConfig
from headsplat.neural import (CrossAttention, FeatureBundle, Mlp, MlpSpec,
                              attention_weights, bilinear_resize, conv2d,
                              cross_attention, linear_projection,
                              patch_statistics, positional_encoding_table,
                              synthetic_backbone)


def test_mlp_shapes_and_determinism():
    spec = MlpSpec(widths=(8, 16, 4), activation="relu", seed=21)
    a, b = Mlp(spec), Mlp(spec)
    x = np.random.default_rng(0).normal(size=(5, 8))
    assert a(x).shape == (5, 4)
    assert np.array_equal(a(x), b(x))
    assert a.in_dim == 8 and a.out_dim == 4
    # 1-D input squeezes back
    assert a(x[0]).shape == (4,)
    with pytest.raises(ValueError):
        a(np.zeros((2, 9)))


def test_mlp_final_bias_and_from_weights():
    spec = MlpSpec(widths=(4, 6, 3), activation="relu", seed=1)
    m = Mlp(spec, final_bias=np.array([1.0, 2.0, 3.0]))
    assert np.allclose(m.layers[-1][1], [1.0, 2.0, 3.0])
    clone = Mlp.from_weights(m.layers)
    x = np.random.default_rng(2).normal(size=(7, 4))
    assert np.array_equal(m(x), clone(x))


def test_mlp_zero_weights_pass_bias_through():
    layers = [(np.zeros((5, 3), np.float32), np.array([0.5, -1.0, 2.0],
                                                      np.float32))]
    m = Mlp.from_weights(layers)
    out = m(np.random.default_rng(0).normal(size=(4, 5)))
    assert np.allclose(out, [0.5, -1.0, 2.0])


def test_attention_weights_row_stochastic(rng):
    w = attention_weights(rng.normal(size=(6, 8)), rng.normal(size=(10, 8)))
    assert w.shape == (6, 10)
    assert np.all(w > 0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_cross_attention_shapes_and_determinism(rng):
    attn = CrossAttention(d=16, kv_dim=24, layers=2, heads=4, seed=9)
    q = rng.normal(size=(12, 16)).astype(np.float32)
    kv = rng.normal(size=(20, 24)).astype(np.float32)
    out = attn(q, kv)
    assert out.shape == (12, 16)
    again = CrossAttention(d=16, kv_dim=24, layers=2, heads=4, seed=9)(q, kv)
    assert np.array_equal(out, again)
    other = CrossAttention(d=16, kv_dim=24, layers=2, heads=4, seed=10)(q, kv)
    assert not np.array_equal(out, other)


def test_cross_attention_helper_matches_class(rng):
    q = rng.normal(size=(5, 8)).astype(np.float32)
    kv = rng.normal(size=(7, 8)).astype(np.float32)
    a = cross_attention(q, kv, layers=1, heads=2, seed=4)
    b = CrossAttention(d=8, kv_dim=8, layers=1, heads=2, seed=4)(q, kv)
    assert np.array_equal(a, b)


def test_conv2d_matches_scipy(rng):
    x = rng.normal(size=(2, 9, 11)).astype(np.float32)
    k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    bias = rng.normal(size=3).astype(np.float32)
    got = conv2d(x, k, bias)
    assert got.shape == (3, 9, 11)
    for o in range(3):
        want = bias[o]
        for c in range(2):
            # correlation, not convolution: flip the scipy kernel
            want = want + convolve2d(x[c].astype(np.float64),
                                     k[o, c, ::-1, ::-1].astype(np.float64),
                                     mode="same")
        assert np.allclose(got[o], want, atol=1e-4)
    with pytest.raises(ValueError):
        conv2d(np.zeros((4, 5, 5), np.float32), k)


def test_bilinear_resize_constant_and_identity(rng):
    const = np.full((3, 4, 4), 0.7, np.float32)
    assert np.allclose(bilinear_resize(const, 9, 13), 0.7, atol=1e-6)
    g = rng.normal(size=(2, 6, 5)).astype(np.float32)
    assert np.allclose(bilinear_resize(g, 6, 5), g, atol=1e-6)


def test_linear_projection_and_pe_table():
    p = linear_projection(10, 4, seed=3)
    assert p.shape == (10, 4) and p.dtype == np.float32
    assert np.array_equal(p, linear_projection(10, 4, seed=3))
    t = positional_encoding_table(50, 8, seed=5)
    assert t.shape == (50, 8)
    assert np.max(np.abs(t)) <= 0.02
    assert np.array_equal(t, positional_encoding_table(50, 8, seed=5))


def test_patch_statistics_constant_image():
    img = np.full((32, 32, 3), 0.25)
    s = patch_statistics(img, 4)
    assert s.shape == (4, 4, 12)
    assert np.allclose(s[..., :3], 0.25)
    assert np.allclose(s[..., 3:], 0.0)
    with pytest.raises(ValueError):
        patch_statistics(np.zeros((2, 2, 3)), 4)


def test_synthetic_backbone_bundle(portrait):
    cfg = PipelineConfig()
    bundle = synthetic_backbone(portrait, cfg.backbone, seed=0)
    assert isinstance(bundle, FeatureBundle)
    bc: BackboneConfig = cfg.backbone
    assert bundle.local.shape == (bc.local_channels, bc.local_size,
                                  bc.local_size)
    assert bundle.identity.shape == (bc.patch_grid ** 2, bc.token_dim)
    again = synthetic_backbone(portrait, cfg.backbone, seed=0)
    assert bundle.local.tobytes() == again.local.tobytes()
    assert bundle.identity.tobytes() == again.identity.tobytes()


def test_synthetic_backbone_validation():
    cfg = PipelineConfig().backbone
    with pytest.raises(ValueError):
        synthetic_backbone(np.zeros((16, 16)), cfg)
    with pytest.raises(ValueError):
        synthetic_backbone(np.full((32, 32, 3), 1.5), cfg)
    with pytest.raises(ValueError):
        synthetic_backbone(np.zeros((4, 4, 3)), cfg)
