import numpy as np
import pytest

from headsplat.losses import (SSIM_C1, AttentionCostConfig, LossWeights,
                              attention_cost, cost_ratio, curriculum_probs,
                              curriculum_sample, gaussian_window, grad_check,
                              l2_loss, l2_loss_and_grad, offset_penalty,
                              patch_feature_distance, psnr, ssim,
                              ssim_and_grad, total_loss)


def test_l2_oracle(rng):
    a = rng.uniform(size=(8, 8))
    assert l2_loss(a, a) == 0.0
    assert np.isclose(l2_loss(a, a + 0.1), 0.01)
    val, grad = l2_loss_and_grad(a, a + 0.1)
    assert np.isclose(val, 0.01)
    assert np.allclose(grad, -2 * 0.1 / a.size)


def test_psnr_values(rng):
    a = rng.uniform(size=(16, 16))
    assert psnr(a, a) == float("inf")
    assert np.isclose(psnr(a, a + 0.1), 20.0)


def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert np.isclose(w.sum(), 1.0)
    assert w[5, 5] == w.max()


def test_ssim_identity_and_symmetry(rng):
    a = rng.uniform(size=(20, 20))
    b = rng.uniform(size=(20, 20))
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    assert np.isclose(ssim(a, b), ssim(b, a), atol=1e-12)
    assert ssim(a, b) < 1.0


def test_ssim_constant_images():
    p, q = 0.2, 0.8
    want = (2 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1)
    got = ssim(np.full((12, 12), p), np.full((12, 12), q))
    assert np.isclose(got, want, atol=1e-9)


def test_ssim_small_image_window_shrinks():
    a = np.random.default_rng(0).uniform(size=(4, 4))
    assert abs(ssim(a, a) - 1.0) <= 1e-9


def test_ssim_grad_matches_value(rng):
    a = rng.uniform(size=(16, 16))
    b = rng.uniform(size=(16, 16))
    v, g = ssim_and_grad(a, b)
    assert np.isclose(v, ssim(a, b), atol=1e-12)
    assert g.shape == a.shape


def test_patch_feature_distance(rng):
    a = rng.uniform(size=(32, 32, 3))
    assert patch_feature_distance(a, a) == 0.0
    assert patch_feature_distance(a, 1.0 - a) > 0.0
    with pytest.raises(ValueError):
        patch_feature_distance(a, a[:16])


def test_offset_penalty():
    assert offset_penalty(np.array([[3.0, 4.0, 0.0]])) == 5.0
    assert offset_penalty(np.zeros((0, 3))) == 0.0
    assert offset_penalty(np.zeros((7, 3))) == 0.0


def test_total_loss_zero_identity(rng):
    img = rng.uniform(size=(16, 16))
    total, terms = total_loss(img, img, img, np.zeros((4, 3)))
    assert total == 0.0
    for key in ("l2", "ssim", "perceptual", "offset"):
        assert terms[key] == 0.0


def test_total_loss_constant_hand_oracle():
    """4x4 constant images make every term computable by hand."""
    p, q1, q2 = 0.5, 0.3, 0.4
    driven = np.full((4, 4), p)
    coarse = np.full((4, 4), q1)
    refined = np.full((4, 4), q2)
    offsets = np.array([[2.0, 0.0, 0.0]])

    def flat_perceptual(a, b):
        return float(np.mean((a - b) ** 2))

    w = LossWeights()
    total, terms = total_loss(driven, coarse, refined, offsets, w,
                              perceptual=flat_perceptual)

    def const_ssim(x, y):
        return (2 * x * y + SSIM_C1) / (x * x + y * y + SSIM_C1)

    want_l2 = (p - q1) ** 2 + (p - q2) ** 2
    want_ssim = (1 - const_ssim(p, q1)) + (1 - const_ssim(p, q2))
    want_perc = (p - q1) ** 2 + (p - q2) ** 2
    want = (w.l2 * want_l2 + w.ssim * want_ssim + w.perceptual * want_perc
            + w.offset * 2.0)
    assert abs(terms["l2"] - want_l2) <= 1e-9
    assert abs(terms["ssim"] - want_ssim) <= 1e-6
    assert abs(terms["offset"] - 2.0) <= 1e-12
    assert abs(total - want) <= 1e-6


def test_total_loss_shape_checks(rng):
    img = rng.uniform(size=(8, 8))
    with pytest.raises(ValueError):
        total_loss(img, img[:4], img, np.zeros((1, 3)))
    with pytest.raises(ValueError):
        total_loss(img, img, img[:, :4], np.zeros((1, 3)))


def test_default_weights():
    w = LossWeights()
    assert (w.l2, w.ssim, w.perceptual, w.offset) == (10.0, 1.0, 0.1, 0.1)


def test_grad_check_api():
    fn = lambda x: float(np.sum(x ** 2))
    grad = lambda x: 2.0 * x
    x0 = np.random.default_rng(3).normal(size=(6, 6))
    assert grad_check(fn, grad, x0) < 1e-6
    wrong = lambda x: 3.0 * x
    assert grad_check(fn, wrong, x0) > 0.1
    with pytest.raises(ValueError):
        grad_check(fn, lambda x: np.zeros(3), x0)


def _probs(progress):
    p = curriculum_probs(progress)
    return p[0], p[1], p[2]


def test_curriculum_probs_regimes():
    assert _probs(0.0) == (1.0, 0.0, 0.0)
    assert _probs(0.1) == (1.0, 0.0, 0.0)
    assert _probs(0.2) == (0.0, 1.0, 0.0)
    assert _probs(0.3) == (0.0, 1.0, 0.0)
    assert _probs(0.5) == (0.1, 0.2, 0.7)
    assert _probs(1.0) == (0.1, 0.2, 0.7)


def test_curriculum_sample_support():
    rng = np.random.default_rng(0)
    assert {curriculum_sample(0.05, rng) for _ in range(20)} == {0}
    assert {curriculum_sample(0.25, rng) for _ in range(20)} == {1}
    seen = {curriculum_sample(0.9, rng) for _ in range(500)}
    assert seen == {0, 1, 2}


def test_attention_cost_integer_and_ratio():
    cfg = AttentionCostConfig(layers=2, heads=3, level=1, base_queries=10,
                              tokens=7, dim=12)
    c = attention_cost(cfg)
    assert isinstance(c, int)
    assert c == 2 * 3 * (10 * 4) * 7 * 12
    other = AttentionCostConfig(layers=2, heads=3, level=0, base_queries=10,
                                tokens=7, dim=12)
    assert cost_ratio(cfg, other) == 4.0
