import json

import numpy as np
import pytest

from headsplat.parametric import (ModelDimensionError, ModelFormatError,
                                  ModelTruncatedError, ParametricHeadModel,
                                  PoseParams, geodesic_sphere, load_model,
                                  make_synthetic_model, morph, pose_feature,
                                  save_model, skin, joint_transforms)


@pytest.fixture(scope="module")
def model():
    return make_synthetic_model(seed=3, v_count=162)


def test_geodesic_counts():
    for n in (1, 2, 3, 4, 8):
        v, f = geodesic_sphere(n)
        assert len(v) == 10 * n * n + 2
        assert len(f) == 20 * n * n
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)


def test_geodesic_watertight():
    from headsplat.subdivision import euler_characteristic, unique_edges
    v, f = geodesic_sphere(4)
    edges, _ = unique_edges(f.astype(np.int64), check_manifold=True)
    assert euler_characteristic(len(v), f) == 2
    assert len(edges) == len(v) + len(f) - 2


def test_model_determinism():
    a = make_synthetic_model(seed=5, v_count=162)
    b = make_synthetic_model(seed=5, v_count=162)
    assert a.template.tobytes() == b.template.tobytes()
    assert a.skin_weights.tobytes() == b.skin_weights.tobytes()
    c = make_synthetic_model(seed=6, v_count=162)
    assert a.template.tobytes() != c.template.tobytes()


def test_skin_weights_convex(model):
    w = model.skin_weights
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_neutral_morph_is_template(model):
    p = PoseParams.neutral(model)
    assert np.allclose(morph(model, p), model.template, atol=1e-12)
    assert pose_feature(model, p.theta).size == 9 * (model.n_joints - 1)
    assert np.all(pose_feature(model, p.theta) == 0.0)


def test_neutral_skin_is_identity(model):
    p = PoseParams.neutral(model)
    posed = skin(model, morph(model, p), p)
    assert np.allclose(posed, model.template, atol=1e-10)


def test_morph_offset_additive(model):
    p = PoseParams.neutral(model)
    off = np.full((model.n_vertices, 3), 0.01)
    assert np.allclose(morph(model, p, offset=off),
                       morph(model, p) + off, atol=1e-15)
    with pytest.raises(ModelDimensionError):
        morph(model, p, offset=np.zeros((3, 3)))


def test_pose_moves_vertices(model):
    p = PoseParams.neutral(model)
    theta = p.theta.copy()
    theta[3] = 0.3  # bend the neck joint
    q = PoseParams(beta=p.beta, theta=theta, psi=p.psi)
    posed = skin(model, morph(model, q), q)
    assert np.max(np.abs(posed - model.template)) > 1e-3


def test_translation_is_rigid(model):
    p = PoseParams.neutral(model)
    theta = p.theta.copy()
    theta[-3:] = [0.1, -0.2, 0.3]
    q = PoseParams(beta=p.beta, theta=theta, psi=p.psi)
    posed = skin(model, morph(model, q), q)
    assert np.allclose(posed, model.template + theta[-3:], atol=1e-10)


def test_dimension_errors(model):
    p = PoseParams.neutral(model)
    with pytest.raises(ModelDimensionError):
        morph(model, PoseParams(beta=np.zeros(3), theta=p.theta, psi=p.psi))
    with pytest.raises(ModelDimensionError):
        morph(model, PoseParams(beta=p.beta, theta=np.zeros(7), psi=p.psi))
    with pytest.raises(ModelDimensionError):
        pose_feature(model, np.zeros(9))


def test_joint_transforms_chain(model):
    p = PoseParams.neutral(model)
    r, t = joint_transforms(model, p.beta, p.theta)
    assert r.shape == (model.n_joints, 3, 3)
    assert t.shape == (model.n_joints, 3)
    # rest pose removed: every joint transform is the identity
    assert np.allclose(r, np.eye(3), atol=1e-12)
    assert np.allclose(t, 0.0, atol=1e-12)


def test_save_load_round_trip(model, tmp_path):
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    for name in ("template", "shape_basis", "pose_basis", "expr_basis",
                 "joint_rest", "joint_shape", "joint_parents",
                 "skin_weights", "faces"):
        assert getattr(back, name).tobytes() == getattr(model, name).tobytes()


def test_load_error_taxonomy(model, tmp_path):
    root = tmp_path / "m"
    save_model(model, root)

    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "nowhere")

    manifest = json.loads((root / "model.json").read_text())
    manifest["format"] = "something-else"
    bad = tmp_path / "badfmt"
    bad.mkdir()
    (bad / "model.json").write_text(json.dumps(manifest))
    (bad / "arrays.bin").write_bytes((root / "arrays.bin").read_bytes())
    with pytest.raises(ModelFormatError):
        load_model(bad)

    trunc = tmp_path / "trunc"
    trunc.mkdir()
    (trunc / "model.json").write_text((root / "model.json").read_text())
    (trunc / "arrays.bin").write_bytes(
        (root / "arrays.bin").read_bytes()[:100])
    with pytest.raises(ModelTruncatedError):
        load_model(trunc)

    flip = tmp_path / "flip"
    flip.mkdir()
    (flip / "model.json").write_text((root / "model.json").read_text())
    blob = bytearray((root / "arrays.bin").read_bytes())
    blob[10] ^= 0xFF
    (flip / "arrays.bin").write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError):
        load_model(flip)


def test_make_synthetic_model_arg_validation():
    with pytest.raises(ValueError):
        make_synthetic_model(v_count=2)
    with pytest.raises(ValueError):
        make_synthetic_model(n_joints=0)


def test_model_post_init_dtypes():
    m = make_synthetic_model(seed=0, v_count=42)
    assert m.template.dtype == np.float32
    assert m.faces.dtype == np.uint32
    assert m.joint_parents.dtype == np.int32
    assert isinstance(m, ParametricHeadModel)
