import numpy as np
import pytest

from headsplat.assembly import (HEAD_REGION, IDENTITY_QUAT, OPACITY_HI,
                                OPACITY_LO, SHOULDER_REGION, AssemblyError,
                                AttributeMlps, GaussianSet, ShoulderConv,
                                build_shoulder_plane, combine,
                                downsample_mask, empty_set,
                                mean_visible_depth, portrait_mask,
                                regress_head, regress_shoulder, shoulder_mask,
                                vertex_base_scale)
from headsplat.geometry import Camera
from headsplat.neural import Mlp
from headsplat.parametric import geodesic_sphere


def make_set(n, c=3, rng=None):
    rng = rng or np.random.default_rng(0)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        positions=rng.normal(size=(n, 3)).astype(np.float32),
        scales=rng.uniform(0.01, 0.05, size=(n, 3)).astype(np.float32),
        rotations=q.astype(np.float32),
        opacities=rng.uniform(0.1, 0.9, size=n).astype(np.float32),
        features=rng.uniform(0, 1, size=(n, c)).astype(np.float32),
        region=np.zeros(n, np.uint8))


def zero_mlps(d, c_feat, hidden=16):
    def head(out, bias=None):
        b_last = np.zeros(out, np.float32) if bias is None else \
            np.asarray(bias, np.float32)
        return Mlp.from_weights([
            (np.zeros((d, hidden), np.float32), np.zeros(hidden, np.float32)),
            (np.zeros((hidden, out), np.float32), b_last)])
    return AttributeMlps(feature=head(c_feat), opacity=head(1),
                         scale=head(3), rotation=head(4, IDENTITY_QUAT))


def test_gaussian_set_shape_checks():
    ok = make_set(5)
    assert ok.count == 5 and ok.n_channels == 3
    with pytest.raises(AssemblyError):
        GaussianSet(positions=ok.positions, scales=ok.scales[:4],
                    rotations=ok.rotations, opacities=ok.opacities,
                    features=ok.features, region=ok.region)
    with pytest.raises(AssemblyError):
        GaussianSet(positions=ok.positions, scales=ok.scales,
                    rotations=ok.rotations, opacities=ok.opacities,
                    features=ok.features[:, :2], region=ok.region)


def test_assert_finite():
    s = make_set(4)
    s.assert_finite()
    s.scales[2, 1] = np.nan
    with pytest.raises(AssemblyError):
        s.assert_finite()


def test_combine_head_first():
    h, s = make_set(3), make_set(2)
    s = GaussianSet(positions=s.positions, scales=s.scales,
                    rotations=s.rotations, opacities=s.opacities,
                    features=s.features,
                    region=np.full(2, SHOULDER_REGION, np.uint8))
    both = combine(h, s)
    assert both.count == 5
    assert np.array_equal(both.positions[:3], h.positions)
    assert np.array_equal(both.region, [0, 0, 0, 1, 1])
    with pytest.raises(AssemblyError):
        combine(make_set(2, c=3), make_set(2, c=5))


def test_vertex_base_scale_regular():
    verts, faces = geodesic_sphere(1)  # icosahedron, all edges equal
    s = vertex_base_scale(verts, faces)
    assert s.shape == (12,)
    assert np.allclose(s, s[0], atol=1e-6)
    edge = np.linalg.norm(verts[faces[0, 0]] - verts[faces[0, 1]])
    assert np.isclose(s[0], edge, atol=1e-6)


def test_regress_head_zero_network_identities(rng):
    verts, faces = geodesic_sphere(2)
    verts = verts * 0.1  # keep edge lengths inside the scale clamp
    base_scale = vertex_base_scale(verts, faces)
    feats = rng.normal(size=(len(verts), 8))
    out = regress_head(feats, verts.astype(np.float32), base_scale,
                       zero_mlps(8, 6))
    assert np.array_equal(out.positions, verts.astype(np.float32))
    assert np.allclose(out.opacities, 0.5)
    # zero raw log-scale: splat size equals the local edge length
    assert np.allclose(out.scales, base_scale[:, None], atol=1e-7)
    assert np.allclose(out.rotations, [1, 0, 0, 0])
    assert np.allclose(out.features[:, :3], 0.5)
    assert np.allclose(out.features[:, 3:], 0.0)
    assert np.all(out.region == HEAD_REGION)


def test_regress_head_clamps(rng):
    verts, faces = geodesic_sphere(2)
    base_scale = vertex_base_scale(verts, faces)
    feats = rng.normal(size=(len(verts), 8))
    out = regress_head(feats, verts.astype(np.float32), base_scale,
                       zero_mlps(8, 6), s_min=1e-4, s_max=0.2)
    assert np.all(out.scales >= 1e-4) and np.all(out.scales <= 0.2)
    assert np.all(out.opacities >= OPACITY_LO)
    assert np.all(out.opacities <= OPACITY_HI)
    assert np.allclose(np.linalg.norm(out.rotations, axis=1), 1.0, atol=1e-6)


def test_regress_head_rejects_nan(rng):
    verts, faces = geodesic_sphere(1)
    feats = rng.normal(size=(12, 8))
    feats[3, 2] = np.nan
    with pytest.raises(AssemblyError):
        regress_head(feats, verts.astype(np.float32),
                     vertex_base_scale(verts, faces), zero_mlps(8, 4))
    with pytest.raises(AssemblyError):
        regress_head(rng.normal(size=(12, 8)),
                     verts[:5].astype(np.float32),
                     vertex_base_scale(verts, faces), zero_mlps(8, 4))


def test_seeded_mlps_deterministic(rng):
    a = AttributeMlps.seeded(16, 32, 8, seed=7)
    b = AttributeMlps.seeded(16, 32, 8, seed=7)
    x = rng.normal(size=(5, 16))
    assert np.array_equal(a.feature(x), b.feature(x))
    assert np.array_equal(a.rotation(x), b.rotation(x))
    # identity bias shows up for near-zero input
    q = a.rotation(np.zeros((1, 16)))
    assert abs(q[0, 0] - 1.0) < 0.5


def test_mlps_weight_round_trip(rng):
    a = AttributeMlps.seeded(12, 24, 5, seed=3)
    back = AttributeMlps.from_weight_arrays(a.weight_arrays())
    x = rng.normal(size=(6, 12))
    for name in ("feature", "opacity", "scale", "rotation"):
        assert np.array_equal(getattr(a, name)(x), getattr(back, name)(x))
    with pytest.raises(KeyError):
        AttributeMlps.from_weight_arrays({"feature/w0": np.zeros((2, 2))})


def test_portrait_and_shoulder_masks():
    img = np.zeros((40, 30, 3), np.float32)
    img[5:35, 8:22] = 0.6
    pm = portrait_mask(img)
    assert pm[10, 10] and not pm[0, 0]

    depth = np.full((40, 30), np.inf)
    depth[5:18, 10:20] = 2.0  # head covers the upper part
    sm = shoulder_mask(pm, depth, eta=0.5)
    assert not sm[:20].any()          # above the eta row
    assert sm[25, 10]                 # sitter, uncovered, lower half
    assert not sm[25, 2]              # background column
    with pytest.raises(ValueError):
        shoulder_mask(pm, depth[:10])


def test_build_shoulder_plane_unprojects_cell_centers():
    cam = Camera.look_at(eye=(0, 0, -5.0), target=(0, 0, 0), width=64,
                         height=64, focal=2.0)
    plane = build_shoulder_plane(cam, 4, 6, depth=7.5)
    assert plane.anchors.shape == (4, 6, 3)
    assert plane.directions.shape == (4, 6, 3)
    assert np.allclose(np.linalg.norm(plane.directions, axis=2), 1.0,
                       atol=1e-6)
    # anchor of cell (r, c) reprojects to that cell's pixel center
    pix, z, _ = cam.project(plane.anchors.reshape(-1, 3))
    assert np.allclose(z, 7.5, atol=1e-9)
    cols = (np.arange(6)[None, :].repeat(4, 0).ravel() + 0.5) * 64 / 6
    rows = (np.arange(4)[:, None].repeat(6, 1).ravel() + 0.5) * 64 / 4
    assert np.allclose(pix[:, 0], cols, atol=1e-9)
    assert np.allclose(pix[:, 1], rows, atol=1e-9)


def test_mean_visible_depth():
    cam = Camera.look_at(eye=(0, 0, -5.0), target=(0, 0, 0), width=32,
                         height=32, focal=2.0)
    verts = np.array([[0.0, 0, 0], [0, 0, 1.0], [0, 0, -1.0]])
    d = mean_visible_depth(verts, cam, np.array([True, True, False]))
    assert np.isclose(d, 5.5)
    # no visible vertices: fall back to all of them
    d2 = mean_visible_depth(verts, cam, np.zeros(3, bool))
    assert np.isclose(d2, 5.0)


def test_downsample_mask_nearest():
    mask = np.zeros((8, 8), bool)
    mask[4:, :] = True
    small = downsample_mask(mask, 4, 4)
    assert small.shape == (4, 4)
    assert not small[:2].any() and small[2:].all()


def test_regress_shoulder_zero_conv_sits_on_plane():
    cam = Camera.look_at(eye=(0, 0, -5.0), target=(0, 0, 0), width=64,
                         height=64, focal=2.0)
    gh = gw = 6
    plane = build_shoulder_plane(cam, gh, gw, depth=8.0)
    conv = ShoulderConv(kernels=np.zeros((4 + 9, 3, 3, 3), np.float32),
                        bias=np.zeros(13, np.float32), c_feat=4)
    grid = np.random.default_rng(0).normal(size=(3, gh, gw)).astype(np.float32)
    mask = np.ones((64, 64), bool)
    out = regress_shoulder(grid, mask, cam, plane, conv)
    assert out.count == gh * gw
    assert np.all(out.region == SHOULDER_REGION)
    # zero ray offset: splats sit exactly on the plane anchors
    assert np.allclose(out.positions, plane.anchors.reshape(-1, 3),
                       atol=1e-6)
    pix, _, _ = cam.project(out.positions)
    cx = (np.tile(np.arange(gw), gh) + 0.5) * 64 / gw
    cy = (np.repeat(np.arange(gh), gw) + 0.5) * 64 / gh
    assert np.max(np.abs(pix[:, 0] - cx)) < 0.5
    assert np.max(np.abs(pix[:, 1] - cy)) < 0.5
    assert np.allclose(out.opacities, 0.5)
    # cell-footprint base scale with zero raw log-scale
    cell_world = 8.0 * 2.0 / (cam.focal * gw)
    assert np.allclose(out.scales, min(cell_world, 0.1), atol=1e-6)


def test_regress_shoulder_empty_and_seeded():
    cam = Camera.look_at(eye=(0, 0, -5.0), target=(0, 0, 0), width=32,
                         height=32, focal=2.0)
    plane = build_shoulder_plane(cam, 4, 4, depth=6.0)
    conv = ShoulderConv.seeded(in_channels=5, c_feat=4, seed=11)
    grid = np.random.default_rng(1).normal(size=(5, 4, 4)).astype(np.float32)
    empty = regress_shoulder(grid, np.zeros((32, 32), bool), cam, plane, conv)
    assert empty.count == 0 and empty.n_channels == 4

    half = np.zeros((32, 32), bool)
    half[16:] = True
    out = regress_shoulder(grid, half, cam, plane, conv)
    assert out.count == 8
    again = regress_shoulder(grid, half, cam, plane,
                             ShoulderConv.seeded(5, 4, seed=11))
    assert out.positions.tobytes() == again.positions.tobytes()
    with pytest.raises(ValueError):
        regress_shoulder(grid, half, cam, build_shoulder_plane(cam, 3, 4, 6.0),
                         conv)


def test_empty_set():
    e = empty_set(c_feat=7)
    assert e.count == 0 and e.n_channels == 7
    # combining with an empty shoulder is a no-op
    h = make_set(3, c=7)
    assert combine(h, e).count == 3


def test_gaussian_set_fuzz(rng):
    n = 10_000
    s = make_set(n, c=6, rng=rng)
    assert s.count == n
    assert s.positions.dtype == np.float32
    assert np.allclose(np.linalg.norm(s.rotations, axis=1), 1.0, atol=1e-5)
    assert np.all((s.opacities > 0) & (s.opacities < 1))
    assert np.all(s.scales > 0)
    s.assert_finite()
