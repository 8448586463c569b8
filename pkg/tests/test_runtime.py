import io
from pathlib import Path

import numpy as np
import pytest

from headsplat.config import PipelineConfig
from headsplat.parametric import make_synthetic_model
from headsplat.runtime import (DriveFormatError, DriveFrame, PipelineError,
                               SNAPSHOT_MAGIC, SnapshotCorruptError,
                               SnapshotFormatError, SnapshotTruncatedError,
                               build_avatar, build_network, default_camera,
                               load_avatar, make_synthetic_avatar,
                               read_drive_stream, reenact,
                               render_avatar_frame, save_avatar, select_lod,
                               skinned_base_positions, topology_chain,
                               write_drive_stream)
from headsplat.subdivision import unique_edges


def test_default_camera_framing():
    cfg = PipelineConfig()
    cam = default_camera(cfg)
    assert np.allclose(cam.center(), [0, 0, -cfg.camera_distance])
    pix, z, ok = cam.project(np.zeros(3))
    assert ok and np.isclose(z, cfg.camera_distance)
    assert np.allclose(pix, [cfg.render_width / 2, cfg.render_height / 2])


def test_topology_chain_counts():
    model = make_synthetic_model(seed=0, v_count=42)
    chain = topology_chain(model.faces, model.n_vertices, 2)
    assert [m.level for m in chain] == [0, 1, 2]
    for parent, child in zip(chain, chain[1:]):
        edges, _ = unique_edges(parent.faces.astype(np.int64))
        assert child.n_vertices == parent.n_vertices + len(edges)
        assert child.n_faces == 4 * parent.n_faces


def test_skinned_bases_prefix_nesting(avatar):
    theta = np.asarray(avatar.theta0) + 0.1
    bases = skinned_base_positions(
        avatar.model, avatar.beta, theta, avatar.psi0, avatar.offset,
        [lv.parent_edges for lv in avatar.levels])
    assert len(bases) == avatar.n_levels
    for a, b in zip(bases, bases[1:]):
        assert b.dtype == np.float32
        assert np.array_equal(b[:len(a)], a)


def test_build_report_structure(avatar):
    # every level adds exactly one midpoint per parent edge
    head_counts = [lv.head_count for lv in avatar.levels]
    for k, lv in enumerate(avatar.levels[:-1]):
        faces = lv.faces.astype(np.int64)
        edges, _ = unique_edges(faces)
        assert head_counts[k + 1] == head_counts[k] + len(edges)
    # one shared shoulder set across levels
    shoulder = [lv.count - lv.head_count for lv in avatar.levels]
    assert len(set(shoulder)) == 1 and shoulder[0] > 0
    assert set(avatar.build_timings) >= {
        "model", "backbone", "network", "queries", "offset", "geometry",
        "fusion", "heads", "shoulder"}
    assert all(t >= 0 for t in avatar.build_timings.values())


def test_build_rejects_bad_image():
    cfg = PipelineConfig()
    with pytest.raises(PipelineError) as err:
        build_avatar(np.zeros((4, 4)), cfg)
    assert err.value.stage == "backbone"


def test_reenact_contract(avatar):
    with pytest.raises(ValueError):
        reenact(avatar, avatar.theta0, avatar.psi0, avatar.n_levels)
    with pytest.raises(ValueError):
        reenact(avatar, avatar.theta0, avatar.psi0, -1)
    g = reenact(avatar, avatar.theta0, avatar.psi0, 1)
    s = avatar.levels[1].splats
    # non-position arrays are shared, not copied
    assert g.scales is s.scales
    assert g.features is s.features
    assert g.region is s.region
    assert np.array_equal(g.positions, s.positions)


def test_reenact_moves_head_keeps_shoulder(avatar):
    theta = np.asarray(avatar.theta0).copy()
    theta[3] += 0.25
    g = reenact(avatar, theta, avatar.psi0, 0)
    lv = avatar.levels[0]
    s = lv.splats
    head_moved = np.max(np.abs(g.positions[:lv.head_count]
                               - s.positions[:lv.head_count]))
    assert head_moved > 1e-4
    assert np.array_equal(g.positions[lv.head_count:],
                          s.positions[lv.head_count:])


def test_select_lod(avatar):
    counts = avatar.level_counts()
    assert select_lod(avatar) == avatar.n_levels - 1
    assert select_lod(avatar, point_budget=counts[-1]) == avatar.n_levels - 1
    assert select_lod(avatar, point_budget=counts[0]) == 0
    with pytest.warns(UserWarning):
        assert select_lod(avatar, point_budget=1) == 0
    assert select_lod(avatar, target_ms=50.0,
                      timings={0: 10.0, 1: 30.0, 2: 80.0}) == 1
    with pytest.warns(UserWarning):
        assert select_lod(avatar, target_ms=5.0,
                          timings={0: 10.0, 1: 30.0, 2: 80.0}) == 0
    with pytest.raises(ValueError):
        select_lod(avatar, target_ms=5.0)


def test_render_refined_zero_refiner_identity(avatar):
    coarse = render_avatar_frame(avatar, 0)
    refined = render_avatar_frame(avatar, 0, refined=True)
    assert refined.image.shape == coarse.image.shape[:2] + (3,)
    assert refined.image.tobytes() == coarse.image.tobytes()


def test_render_level_range(avatar):
    with pytest.raises(ValueError):
        render_avatar_frame(avatar, avatar.n_levels)


def test_snapshot_round_trip(avatar, snapshot_path, tmp_path):
    snapshot_path = Path(snapshot_path)
    back = load_avatar(snapshot_path)
    assert back.level_counts() == avatar.level_counts()
    rng = np.random.default_rng(8)
    theta = np.asarray(avatar.theta0) + rng.normal(scale=0.1,
                                                   size=len(avatar.theta0))
    for k in range(avatar.n_levels):
        a = reenact(avatar, theta, avatar.psi0, k)
        b = reenact(back, theta, avatar.psi0, k)
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.features.tobytes() == b.features.tobytes()
    # resave is byte-identical
    again = tmp_path / "again.bin"
    save_avatar(back, again)
    assert again.read_bytes() == snapshot_path.read_bytes()


def test_snapshot_error_taxonomy(snapshot_path, tmp_path):
    raw = Path(snapshot_path).read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(SnapshotFormatError):
        load_avatar(bad_magic)

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(SnapshotTruncatedError):
        load_avatar(truncated)

    # flip one payload byte near the end: CRC must catch it
    flipped = bytearray(raw)
    flipped[-100] ^= 0xFF
    corrupt = tmp_path / "crc.bin"
    corrupt.write_bytes(bytes(flipped))
    with pytest.raises(SnapshotCorruptError):
        load_avatar(corrupt)

    assert raw[:len(SNAPSHOT_MAGIC)] == SNAPSHOT_MAGIC
    # rewrite the manifest with a future version, keeping the length honest
    import json as _json
    import struct as _struct
    hdr = len(SNAPSHOT_MAGIC)
    (mlen,) = _struct.unpack("<Q", raw[hdr:hdr + 8])
    manifest = _json.loads(raw[hdr + 8:hdr + 8 + mlen])
    manifest["version"] = 99
    mb = _json.dumps(manifest, sort_keys=True,
                     separators=(",", ":")).encode()
    vpath = tmp_path / "version.bin"
    vpath.write_bytes(raw[:hdr] + _struct.pack("<Q", len(mb)) + mb
                      + raw[hdr + 8 + mlen:])
    with pytest.raises(SnapshotFormatError):
        load_avatar(vpath)

    # garbage manifest length must fail typed, not with a decode error
    glen = bytearray(raw)
    glen[hdr] ^= 0x41
    gpath = tmp_path / "length.bin"
    gpath.write_bytes(bytes(glen))
    with pytest.raises((SnapshotFormatError, SnapshotTruncatedError)):
        load_avatar(gpath)


def test_synthetic_avatar_determinism():
    a = make_synthetic_avatar(seed=4, v_count=162)
    b = make_synthetic_avatar(seed=4, v_count=162)
    for k in range(a.n_levels):
        assert (a.levels[k].splats.positions.tobytes()
                == b.levels[k].splats.positions.tobytes())
        assert (a.levels[k].splats.features.tobytes()
                == b.levels[k].splats.features.tobytes())
    # the seed steers attribute noise; geometry comes from the config seed
    c = make_synthetic_avatar(seed=5, v_count=162)
    assert (a.levels[0].splats.opacities.tobytes()
            != c.levels[0].splats.opacities.tobytes())


def test_build_network_shapes():
    cfg = PipelineConfig()
    net = build_network(cfg)
    shapes = net.shapes()
    assert shapes["pe_table"] == (cfg.base_vertices, cfg.feature_dim)
    assert len(net.level_mlps) == cfg.lod_levels
    for mlp in net.level_mlps:
        assert mlp.in_dim == cfg.feature_dim
        assert mlp.out_dim == cfg.feature_dim
    assert net.offset_mlp.out_dim == 3


def test_drive_stream_round_trip(tmp_path):
    frames = [
        DriveFrame(frame=0, theta=np.zeros(18).tolist(),
                   psi=np.zeros(10).tolist()),
        DriveFrame(frame=1, theta=(np.arange(18) * 0.01).tolist(),
                   psi=(np.arange(10) * 0.1).tolist(),
                   camera={"eye": [0.0, 0.0, -18.0]}),
    ]
    path = tmp_path / "drive.ndjson"
    write_drive_stream(path, frames)
    back = list(read_drive_stream(str(path)))
    assert len(back) == 2
    assert back[0].camera is None
    assert back[1].camera == {"eye": [0.0, 0.0, -18.0]}
    assert np.allclose(back[1].theta, frames[1].theta)


def test_drive_stream_line_errors():
    good = '{"frame": 0, "theta": [0.0], "psi": [0.0]}'
    with pytest.raises(DriveFormatError) as err:
        list(read_drive_stream(io.StringIO(good + "\nnot json\n")))
    assert "line 2" in str(err.value)
    with pytest.raises(DriveFormatError):
        list(read_drive_stream(io.StringIO('{"frame": 0, "psi": [0.0]}')))
    with pytest.raises(DriveFormatError):
        list(read_drive_stream(io.StringIO(
            '{"frame": 0, "theta": [0.0], "psi": [0.0], "camera": 5}')))


def test_pipeline_error_carries_stage():
    e = PipelineError("fusion", "boom")
    assert e.stage == "fusion"
    assert "fusion" in str(e)
