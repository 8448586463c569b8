"""Command-line surface: build avatars, render drive streams, bench, verify.

Exit codes: 0 success, 1 failed checks or pipeline failure, 2 I/O or usage
errors.  OMG_THREADS overrides --threads when set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import losses
from .config import PipelineConfig
from .geometry import Camera
from .images import read_ppm, synthetic_portrait, write_ppm
from .parametric import ModelFormatError, geodesic_sphere, load_model
from .renderer import Refiner, refine, render
from .runtime import (DriveFormatError, DriveFrame, PipelineError,
                      SnapshotError, build_avatar, load_avatar,
                      read_drive_stream, reenact, render_avatar_frame,
                      save_avatar)
from .visibility import default_eps, rasterize_depth, visibility_mask

BENCH_FRAMES = 100
# throughput of the reference GPU implementation, shown for context only
REFERENCE_FPS = {2: 126.44, 1: 148.04, 0: 152.57}


def _threads(args) -> int:
    env = os.environ.get("OMG_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"headsplat: bad OMG_THREADS value {env!r}")
    return max(1, args.threads)


def _fail_io(msg: str) -> int:
    print(f"headsplat: {msg}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# build

def cmd_build(args) -> int:
    t_start = time.perf_counter()
    config = PipelineConfig(seed=args.seed)

    model = None
    if args.model:
        if not os.path.isdir(args.model):
            return _fail_io(f"model directory not found: {args.model}")
        try:
            model = load_model(args.model)
        except (ModelFormatError, OSError) as e:
            return _fail_io(f"cannot load model: {e}")

    if args.image:
        if not os.path.isfile(args.image):
            return _fail_io(f"image not found: {args.image}")
        try:
            image = read_ppm(args.image)
        except (ValueError, OSError) as e:
            return _fail_io(f"cannot read image: {e}")
    else:
        image = synthetic_portrait(seed=args.seed,
                                   height=config.render_height,
                                   width=config.render_width)

    try:
        avatar = build_avatar(image, config=config, model=model)
        save_avatar(avatar, args.snapshot)
    except PipelineError as e:
        print(f"headsplat build: stage '{e.stage}' failed: {e}",
              file=sys.stderr)
        return 1
    except OSError as e:
        return _fail_io(f"cannot write snapshot: {e}")

    report = {
        "snapshot": args.snapshot,
        "seed": args.seed,
        "levels": [
            {"lod": k, "points": lv.count, "head_points": lv.head_count,
             "shoulder_points": lv.count - lv.head_count}
            for k, lv in enumerate(avatar.levels)],
        "stage_seconds": {k: round(v, 6)
                          for k, v in (avatar.build_timings or {}).items()},
        "wall_clock_seconds": round(time.perf_counter() - t_start, 6),
    }
    print(json.dumps(report, indent=2))
    return 0


# ---------------------------------------------------------------------------
# render

def _drive_camera(base: Camera, d: dict) -> Camera:
    if "eye" not in d:
        raise DriveFormatError("camera override needs an 'eye' position")
    return Camera.look_at(
        eye=np.asarray(d["eye"], dtype=np.float64),
        target=np.asarray(d.get("target", (0.0, 0.0, 0.0)), dtype=np.float64),
        up=np.asarray(d.get("up", (0.0, 1.0, 0.0)), dtype=np.float64),
        width=base.width, height=base.height,
        focal=float(d.get("focal", base.focal)),
        near=base.near, far=base.far)


def _write_raw_planes(path_base: str, planes: dict) -> None:
    """Write named arrays next to a JSON header describing them."""
    header = {}
    for name, arr in planes.items():
        arr = np.ascontiguousarray(arr)
        fname = f"{path_base}.{name}.{'f32' if arr.dtype == np.float32 else 'u8'}"
        with open(fname, "wb") as f:
            f.write(arr.tobytes())
        header[name] = {"file": os.path.basename(fname),
                        "dtype": str(arr.dtype), "shape": list(arr.shape)}
    with open(f"{path_base}.json", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)


def cmd_render(args) -> int:
    if not os.path.isfile(args.snapshot):
        return _fail_io(f"snapshot not found: {args.snapshot}")
    try:
        avatar = load_avatar(args.snapshot)
    except SnapshotError as e:
        return _fail_io(f"cannot load snapshot: {e}")

    lod = args.lod if args.lod is not None else avatar.n_levels - 1
    if not 0 <= lod < avatar.n_levels:
        return _fail_io(
            f"--lod {lod} out of range 0..{avatar.n_levels - 1}")
    threads = _threads(args)

    if args.drive:
        if not os.path.isfile(args.drive):
            return _fail_io(f"drive stream not found: {args.drive}")
        frames = read_drive_stream(args.drive)
    else:
        frames = iter([DriveFrame(frame=0, theta=avatar.theta0,
                                  psi=avatar.psi0)])

    os.makedirs(args.out, exist_ok=True)
    written: List[str] = []
    try:
        for fr in frames:
            gaussians = reenact(avatar, fr.theta, fr.psi, lod)
            camera = avatar.camera if fr.camera is None \
                else _drive_camera(avatar.camera, fr.camera)
            target = render(
                gaussians.positions, gaussians.scales, gaussians.rotations,
                gaussians.opacities, gaussians.features, camera,
                threads=threads, reference=args.reference_raster)
            refiner = avatar.refiner
            if refiner is None or refiner.in_channels != gaussians.n_channels:
                refiner = Refiner(in_channels=gaussians.n_channels,
                                  seed=avatar.config.seed)
            rgb = refine(target, refiner)

            base = os.path.join(args.out, f"frame_{fr.frame:06d}")
            write_ppm(f"{base}.ppm", rgb)
            written.append(f"{base}.ppm")
            if args.dump_channels:
                _write_raw_planes(base + ".channels", {
                    "channels": target.image.astype(np.float32),
                    "alpha": target.alpha.astype(np.float32),
                })
            if args.dump_visibility:
                hc = avatar.levels[lod].head_count
                verts = gaussians.positions[:hc].astype(np.float64)
                depth = rasterize_depth(verts, avatar.levels[lod].faces,
                                        camera)
                vis = visibility_mask(verts, camera, depth,
                                      avatar.config.visibility_eps)
                _write_raw_planes(base + ".visibility", {
                    "depth": depth.astype(np.float32),
                    "coverage": np.isfinite(depth).astype(np.uint8),
                    "vertex_visible": vis.astype(np.uint8),
                })
    except DriveFormatError as e:
        return _fail_io(f"bad drive stream: {e}")
    except ValueError as e:
        return _fail_io(f"cannot render frame: {e}")
    except OSError as e:
        return _fail_io(f"cannot write frame: {e}")

    print(json.dumps({"frames": len(written), "lod": lod,
                      "out": args.out}))
    return 0


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args) -> int:
    if not os.path.isfile(args.snapshot):
        return _fail_io(f"snapshot not found: {args.snapshot}")
    try:
        avatar = load_avatar(args.snapshot)
    except SnapshotError as e:
        return _fail_io(f"cannot load snapshot: {e}")
    threads = _threads(args)

    rows = []
    for k in range(avatar.n_levels):
        # warm up kernels and caches outside the timed region
        render_avatar_frame(avatar, k, threads=threads)
        t0 = time.perf_counter()
        for _ in range(args.frames):
            render_avatar_frame(avatar, k, threads=threads)
        dt = time.perf_counter() - t0
        mean_ms = 1000.0 * dt / args.frames
        rows.append({"lod": k, "points": avatar.levels[k].count,
                     "mean_ms": round(mean_ms, 3),
                     "fps": round(1000.0 / mean_ms, 3)})

    print(f"{'lod':>4} {'points':>8} {'mean ms':>9} {'fps':>8}")
    for r in rows:
        print(f"{r['lod']:>4} {r['points']:>8} {r['mean_ms']:>9.3f} "
              f"{r['fps']:>8.3f}")
    ref = "/".join(f"{REFERENCE_FPS[k]:.2f}" for k in sorted(REFERENCE_FPS,
                                                             reverse=True))
    print(f"context row (display only): Sub#2/#1/#0 = {ref} fps on an "
          f"RTX 4090 class GPU implementation")
    print(json.dumps({
        "frames": args.frames, "threads": threads, "rows": rows,
        "reference_fps_context": {str(k): v for k, v in REFERENCE_FPS.items()},
    }))
    return 0


# ---------------------------------------------------------------------------
# verify

def _check_subdivision() -> dict:
    from .subdivision import LodMesh, euler_characteristic, subdivide
    tetra = LodMesh(
        level=0,
        vertices=np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]],
                          dtype=np.float64),
        faces=np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
                       dtype=np.uint32),
        attrs=np.zeros((4, 0), np.float32))
    s = subdivide(tetra, k_max=1)
    ok = (s.n_vertices == 10 and s.n_faces == 16
          and euler_characteristic(s.n_vertices, s.faces) == 2)
    return {"name": "subdivision_counts", "passed": bool(ok),
            "vertices": int(s.n_vertices), "faces": int(s.n_faces)}


def _ray_occluded(verts: np.ndarray, faces: np.ndarray, eye: np.ndarray
                  ) -> np.ndarray:
    """True where some triangle cuts the eye-to-vertex segment short."""
    v0 = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - v0
    e2 = verts[faces[:, 2]] - v0
    occ = np.zeros(len(verts), bool)
    for i, d in enumerate(verts - eye):
        p = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, p)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        t0 = eye - v0
        u = np.einsum("ij,ij->i", t0, p) * inv
        q = np.cross(t0, e1)
        w = np.einsum("j,ij->i", d, q) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        occ[i] = np.any(ok & (u >= -1e-9) & (w >= -1e-9)
                        & (u + w <= 1 + 1e-9) & (t > 1e-6) & (t < 1 - 1e-6))
    return occ


def _check_visibility(eps: Optional[float]) -> dict:
    verts, faces = geodesic_sphere(8)  # 642 vertices
    eye = np.array([0.0, 0.0, -3.0])
    cam = Camera.look_at(eye=eye, target=(0.0, 0.0, 0.0),
                         width=256, height=256, focal=1.2, near=0.1, far=50.0)
    depth = rasterize_depth(verts, faces, cam)
    got = visibility_mask(verts, cam, depth, eps)
    _, _, in_frame = cam.project(verts)
    want = in_frame & ~_ray_occluded(verts, faces, eye)
    agree = float(np.mean(got == want))
    ok = agree >= 0.99
    return {"name": "visibility_oracle", "passed": bool(ok),
            "agreement": agree,
            "false_visible": int(np.sum(got & ~want)),
            "false_invisible": int(np.sum(~got & want)),
            "eps": default_eps(cam) if eps is None else eps}


def _check_fusion() -> dict:
    from .visibility import fuse
    rng = np.random.default_rng(7)
    base = rng.normal(size=(64, 8))
    local = rng.normal(size=(64, 8))
    m0 = np.zeros(64, bool)
    m1 = np.ones(64, bool)
    ok = (np.array_equal(fuse(base, local, m0), base)
          and np.array_equal(fuse(base, local, m1), base + local))
    return {"name": "fusion_identities", "passed": bool(ok)}


def _check_raster(threads: int) -> dict:
    rng = np.random.default_rng(11)
    n = 60
    cam = Camera.look_at(eye=(0.0, 0.0, -6.0), target=(0.0, 0.0, 0.0),
                         width=96, height=96, focal=3.0, near=0.1, far=50.0)
    pos = rng.uniform(-0.8, 0.8, size=(n, 3))
    scales = rng.uniform(0.03, 0.12, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(0.2, 0.95, size=n)
    feats = rng.uniform(0, 1, size=(n, 3))
    a = render(pos, scales, quats, opac, feats, cam, threads=threads)
    b = render(pos, scales, quats, opac, feats, cam, reference=True)
    err = float(np.max(np.abs(a.image.astype(np.float64)
                              - b.image.astype(np.float64))))
    # one splat aimed exactly at a pixel center: its alpha there is its opacity
    h, w = cam.height // 2, cam.width // 2
    pos_c = cam.unproject(np.array([[w + 0.5, h + 0.5]]), np.array([6.0]))
    center = render(pos_c, np.full((1, 3), 0.3),
                    np.array([[1.0, 0.0, 0.0, 0.0]]), np.array([0.7]),
                    np.ones((1, 3)), cam)
    alpha_err = float(abs(center.alpha[h, w] - 0.7))
    ok = err <= 1e-5 and alpha_err <= 1e-4
    return {"name": "rasterizer_agreement", "passed": bool(ok),
            "max_error": err, "center_alpha_error": alpha_err}


def _check_losses() -> dict:
    rng = np.random.default_rng(3)
    img = rng.uniform(0.2, 0.8, size=(24, 24, 3))
    total, terms = losses.total_loss(img, img, img, np.zeros((10, 3)))
    const_a = np.zeros((16, 16))
    const_b = np.ones((16, 16))
    want = losses.SSIM_C1 / (1.0 + losses.SSIM_C1)
    ssim_err = abs(losses.ssim(const_a, const_b) - want)
    x0 = rng.uniform(0.3, 0.7, size=(12, 12))
    tgt = rng.uniform(0.3, 0.7, size=(12, 12))
    l2_err = losses.grad_check(
        lambda x: losses.l2_loss_and_grad(x, tgt)[0],
        lambda x: losses.l2_loss_and_grad(x, tgt)[1], x0)
    s_err = losses.grad_check(
        lambda x: losses.ssim_and_grad(x, tgt)[0],
        lambda x: losses.ssim_and_grad(x, tgt)[1], x0)
    ok = (total == 0.0 and ssim_err <= 1e-9 and l2_err < 1e-3
          and s_err < 1e-2)
    return {"name": "loss_stack", "passed": bool(ok),
            "zero_total": total, "ssim_const_error": float(ssim_err),
            "grad_errors": {"l2": float(l2_err), "ssim": float(s_err)},
            "terms": {k: float(v) for k, v in terms.items()}}


def _check_cost_model() -> dict:
    ratio = losses.DENSE_BASELINE_COST / losses.COARSE_QUERY_COST
    ok = ratio == 640.0
    return {"name": "attention_cost_ratio", "passed": bool(ok),
            "cost_ratio": ratio}


def _check_curriculum() -> dict:
    probs = losses.curriculum_probs(0.9)
    ok = (losses.curriculum_probs(0.05) == {0: 1.0, 1: 0.0, 2: 0.0}
          and losses.curriculum_probs(0.2) == {0: 0.0, 1: 1.0, 2: 0.0}
          and probs == {0: 0.1, 1: 0.2, 2: 0.7})
    return {"name": "curriculum_schedule", "passed": bool(ok),
            "late_mix": {str(k): v for k, v in probs.items()}}


def cmd_verify(args) -> int:
    threads = _threads(args)
    checks = [
        _check_subdivision(),
        _check_visibility(args.visibility_eps),
        _check_fusion(),
        _check_raster(threads),
        _check_losses(),
        _check_cost_model(),
        _check_curriculum(),
    ]
    passed = all(c["passed"] for c in checks)
    for c in checks:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}")
    print(json.dumps({"passed": passed, "checks": checks}, default=float))
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# argument surface

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="headsplat",
        description="Multi-resolution splat avatar pipeline")
    sub = p.add_subparsers(dest="subcommand", required=True)

    b = sub.add_parser("build", help="build an avatar snapshot from an image")
    b.add_argument("--image", help="input portrait (PPM P6); synthetic "
                   "when omitted")
    b.add_argument("--model", help="head model directory")
    b.add_argument("--snapshot", default="avatar.omga",
                   help="output snapshot path")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_build)

    r = sub.add_parser("render", help="render frames from a snapshot")
    r.add_argument("--snapshot", required=True)
    r.add_argument("--drive", help="JSON-lines drive stream; one frame per "
                   "record (build pose when omitted)")
    r.add_argument("--lod", type=int, default=None,
                   help="level of detail (default: finest)")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--reference-raster", action="store_true",
                   help="use the brute-force per-splat rasterizer")
    r.add_argument("--dump-visibility", action="store_true",
                   help="write depth/coverage planes next to each frame")
    r.add_argument("--dump-channels", action="store_true",
                   help="write the raw multi-channel render as f32 planes")
    r.set_defaults(fn=cmd_render)

    be = sub.add_parser("bench", help="frame-rate table per LOD")
    be.add_argument("--snapshot", required=True)
    be.add_argument("--frames", type=int, default=BENCH_FRAMES)
    be.add_argument("--threads", type=int, default=1)
    be.set_defaults(fn=cmd_bench)

    v = sub.add_parser("verify", help="run the self-check suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--threads", type=int, default=1)
    v.add_argument("--visibility-eps", type=float, default=None,
                   help="override the depth-test tolerance (diagnostic)")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 2


if __name__ == "__main__":
    sys.exit(main())
