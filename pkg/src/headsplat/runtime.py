"""Avatar runtime: build, re-pose, LOD selection, snapshots, drive streams.

A build runs the one-shot pipeline: backbone features, coarse-query
cross-attention at the base level, a canonical vertex offset block, the
subdivision chain with per-level feature MLPs and screen-space fusion,
attribute regression at every level, and the shoulder branch.  The result
is self-contained; re-posing recomputes only head splat centers (morph
with the cached offsets, skin, midpoint-propagate) and reuses every other
attribute array as-is.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
import time
import warnings
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Iterator, List, Optional, Sequence, Union

import numpy as np

from .assembly import (AttributeMlps, GaussianSet, ShoulderConv,
                       build_shoulder_plane, combine, mean_visible_depth,
                       portrait_mask, regress_head, regress_shoulder,
                       shoulder_mask, vertex_base_scale)
from .config import BackboneConfig, PipelineConfig
from .geometry import Camera, RigidTransform
from .losses import LossWeights
from .neural import (CrossAttention, FeatureBundle, Mlp, MlpSpec,
                     linear_projection, positional_encoding_table,
                     synthetic_backbone)
from .parametric import (ParametricHeadModel, PoseParams, make_synthetic_model,
                         morph, skin)
from .renderer import Refiner, RenderTarget, refine, render
from .seeding import (TAG_ATTENTION, TAG_BACKBONE, TAG_CHANNEL_PROJ,
                      TAG_LEVEL_MLP, TAG_MODEL, TAG_OFFSET_MLP, TAG_PE_TABLE,
                      derive_seed, seeded_rng)
from .subdivision import LodMesh, subdivide, subdivide_attrs
from .visibility import fuse, rasterize_depth, sample_local, visibility_mask

SNAPSHOT_MAGIC = b"OMGA1\x00"
SNAPSHOT_VERSION = 1


class PipelineError(RuntimeError):
    """A build stage failed; .stage names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class SnapshotError(ValueError):
    pass


class SnapshotFormatError(SnapshotError):
    pass


class SnapshotTruncatedError(SnapshotError):
    pass


class SnapshotCorruptError(SnapshotError):
    pass


class DriveFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# network parameters

@dataclass
class NetworkParams:
    """Every learned-shaped array of the pipeline, seeded deterministically."""

    pe_table: np.ndarray          # (V0, d) coarse query seeds
    local_proj: np.ndarray        # (C_local, d) screen-sample projection
    attention: CrossAttention
    offset_mlp: Mlp               # d -> 3 canonical vertex corrections
    level_mlps: List[Mlp]         # d -> d, one per subdivision step
    mlps: AttributeMlps
    shoulder_conv: ShoulderConv
    refiner: Refiner

    def shapes(self) -> dict:
        out = {
            "pe_table": tuple(self.pe_table.shape),
            "local_proj": tuple(self.local_proj.shape),
            "shoulder_conv": tuple(self.shoulder_conv.kernels.shape),
        }
        for i, blk in enumerate(self.attention.blocks):
            for k in ("wq", "wk", "wv", "wo"):
                out[f"attention{i}/{k}"] = tuple(blk[k].shape)
        out["offset_mlp"] = tuple(self.offset_mlp.spec.widths)
        for i, m in enumerate(self.level_mlps):
            out[f"level_mlp{i}"] = tuple(m.spec.widths)
        for name in ("feature", "opacity", "scale", "rotation"):
            out[f"mlp/{name}"] = tuple(getattr(self.mlps, name).spec.widths)
        return out


def build_network(config: PipelineConfig) -> NetworkParams:
    c_local = config.backbone.local_channels
    d = config.feature_dim
    h = config.phi_hidden
    return NetworkParams(
        pe_table=positional_encoding_table(
            config.base_vertices, d, derive_seed(config.seed, TAG_PE_TABLE)),
        local_proj=linear_projection(
            c_local, d, derive_seed(config.seed, TAG_CHANNEL_PROJ)),
        attention=CrossAttention(
            d, config.backbone.token_dim, layers=config.attn_layers,
            heads=config.attn_heads,
            seed=derive_seed(config.seed, TAG_ATTENTION)),
        offset_mlp=Mlp(MlpSpec(
            widths=(d, h, 3), activation="relu",
            seed=derive_seed(config.seed, TAG_OFFSET_MLP))),
        level_mlps=[
            Mlp(MlpSpec(widths=(d, h, d), activation="relu",
                        seed=derive_seed(config.seed, TAG_LEVEL_MLP, k)))
            for k in range(1, config.lod_levels + 1)],
        mlps=AttributeMlps.seeded(d, h, config.c_feat, config.seed),
        shoulder_conv=ShoulderConv.seeded(c_local, config.c_feat, config.seed),
        refiner=Refiner(in_channels=config.c_feat, seed=config.seed),
    )


def derived_shapes(config: PipelineConfig) -> dict:
    """Array shapes and scalars implied by a config, without touching weights."""
    bb = config.backbone
    return {
        "image": (config.render_height, config.render_width, 3),
        "pe_table": (config.base_vertices, config.feature_dim),
        "local_grid": (bb.local_channels, bb.local_size, bb.local_size),
        "tokens": (bb.n_tokens, bb.token_dim),
        "local_proj": (bb.local_channels, config.feature_dim),
        "attention": (config.attn_layers, config.attn_heads),
        "head_dim": config.feature_dim // config.attn_heads,
        "c_feat": config.c_feat,
        "loss_weights": (config.loss_l2, config.loss_ssim,
                         config.loss_perceptual, config.loss_offset),
    }


def config_loss_weights(config: PipelineConfig) -> LossWeights:
    return LossWeights(l2=config.loss_l2, ssim=config.loss_ssim,
                       perceptual=config.loss_perceptual,
                       offset=config.loss_offset)


# ---------------------------------------------------------------------------
# avatar containers

@dataclass
class LevelData:
    """Everything one LOD needs at runtime."""

    faces: np.ndarray         # (F, 3) uint32
    parent_edges: np.ndarray  # (P, 2) uint32, empty at level 0
    base_scale: np.ndarray    # (Nh,) float32
    splats: GaussianSet       # head splats first, shoulder appended
    head_count: int

    @property
    def count(self) -> int:
        return self.splats.count


@dataclass
class Avatar:
    config: PipelineConfig
    model: ParametricHeadModel
    camera: Camera
    beta: np.ndarray     # (n_beta,) float32
    theta0: np.ndarray   # build pose, float32
    psi0: np.ndarray     # build expression, float32
    offset: np.ndarray   # (V0, 3) float32 canonical vertex corrections
    pe_table: np.ndarray  # (V0, d) float32 cached query seeds
    mlps: AttributeMlps
    levels: List[LevelData]
    refiner: Optional[Refiner] = None
    network: Optional[NetworkParams] = None
    build_timings: Optional[dict] = None

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_counts(self) -> List[int]:
        return [lv.count for lv in self.levels]


def default_camera(config: PipelineConfig) -> Camera:
    """Frontal portrait framing: eye on -z looking at the origin."""
    return Camera.look_at(
        eye=(0.0, 0.0, -config.camera_distance), target=(0.0, 0.0, 0.0),
        width=config.render_width, height=config.render_height,
        focal=config.focal, near=config.near, far=config.far)


def topology_chain(faces: np.ndarray, n_vertices: int, lod_levels: int
                   ) -> List[LodMesh]:
    """Subdivided connectivity only; vertex positions stay zero."""
    base = LodMesh(level=0, vertices=np.zeros((n_vertices, 3)),
                   faces=np.asarray(faces, dtype=np.uint32),
                   attrs=np.zeros((n_vertices, 0), np.float32))
    chain = [base]
    for _ in range(lod_levels):
        chain.append(subdivide(chain[-1], k_max=lod_levels))
    return chain


def skinned_base_positions(model: ParametricHeadModel, beta, theta, psi,
                           offset: Optional[np.ndarray],
                           parent_edges_chain: Sequence[np.ndarray]
                           ) -> List[np.ndarray]:
    """Posed splat anchor positions for every LOD, float32.

    Level 0 is morph (with the canonical offsets) + skin; each later level
    appends the midpoints of its parent edges.  The float64 chain is
    rounded once per level, so equal inputs give bit-equal outputs no
    matter when this runs.
    """
    params = PoseParams(beta=np.asarray(beta, dtype=np.float64),
                        theta=np.asarray(theta, dtype=np.float64),
                        psi=np.asarray(psi, dtype=np.float64))
    t_p = morph(model, params, offset=offset)
    v = np.asarray(skin(model, t_p, params), dtype=np.float64)
    chain = [v]
    for pe in parent_edges_chain[1:]:
        prev = chain[-1]
        idx = pe.astype(np.int64)
        mid = 0.5 * (prev[idx[:, 0]] + prev[idx[:, 1]])
        chain.append(np.concatenate([prev, mid]))
    return [c.astype(np.float32) for c in chain]


# ---------------------------------------------------------------------------
# build

def build_avatar(image: np.ndarray,
                 config: Optional[PipelineConfig] = None,
                 model: Optional[ParametricHeadModel] = None,
                 camera: Optional[Camera] = None,
                 beta: Optional[np.ndarray] = None,
                 theta: Optional[np.ndarray] = None,
                 psi: Optional[np.ndarray] = None) -> Avatar:
    """Run the one-shot pipeline on a portrait image."""
    config = config or PipelineConfig()
    timings: dict = {}

    def stage(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except (PipelineError, KeyboardInterrupt):
            raise
        except Exception as e:
            raise PipelineError(name, str(e)) from e
        timings[name] = timings.get(name, 0.0) + (time.perf_counter() - t0)
        return out

    if model is None:
        model = stage("model", make_synthetic_model,
                      seed=derive_seed(config.seed, TAG_MODEL),
                      v_count=config.base_vertices)
    if model.n_vertices != config.base_vertices:
        raise PipelineError(
            "model", f"model has {model.n_vertices} vertices, config expects "
            f"{config.base_vertices}")
    camera = camera or default_camera(config)

    beta = np.zeros(model.n_shape, np.float32) if beta is None \
        else np.asarray(beta, dtype=np.float32)
    neutral = PoseParams.neutral(model)
    theta = neutral.theta.astype(np.float32) if theta is None \
        else np.asarray(theta, dtype=np.float32)
    psi = np.zeros(model.n_expr, np.float32) if psi is None \
        else np.asarray(psi, dtype=np.float32)

    bundle: FeatureBundle = stage(
        "backbone", synthetic_backbone, image, config.backbone,
        seed=derive_seed(config.seed, TAG_BACKBONE))
    net = stage("network", build_network, config)

    # coarse query path: attend once at the base level
    g0 = stage("queries", net.attention, net.pe_table, bundle.identity)

    def offset_block():
        raw = np.asarray(net.offset_mlp(g0), dtype=np.float64)
        return (config.offset_scale * np.tanh(raw)).astype(np.float32)

    offset = stage("offset", offset_block)

    chain = stage("geometry", topology_chain, model.faces, model.n_vertices,
                  config.lod_levels)
    bases = stage("geometry", skinned_base_positions, model, beta, theta, psi,
                  offset, [m.parent_edges for m in chain])

    def fused_levels():
        g = np.asarray(g0, dtype=np.float64)
        feats, depths, vises = [], [], []
        for k, mesh in enumerate(chain):
            if k > 0:
                g = subdivide_attrs(mesh, np.asarray(
                    net.level_mlps[k - 1](g), dtype=np.float64))
            verts = bases[k].astype(np.float64)
            depth_map = rasterize_depth(verts, mesh.faces, camera)
            vis = visibility_mask(verts, camera, depth_map,
                                  config.visibility_eps)
            samples, _ = sample_local(bundle.local, verts, camera)
            local_d = samples @ net.local_proj.astype(np.float64)
            feats.append(fuse(g, local_d, vis))
            depths.append(depth_map)
            vises.append(vis)
        return feats, depths, vises

    feats, depth_maps, vis_masks = stage("fusion", fused_levels)

    def regress_levels():
        heads = []
        for k, mesh in enumerate(chain):
            base_scale = vertex_base_scale(bases[k], mesh.faces)
            head = regress_head(feats[k], bases[k], base_scale, net.mlps,
                                s_min=config.s_min, s_max=config.s_max)
            heads.append((head, base_scale))
        return heads

    heads = stage("heads", regress_levels)

    def shoulder_branch():
        fine = len(chain) - 1
        mask = shoulder_mask(portrait_mask(image), depth_maps[fine],
                             config.shoulder_eta)
        depth = mean_visible_depth(bases[fine], camera, vis_masks[fine])
        s = config.backbone.local_size
        plane = build_shoulder_plane(camera, s, s, depth)
        return regress_shoulder(bundle.local, mask, camera, plane,
                                net.shoulder_conv,
                                s_min=config.s_min, s_max=config.s_max)

    shoulder = stage("shoulder", shoulder_branch)

    levels = [LevelData(faces=mesh.faces, parent_edges=mesh.parent_edges,
                        base_scale=bs, splats=combine(head, shoulder),
                        head_count=head.count)
              for mesh, (head, bs) in zip(chain, heads)]

    return Avatar(config=config, model=model, camera=camera, beta=beta,
                  theta0=theta, psi0=psi, offset=offset,
                  pe_table=net.pe_table, mlps=net.mlps, levels=levels,
                  refiner=net.refiner, network=net, build_timings=timings)


# ---------------------------------------------------------------------------
# re-posing

def reenact(avatar: Avatar, theta, psi, lod: int) -> GaussianSet:
    """Splats of one LOD re-posed for a driving pose/expression.

    Head centers are recomputed through the cached morph corrections;
    scales, rotations, opacities, features, regions and shoulder centers
    are the stored arrays, reused unchanged.
    """
    if not 0 <= lod < avatar.n_levels:
        raise ValueError(f"lod {lod} out of range 0..{avatar.n_levels - 1}")
    theta = np.asarray(theta, dtype=np.float32)
    psi = np.asarray(psi, dtype=np.float32)
    bases = skinned_base_positions(
        avatar.model, avatar.beta, theta, psi, avatar.offset,
        [lv.parent_edges for lv in avatar.levels[:lod + 1]])
    lv = avatar.levels[lod]
    s = lv.splats
    pos = np.concatenate([bases[lod], s.positions[lv.head_count:]])
    return GaussianSet(positions=pos, scales=s.scales, rotations=s.rotations,
                       opacities=s.opacities, features=s.features,
                       region=s.region)


def select_lod(avatar: Avatar, point_budget: Optional[int] = None,
               target_ms: Optional[float] = None,
               timings: Optional[dict] = None) -> int:
    """Pick the finest level that fits a budget.

    point_budget caps splat count; target_ms needs measured per-level frame
    times.  When nothing fits, warn and fall back to the coarsest level.
    """
    if point_budget is not None:
        fits = [k for k in range(avatar.n_levels)
                if avatar.levels[k].count <= point_budget]
        if fits:
            return max(fits)
        warnings.warn(f"no level fits point budget {point_budget}; "
                      "using level 0")
        return 0
    if target_ms is not None:
        if not timings:
            raise ValueError("target_ms selection requires per-level timings")
        fits = [k for k in timings
                if 0 <= k < avatar.n_levels and timings[k] <= target_ms]
        if fits:
            return max(fits)
        warnings.warn(f"no level meets {target_ms} ms; using level 0")
        return 0
    return avatar.n_levels - 1


def render_avatar_frame(avatar: Avatar, level: int,
                        gaussians: Optional[GaussianSet] = None,
                        camera: Optional[Camera] = None,
                        background: float = 0.0, threads: int = 1,
                        reference: bool = False,
                        refined: bool = False) -> RenderTarget:
    """Render one LOD; pass ``gaussians`` (e.g. from reenact) to override.

    The default path splats the RGB channels only.  With ``refined`` every
    feature channel is splatted and the refiner turns the stack into the
    output RGB.
    """
    if not 0 <= level < avatar.n_levels:
        raise ValueError(f"level {level} out of range 0..{avatar.n_levels - 1}")
    s = gaussians if gaussians is not None else avatar.levels[level].splats
    cam = camera or avatar.camera
    feats = s.features if refined else s.features[:, :3]
    target = render(s.positions, s.scales, s.rotations, s.opacities, feats,
                    cam, background=background, threads=threads,
                    reference=reference)
    if refined:
        refiner = avatar.refiner
        if refiner is None or refiner.in_channels != s.features.shape[1]:
            refiner = Refiner(in_channels=s.features.shape[1],
                              seed=avatar.config.seed)
        return RenderTarget(image=refine(target, refiner),
                            alpha=target.alpha, background=background)
    return target


# ---------------------------------------------------------------------------
# snapshots

_DTYPES = {"float32": np.float32, "uint32": np.uint32,
           "int32": np.int32, "uint8": np.uint8}


def _array_entries(avatar: Avatar) -> dict:
    m = avatar.model
    arrays = {
        "model/template": m.template, "model/shape_basis": m.shape_basis,
        "model/pose_basis": m.pose_basis, "model/expr_basis": m.expr_basis,
        "model/joint_rest": m.joint_rest, "model/joint_shape": m.joint_shape,
        "model/joint_parents": m.joint_parents,
        "model/skin_weights": m.skin_weights, "model/faces": m.faces,
        "cache/offset": avatar.offset, "cache/pe_table": avatar.pe_table,
    }
    for name, arr in avatar.mlps.weight_arrays().items():
        arrays[f"cache/mlp/{name}"] = arr
    if avatar.refiner is not None:
        for name, arr in avatar.refiner.weight_arrays().items():
            arrays[f"cache/refiner/{name}"] = arr
    for k, lv in enumerate(avatar.levels):
        p = f"level{k}/"
        arrays[p + "faces"] = lv.faces
        arrays[p + "parent_edges"] = lv.parent_edges
        arrays[p + "base_scale"] = lv.base_scale
        s = lv.splats
        arrays[p + "positions"] = s.positions
        arrays[p + "scales"] = s.scales
        arrays[p + "rotations"] = s.rotations
        arrays[p + "opacities"] = s.opacities
        arrays[p + "features"] = s.features
        arrays[p + "region"] = s.region
    return arrays


def save_avatar(avatar: Avatar, path) -> None:
    """Write the snapshot container; identical avatars produce identical files."""
    arrays = _array_entries(avatar)
    entries = []
    payload = io.BytesIO()
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if str(arr.dtype) not in _DTYPES:
            raise SnapshotFormatError(
                f"array {name} has unsupported dtype {arr.dtype}")
        buf = arr.tobytes()
        entries.append({
            "name": name, "dtype": str(arr.dtype),
            "shape": list(arr.shape), "offset": offset,
            "nbytes": len(buf), "crc32": zlib.crc32(buf) & 0xFFFFFFFF,
        })
        payload.write(buf)
        offset += len(buf)

    cam = avatar.camera
    manifest = {
        "format": "OMGA1", "version": SNAPSHOT_VERSION,
        "config": dataclasses.asdict(avatar.config),
        "camera": {
            "width": cam.width, "height": cam.height, "focal": cam.focal,
            "near": cam.near, "far": cam.far,
            "rotation": [float(x) for x in cam.pose.rotation],
            "translation": [float(x) for x in cam.pose.translation],
        },
        "beta": [float(x) for x in avatar.beta],
        "theta0": [float(x) for x in avatar.theta0],
        "psi0": [float(x) for x in avatar.psi0],
        "head_counts": [lv.head_count for lv in avatar.levels],
        "has_refiner": avatar.refiner is not None,
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        f.write(payload.getvalue())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise SnapshotTruncatedError(
            f"{what}: wanted {n} bytes, file had {len(b)}")
    return b


def load_avatar(path) -> Avatar:
    with open(path, "rb") as f:
        magic = f.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotFormatError(f"bad magic {magic!r}")
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8, "manifest length"))
        try:
            manifest = json.loads(_read_exact(f, mlen, "manifest"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise SnapshotFormatError(f"manifest is not valid JSON: {e}") from e
        payload = f.read()

    if manifest.get("format") != "OMGA1":
        raise SnapshotFormatError(f"unknown format {manifest.get('format')!r}")
    if manifest.get("version") != SNAPSHOT_VERSION:
        raise SnapshotFormatError(
            f"unsupported version {manifest.get('version')!r}")

    arrays = {}
    for e in manifest["arrays"]:
        if e["dtype"] not in _DTYPES:
            raise SnapshotFormatError(
                f"array {e['name']} has unsupported dtype {e['dtype']}")
        lo, n = e["offset"], e["nbytes"]
        if lo + n > len(payload):
            raise SnapshotTruncatedError(
                f"array {e['name']} extends past end of file")
        buf = payload[lo:lo + n]
        if (zlib.crc32(buf) & 0xFFFFFFFF) != e["crc32"]:
            raise SnapshotCorruptError(f"checksum mismatch in {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]) \
            .reshape(e["shape"]).copy()

    def need(name):
        if name not in arrays:
            raise SnapshotFormatError(f"missing array {name}")
        return arrays[name]

    cfg_d = dict(manifest["config"])
    cfg_d["backbone"] = BackboneConfig(**cfg_d["backbone"])
    config = PipelineConfig(**cfg_d)

    model = ParametricHeadModel(
        template=need("model/template"), shape_basis=need("model/shape_basis"),
        pose_basis=need("model/pose_basis"), expr_basis=need("model/expr_basis"),
        joint_rest=need("model/joint_rest"), joint_shape=need("model/joint_shape"),
        joint_parents=need("model/joint_parents"),
        skin_weights=need("model/skin_weights"), faces=need("model/faces"))
    model.validate()

    c = manifest["camera"]
    camera = Camera(width=c["width"], height=c["height"], focal=c["focal"],
                    near=c["near"], far=c["far"],
                    pose=RigidTransform(np.array(c["rotation"]),
                                        np.array(c["translation"])))

    mlp_arrays = {name[len("cache/mlp/"):]: arr
                  for name, arr in arrays.items()
                  if name.startswith("cache/mlp/")}
    mlps = AttributeMlps.from_weight_arrays(mlp_arrays)

    refiner = None
    if manifest.get("has_refiner"):
        refiner = Refiner(in_channels=config.c_feat, seed=config.seed,
                          zero_init=True)
        refiner.load_weight_arrays(
            {name[len("cache/refiner/"):]: arr
             for name, arr in arrays.items()
             if name.startswith("cache/refiner/")})

    head_counts = manifest["head_counts"]
    levels = []
    for k, hc in enumerate(head_counts):
        p = f"level{k}/"
        splats = GaussianSet(
            positions=need(p + "positions"), scales=need(p + "scales"),
            rotations=need(p + "rotations"), opacities=need(p + "opacities"),
            features=need(p + "features"), region=need(p + "region"))
        levels.append(LevelData(
            faces=need(p + "faces"), parent_edges=need(p + "parent_edges"),
            base_scale=need(p + "base_scale"),
            splats=splats, head_count=int(hc)))

    return Avatar(
        config=config, model=model, camera=camera,
        beta=np.array(manifest["beta"], dtype=np.float32),
        theta0=np.array(manifest["theta0"], dtype=np.float32),
        psi0=np.array(manifest["psi0"], dtype=np.float32),
        offset=need("cache/offset"), pe_table=need("cache/pe_table"),
        mlps=mlps, levels=levels, refiner=refiner, network=None)


# ---------------------------------------------------------------------------
# benchmark fixture

def make_synthetic_avatar(seed: int = 0,
                          config: Optional[PipelineConfig] = None,
                          v_count: Optional[int] = None) -> Avatar:
    """Avatar with converged-looking splat statistics, no neural stages.

    Opacities sit near 1 and scales track local vertex spacing, which is
    what a fitted head looks like; useful for throughput measurements and
    as a cheap fixture.  v_count overrides the config vertex count.
    """
    config = config or PipelineConfig()
    if v_count is not None and v_count != config.base_vertices:
        config = dataclasses.replace(config, base_vertices=v_count)
    model = make_synthetic_model(seed=derive_seed(config.seed, TAG_MODEL, 1),
                                 v_count=config.base_vertices)
    camera = default_camera(config)
    rng = seeded_rng(seed, 9001)

    neutral = PoseParams.neutral(model)
    beta = np.zeros(model.n_shape, np.float32)
    theta0 = neutral.theta.astype(np.float32)
    psi0 = np.zeros(model.n_expr, np.float32)
    offset = np.zeros((model.n_vertices, 3), np.float32)

    chain = topology_chain(model.faces, model.n_vertices, config.lod_levels)
    bases = skinned_base_positions(model, beta, theta0, psi0, offset,
                                   [m.parent_edges for m in chain])

    cf = config.c_feat
    levels = []
    for k, mesh in enumerate(chain):
        n = bases[k].shape[0]
        base_scale = vertex_base_scale(bases[k], mesh.faces)
        scales = np.repeat((0.6 * base_scale)[:, None], 3, axis=1) \
            .astype(np.float32)
        rots = np.zeros((n, 4), np.float32)
        rots[:, 0] = 1.0
        feats = np.zeros((n, cf), np.float32)
        feats[:, :3] = np.clip(0.35 + 0.5 * np.abs(
            np.sin(bases[k].astype(np.float64) * 3.1 + k)), 0, 1)
        opac = rng.uniform(0.92, 0.985, size=n).astype(np.float32)
        splats = GaussianSet(
            positions=bases[k].copy(), scales=scales, rotations=rots,
            opacities=opac, features=feats, region=np.zeros(n, np.uint8))
        levels.append(LevelData(
            faces=mesh.faces, parent_edges=mesh.parent_edges,
            base_scale=base_scale, splats=splats, head_count=n))
    return Avatar(config=config, model=model, camera=camera, beta=beta,
                  theta0=theta0, psi0=psi0, offset=offset,
                  pe_table=positional_encoding_table(
                      model.n_vertices, config.feature_dim,
                      derive_seed(config.seed, TAG_PE_TABLE)),
                  mlps=AttributeMlps.seeded(config.feature_dim,
                                            config.phi_hidden, cf,
                                            config.seed),
                  levels=levels, refiner=None, network=None)


# ---------------------------------------------------------------------------
# drive streams

@dataclass(frozen=True)
class DriveFrame:
    frame: int
    theta: np.ndarray
    psi: np.ndarray
    camera: Optional[dict] = None


def read_drive_stream(source: Union[str, "BinaryIO", io.TextIOBase]
                      ) -> Iterator[DriveFrame]:
    """Yield frames from a JSON-lines drive file.

    Each line is an object with "frame", "theta" and "psi", plus an
    optional "camera" override; blank lines are skipped.  Errors carry the
    1-based line number.
    """
    own = False
    if isinstance(source, str):
        fh = open(source, "r", encoding="utf-8")
        own = True
    else:
        fh = source
    try:
        for ln, line in enumerate(fh, start=1):
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DriveFormatError(f"line {ln}: invalid JSON: {e}") from e
            cam = obj.get("camera")
            if cam is not None and not isinstance(cam, dict):
                raise DriveFormatError(f"line {ln}: camera must be an object")
            try:
                yield DriveFrame(
                    frame=int(obj["frame"]),
                    theta=np.asarray(obj["theta"], dtype=np.float32),
                    psi=np.asarray(obj["psi"], dtype=np.float32),
                    camera=cam)
            except (KeyError, TypeError, ValueError) as e:
                raise DriveFormatError(f"line {ln}: {e}") from e
    finally:
        if own:
            fh.close()


def write_drive_stream(path, frames: Sequence[DriveFrame]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for fr in frames:
            obj = {
                "frame": fr.frame,
                "theta": [float(x) for x in fr.theta],
                "psi": [float(x) for x in fr.psi],
            }
            if fr.camera is not None:
                obj["camera"] = fr.camera
            f.write(json.dumps(obj) + "\n")
