"""Multi-resolution splat head avatars from a single portrait image.

One build pass turns an image into a layered set of Gaussian splats tied
to a parametric head mesh; re-posing moves the splat centers through the
morph and skinning chain while every appearance attribute stays frozen.
A tile-based software rasterizer (with a brute-force twin for checking)
renders any level of the hierarchy.
"""

from .assembly import GaussianSet, combine, regress_head, regress_shoulder
from .config import BackboneConfig, PipelineConfig
from .geometry import Camera, FrustumError, RigidTransform
from .losses import (LossWeights, attention_cost, curriculum_probs,
                     curriculum_sample, grad_check, psnr, ssim, total_loss)
from .parametric import (ParametricHeadModel, PoseParams, load_model,
                         make_synthetic_model, morph, save_model, skin)
from .renderer import Refiner, RenderTarget, refine, render
from .runtime import (Avatar, DriveFrame, build_avatar, load_avatar,
                      make_synthetic_avatar, read_drive_stream, reenact,
                      render_avatar_frame, save_avatar, select_lod,
                      write_drive_stream)
from .subdivision import LodMesh, subdivide, subdivide_attrs, unique_edges
from .visibility import fuse, fused_features, rasterize_depth, visibility_mask

__version__ = "0.1.0"

__all__ = [
    "Avatar", "BackboneConfig", "Camera", "DriveFrame", "FrustumError",
    "GaussianSet", "LodMesh", "LossWeights", "ParametricHeadModel",
    "PipelineConfig", "PoseParams", "Refiner", "RenderTarget",
    "RigidTransform", "attention_cost", "build_avatar", "combine",
    "curriculum_probs", "curriculum_sample", "fuse", "fused_features",
    "grad_check", "load_avatar", "load_model", "make_synthetic_avatar",
    "make_synthetic_model", "morph", "psnr", "rasterize_depth",
    "read_drive_stream", "reenact", "refine", "regress_head",
    "regress_shoulder", "render", "render_avatar_frame", "save_avatar",
    "save_model", "select_lod", "skin", "ssim", "subdivide",
    "subdivide_attrs", "total_loss", "unique_edges", "visibility_mask",
    "write_drive_stream",
]
