"""Pipeline configuration.

Desk-scale defaults keep every stage runnable on a CPU in seconds; the
full-scale constructors only record the production dimensions so shape
contracts can be asserted without allocating the matching weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class BackboneConfig:
    """Synthetic feature extractor layout."""

    patch_grid: int = 10          # image is pooled into patch_grid^2 patches
    local_channels: int = 32      # C of the local feature map
    local_size: int = 37          # local map is (C, local_size, local_size)
    token_dim: int = 64           # identity token width D

    @property
    def n_tokens(self) -> int:
        return self.patch_grid * self.patch_grid

    @staticmethod
    def full_scale() -> "BackboneConfig":
        return BackboneConfig(patch_grid=37, local_channels=256,
                              local_size=296, token_dim=768)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    lod_levels: int = 2           # K: subdivision chain 0..K
    base_vertices: int = 642      # V0 of the synthetic model
    feature_dim: int = 64         # per-vertex feature width d
    c_feat: int = 32              # splat feature channels, first 3 are RGB
    attn_layers: int = 2
    attn_heads: int = 8
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    render_width: int = 256
    render_height: int = 256
    focal: float = 12.0
    camera_distance: float = 20.0
    near: float = 1.0
    far: float = 100.0
    visibility_eps: float | None = None   # None -> 1e-3 * (far - near)
    s_min: float = 1e-4
    s_max: float = 0.1
    shoulder_eta: float = 0.5
    offset_scale: float = 0.05
    phi_hidden: int = 64          # hidden width of the attribute heads
    loss_l2: float = 10.0
    loss_ssim: float = 1.0
    loss_perceptual: float = 0.1
    loss_offset: float = 0.1

    @staticmethod
    def full_scale() -> "PipelineConfig":
        """Production dimensions (recorded, never allocated at desk scale)."""
        return PipelineConfig(
            lod_levels=2, base_vertices=5023, feature_dim=256,
            attn_layers=2, attn_heads=8,
            backbone=BackboneConfig.full_scale(),
            render_width=512, render_height=512)
