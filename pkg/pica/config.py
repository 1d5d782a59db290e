import json
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator


LATENT_SIZE = 8


class Variant(str, Enum):
    """pixel-feature variants of the per-pixel decoder, plus a texture-space baseline"""
    FULL = "full"
    NO_UV = "no-uv"
    UV_NOPE = "uv-nope"
    NERF_PE = "nerf-pe"
    PE_2D = "2d-pe"
    PE_1D = "1d-pe"
    COARSE = "coarse"
    BASELINE = "baseline"


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class TexturePattern(BaseModel):
    """procedural skin texture: base tone, checker, hair stripes and an expression blotch"""
    base_color: Tuple[float, float, float] = (0.78, 0.58, 0.47)
    checker_cells: int = 8
    checker_contrast: float = 0.12
    stripe_frequency: float = 40.0
    stripe_band: Tuple[float, float] = (0.0, 0.22)
    blotch_center: Tuple[float, float] = (0.28, 0.55)
    blotch_radius: float = 0.09

    @field_validator("checker_cells")
    @classmethod
    def validate_cells(cls, v):
        if v < 1:
            raise ValueError("checker_cells must be >= 1")
        return v


class SceneConfig(BaseModel):
    seed: int = 0
    n_frames: int = 64
    n_cameras: int = 8
    image_size: int = 128
    focal_factor: float = 1.6
    camera_distance: float = 500.0
    yaw_range_deg: float = 30.0
    pitch_range_deg: float = 20.0
    surface_grid: int = 127
    coarse_grid: int = 17
    posmap_resolution: int = 64
    expression_dim: int = 8
    texture: TexturePattern = Field(default_factory=TexturePattern)
    detail_center: Tuple[float, float] = (0.5, 0.72)
    detail_radius: float = 0.12
    holdout_every: int = 10
    holdout_cameras: Optional[List[int]] = None
    depth_fraction: float = 1.0
    background: float = 0.0

    @field_validator("n_frames", "n_cameras")
    @classmethod
    def validate_counts(cls, v):
        if v < 1:
            raise ValueError("frame and camera counts must be >= 1")
        return v

    @field_validator("image_size")
    @classmethod
    def validate_image_size(cls, v):
        if v < 8:
            raise ValueError("image_size must be >= 8")
        return v

    @field_validator("posmap_resolution")
    @classmethod
    def validate_posmap(cls, v):
        if not _is_power_of_two(v) or v < 2 * LATENT_SIZE:
            raise ValueError(f"posmap_resolution must be a power of two >= {2 * LATENT_SIZE}, got {v}")
        return v

    @field_validator("surface_grid", "coarse_grid")
    @classmethod
    def validate_grid(cls, v):
        if v < 2:
            raise ValueError("grid resolution must be >= 2")
        return v

    @field_validator("depth_fraction")
    @classmethod
    def validate_fraction(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("depth_fraction must lie in [0, 1]")
        return v

    @field_validator("detail_radius")
    @classmethod
    def validate_radius(cls, v):
        if not 0.0 < v < 0.5:
            raise ValueError("detail_radius must lie in (0, 0.5)")
        return v

    @model_validator(mode="after")
    def validate_holdout(self):
        if self.holdout_cameras is None:
            self.holdout_cameras = [self.n_cameras - 1] if self.n_cameras > 1 else []
        for c in self.holdout_cameras:
            if not 0 <= c < self.n_cameras:
                raise ValueError(f"holdout camera {c} out of range for {self.n_cameras} cameras")
        if len(self.holdout_cameras) >= self.n_cameras:
            raise ValueError("at least one camera must remain for training")
        return self

    @property
    def texture_resolution(self) -> int:
        return 4 * self.posmap_resolution

    @property
    def uv_margin(self) -> float:
        return 0.5 / self.posmap_resolution

    def train_cameras(self) -> List[int]:
        return [c for c in range(self.n_cameras) if c not in self.holdout_cameras]

    def is_test_frame(self, frame: int) -> bool:
        return self.holdout_every > 0 and frame % self.holdout_every == self.holdout_every - 1


class ModelConfig(BaseModel):
    posmap_resolution: int = 64
    latent_channels: int = 4
    tex_head_channels: Tuple[int, int] = (16, 16)
    geom_head_channels: int = 16
    encoder_channels: List[int] = [16, 8, 8]
    geometry_channels: List[int] = [16, 8, 3]
    expression_channels: List[int] = [16, 8, 4]
    dense_grid: int = 63
    coarse_grid: int = 17
    uv_map_resolution: int = 128
    uv_1d_resolution: int = 512
    xyz_channels: Tuple[int, int] = (4, 4)
    pixel_channels: Tuple[int, int, int, int] = (8, 8, 8, 3)
    omega: float = 30.0
    leaky_slope: float = 0.2
    variant: Variant = Variant.FULL
    scene_center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_half_extent: float = 120.0
    background: float = 0.0

    @field_validator("posmap_resolution")
    @classmethod
    def validate_posmap(cls, v):
        if not _is_power_of_two(v) or v < 2 * LATENT_SIZE:
            raise ValueError(f"posmap_resolution must be a power of two >= {2 * LATENT_SIZE}, got {v}")
        return v

    @field_validator("leaky_slope")
    @classmethod
    def validate_slope(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        return v

    @field_validator("scene_half_extent", "omega")
    @classmethod
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError("value must be positive")
        return v

    @model_validator(mode="after")
    def validate_chains(self):
        n = self.n_blocks
        for name in ("encoder_channels", "geometry_channels", "expression_channels"):
            chain = getattr(self, name)
            if len(chain) != n:
                raise ValueError(
                    f"{name} needs {n} entries for a {self.posmap_resolution}² position map, got {len(chain)}"
                )
        if self.geometry_channels[-1] != 3:
            raise ValueError("geometry decoder must end with 3 channels")
        if self.xyz_channels[-1] + self.latent_channels != 8:
            # z (4) + x_enc (4) is the fixed base of every pixel feature
            raise ValueError("xyz encoder output plus expression code must be 8 wide")
        if self.pixel_channels[-1] != 3:
            raise ValueError("pixel decoder must end with 3 channels")
        return self

    @property
    def n_blocks(self) -> int:
        return int(round(math.log2(self.posmap_resolution // LATENT_SIZE)))

    @property
    def texture_resolution(self) -> int:
        return 4 * self.posmap_resolution

    @property
    def expression_dim(self) -> int:
        return self.expression_channels[-1]

    @property
    def texture_channels(self) -> List[int]:
        """texture-space baseline decoder: the expression chain ending in RGB"""
        return list(self.expression_channels[:-1]) + [3]

    @property
    def uv_margin(self) -> float:
        return 0.5 / self.posmap_resolution

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """full-scale architecture: 1024² texture, 256² maps, 255² dense grid"""
        values = dict(
            posmap_resolution=256,
            tex_head_channels=(512, 256),
            geom_head_channels=256,
            encoder_channels=[128, 64, 32, 16, 8],
            geometry_channels=[32, 16, 16, 8, 3],
            expression_channels=[32, 16, 16, 8, 4],
            dense_grid=255,
            coarse_grid=71,
            uv_map_resolution=1024,
            uv_1d_resolution=10000,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def for_scene(cls, scene: "SceneConfig", **overrides) -> "ModelConfig":
        """desk-scale model matching a scene's position-map resolution"""
        n = int(round(math.log2(scene.posmap_resolution // LATENT_SIZE)))
        extra = [16] * max(0, n - 5)
        enc = (extra + [32, 16, 16, 8, 8])[-n:]
        geo = (extra + [32, 16, 16, 8, 3])[-n:]
        expr = (extra + [32, 16, 16, 8, 4])[-n:]
        values = dict(
            posmap_resolution=scene.posmap_resolution,
            encoder_channels=enc,
            geometry_channels=geo,
            expression_channels=expr,
            coarse_grid=scene.coarse_grid,
            background=scene.background,
        )
        values.update(overrides)
        return cls(**values)


class LossWeights(BaseModel):
    lambda_i: float = 2.0
    lambda_d: float = 10.0
    lambda_n: float = 1.0
    lambda_m: float = 0.1
    lambda_s: float = 1.0
    lambda_kl: float = 0.001
    lambda_l: float = 0.1
    lambda_g: float = 1.0
    depth_gate_mm: float = 10.0

    @field_validator("*")
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError("loss weights must be non-negative")
        return v


class TrainConfig(BaseModel):
    data: Optional[str] = None
    model: Optional[ModelConfig] = None
    weights: LossWeights = Field(default_factory=LossWeights)
    batch_size: int = 4
    learning_rate: float = 0.001
    iterations: int = 5000
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 500
    ema_rate: float = 1e-4
    log_every: int = 50

    @field_validator("batch_size", "iterations", "checkpoint_every")
    @classmethod
    def validate_positive_int(cls, v):
        if v < 1:
            raise ValueError("value must be >= 1")
        return v

    @field_validator("learning_rate")
    @classmethod
    def validate_lr(cls, v):
        if v <= 0:
            raise ValueError("learning_rate must be positive")
        return v


class RunConfig(BaseModel):
    """contents of a --config JSON file"""
    scene: SceneConfig = Field(default_factory=SceneConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    def resolved_model(self) -> ModelConfig:
        if self.train.model is not None:
            return self.train.model
        return ModelConfig.for_scene(self.scene)


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """load a run config file; a missing path gives the desk-scale defaults"""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        return RunConfig.model_validate(json.load(f))
