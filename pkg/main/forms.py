"""Validated input schemas.

Every knob a command accepts goes through one of these pydantic models. A run configuration
is a YAML file with the sections ``model``, ``scene``, ``render``, ``loss`` and ``train``;
unknown keys are rejected.
"""

import hashlib
import json
import logging
import math
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from common.exceptions import ConfigError

logger = logging.getLogger(__name__)

# ==========================================
# CHOICES
# ==========================================

ABLATION_CHOICES = [
    ('no_modulation', 'No frame-wise modulation'),
    ('no_cna', 'No cross-neighbor attention'),
    ('full_camera_attention', 'Full attention for camera tokens'),
    ('no_dq_align', 'No dual-quaternion alignment loss'),
    ('quat_trans', 'Quaternion + translation camera parameterization'),
    ('no_intrinsics', 'No intrinsics conditioning'),
]

_ABLATION_OVERRIDES = {
    'no_modulation': {'modulation': False},
    'no_cna': {'cna': False},
    'full_camera_attention': {'causal_mask': False},
    'no_dq_align': {'dq_alignment_loss': False},
    'quat_trans': {'pose_parameterization': 'quat_trans'},
    'no_intrinsics': {'intrinsics_conditioning': False},
}

PHASE_CHOICES = [
    ('distill', '3D prior distillation'),
    ('nvs', 'Novel view synthesis + pose'),
]

ALIGN_CHOICES = [
    ('none', 'No alignment'),
    ('similarity', 'Closed-form similarity fit over camera centres'),
    ('photometric', 'Target-pose refinement against the target image'),
]


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ==========================================
# 1. Model
# ==========================================

class ModelConfig(_Schema):
    image_height: int = Field(32, gt=0, le=64)
    image_width: int = Field(32, gt=0, le=64)
    patch_size: int = Field(8, gt=0)
    width: int = Field(64, gt=0)
    encoder_depth: int = Field(2, ge=0)
    decoder_depth: int = Field(2, ge=0)
    num_heads: int = Field(4, gt=0)
    mlp_ratio: float = Field(4.0, gt=0)
    sh_degree: int = Field(0, ge=0, le=1)
    max_views: int = Field(8, ge=1)
    rope_base: float = Field(100.0, gt=1.0)

    intrinsics_conditioning: bool = True
    modulation: bool = True
    cna: bool = True
    causal_mask: bool = True
    pose_parameterization: Literal["dq", "quat_trans"] = "dq"
    dq_alignment_loss: bool = True
    seed_centers_from_pointmap: bool = True

    ablations: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch size {self.patch_size}")
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} is not divisible by {self.num_heads} heads")
        if (self.width // self.num_heads) % 4:
            raise ValueError("per-head width must be divisible by 4 for 2D rotary embeddings")
        return self

    @property
    def grid(self):
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def tokens_per_frame(self):
        rows, cols = self.grid
        return rows * cols

    @property
    def color_channels(self):
        return 3 * (self.sh_degree + 1) ** 2


def apply_ablations(model_config, names):
    """Return a copy of ``model_config`` with the named ablations switched on."""
    names = [n.strip() for n in names if n and n.strip()]
    unknown = [n for n in names if n not in _ABLATION_OVERRIDES]
    if unknown:
        valid = ", ".join(key for key, _ in ABLATION_CHOICES)
        raise ConfigError(f"unknown ablation {', '.join(unknown)}; valid ablations: {valid}")
    update = {}
    for name in names:
        update.update(_ABLATION_OVERRIDES[name])
    recorded = tuple(dict.fromkeys(model_config.ablations + tuple(names)))
    update["ablations"] = recorded
    return model_config.model_copy(update=update)


# ==========================================
# 2. Scenes, rendering, losses
# ==========================================

class SceneConfig(_Schema):
    image_height: int = Field(32, gt=0)
    image_width: int = Field(32, gt=0)
    num_frames: int = Field(24, ge=2)
    fov_degrees: float = Field(60.0, gt=10.0, lt=150.0)
    min_primitives: int = Field(50, ge=1)
    max_primitives: int = Field(500, ge=1)
    max_rotation_degrees: float = Field(30.0, ge=0.0, le=90.0)
    path_length: float = Field(1.0, gt=0.0)
    num_keyposes: int = Field(4, ge=2)
    num_targets: int = Field(2, ge=0)
    min_coverage: float = Field(0.3, ge=0.0, le=1.0)
    max_retries: int = Field(5, ge=0)
    texture_frequency: float = Field(6.0, gt=0.0)
    palette_size: int = Field(8, ge=2)

    @model_validator(mode="after")
    def _check_counts(self):
        if self.min_primitives > self.max_primitives:
            raise ValueError("min_primitives exceeds max_primitives")
        return self

    @property
    def focal(self):
        return 0.5 * self.image_width / math.tan(math.radians(self.fov_degrees) / 2.0)


class RenderConfig(_Schema):
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = Field(1e-3, gt=0.0)
    covariance_eps: float = Field(1e-6, ge=0.0)
    max_alpha: float = Field(0.999, gt=0.0, lt=1.0)
    cutoff_sigma: Optional[float] = Field(3.0, gt=0.0)
    chunk_pixels: int = Field(1024, gt=0)


class LossWeights(_Schema):
    img_mse: float = Field(1.0, ge=0.0)
    img_perceptual: float = Field(0.05, ge=0.0)
    camera: float = Field(0.1, ge=0.0)
    distill: float = Field(1.0, ge=0.0)


# ==========================================
# 3. Training
# ==========================================

class StageSpec(_Schema):
    name: str
    phase: Literal["distill", "nvs"]
    views: int = Field(ge=1)
    interval_start: int = Field(ge=1)
    interval_end: int = Field(ge=1)
    steps: int = Field(ge=1)
    camera_weight: float = Field(0.1, ge=0.0)
    lr: float = Field(3e-4, gt=0.0)

    def interval_at(self, step):
        """Frame interval used at ``step`` (0-based within the stage), linear ramp, rounded."""
        if self.steps <= 1:
            return self.interval_end
        fraction = min(max(step / (self.steps - 1), 0.0), 1.0)
        return int(round(self.interval_start + fraction * (self.interval_end - self.interval_start)))

    @property
    def initial_span(self):
        return (self.views - 1) * self.interval_start

    @property
    def final_span(self):
        return (self.views - 1) * self.interval_end


class TrainConfig(_Schema):
    views: int = Field(8, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(3e-4, gt=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    warmup_fraction: float = Field(0.05, ge=0.0, lt=1.0)
    grad_clip: Optional[float] = Field(1.0, gt=0.0)
    budgets: dict[str, int] = Field(
        default_factory=lambda: {"distill": 5000, "nvs2": 10000, "nvs4": 5000, "nvs8": 5000})
    stages: Optional[list[StageSpec]] = None
    scene_pool: Optional[int] = Field(None, ge=1)
    checkpoint_every: int = Field(1000, ge=1)
    validate_every: int = Field(500, ge=1)
    validation_seeds: list[int] = Field(default_factory=lambda: [1_000_000 + i for i in range(4)])
    log_every: int = Field(10, ge=1)
    queue_size: int = Field(8, ge=1)

    @field_validator("budgets")
    @classmethod
    def _check_budgets(cls, value):
        bad = [k for k, v in value.items() if v < 1]
        if bad:
            raise ValueError(f"stage budgets must be positive: {bad}")
        return value


# ==========================================
# 4. Whole run
# ==========================================

class RunConfig(_Schema):
    seed: int = 0
    model: ModelConfig = ModelConfig()
    scene: SceneConfig = SceneConfig()
    render: RenderConfig = RenderConfig()
    loss: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()

    @model_validator(mode="after")
    def _check_resolution(self):
        if (self.scene.image_height, self.scene.image_width) != (self.model.image_height, self.model.image_width):
            raise ValueError("scene and model resolutions differ")
        return self

    def digest(self):
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_run_config(data):
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid run configuration:\n{exc}") from exc


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at top level")
    config = parse_run_config(data)
    logger.debug("loaded run config %s (digest %s)", path, config.digest()[:12])
    return config


def dump_run_config(config, path):
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(config.model_dump(mode="json"), handle, sort_keys=False)
