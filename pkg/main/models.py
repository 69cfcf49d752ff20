"""The network: per-frame encoder, camera-token decoder and pixel-aligned prediction heads.

Also owns the checkpoint container (``save_checkpoint`` / ``load_checkpoint``).
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from common.exceptions import ContractViolation, DataError
from splatcam import settings

from .attention import DecoderBlock, EncoderBlock, TokenState, build_blocked_causal_mask
from .dualquat import IDENTITY_DQ, canonicalize_sign, normalize_raw_dq, quat_mul, with_identity_first
from .forms import ModelConfig
from .gsplat import GaussianSet, pixel_provenance

logger = logging.getLogger(__name__)

PHASES = ("distill", "nvs")
LOG_SCALE_MIN = -10.0
LOG_SCALE_MAX = 3.0
OPACITY_EPS = 1e-6
CONFIDENCE_EPS = 1e-6
# input colours are pulled into (eps, 1 - eps) so the colour head starts at the pixel's own RGB
COLOR_BASE_EPS = 0.01


@dataclass
class ModelOutput:
    gaussians: GaussianSet             # batched: fields (B, T*H*W, ...)
    poses: torch.Tensor                # (B, T, 8), poses[:, 0] = identity
    phase: str
    pointmap: Optional[torch.Tensor] = None     # (B, T, H, W, 3), distill phase only
    confidence: Optional[torch.Tensor] = None   # (B, T, H, W), distill phase only

    def require_pointmap(self):
        if self.phase != "distill" or self.pointmap is None:
            raise ContractViolation(f"pointmap and confidence exist only in the distill phase (phase is '{self.phase}')")
        return self.pointmap, self.confidence


def pixel_unshuffle_tokens(tokens, grid, patch, channels):
    """(B, T, L, s*s*k) per-token outputs -> (B, T, H, W, k) per-pixel maps."""
    batch, frames = tokens.shape[:2]
    rows, cols = grid
    x = tokens.reshape(batch, frames, rows, cols, patch, patch, channels)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(batch, frames, rows * patch, cols * patch, channels)


def quat_trans_to_dq(raw):
    """7-vector (raw quaternion, translation) -> unit DQ."""
    quat = raw[..., :4]
    norm = quat.norm(dim=-1, keepdim=True)
    if raw.numel() and float(norm.min()) <= 1e-8:
        raise ContractViolation("raw quaternion near zero; camera head diverged or is uninitialised")
    quat = quat / norm
    pure = torch.cat((torch.zeros_like(raw[..., 4:5]), raw[..., 4:7]), dim=-1)
    return canonicalize_sign(torch.cat((quat, 0.5 * quat_mul(pure, quat)), dim=-1))


class SplatCamModel(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        width, patch = config.width, config.patch_size
        pixels = patch * patch

        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch, stride=patch)
        self.intrinsics_embed = nn.Linear(4, width) if config.intrinsics_conditioning else None
        self.encoder = nn.ModuleList(
            EncoderBlock(width, config.num_heads, config.mlp_ratio, config.rope_base)
            for _ in range(config.encoder_depth))
        self.encoder_norm = nn.LayerNorm(width)

        self.camera_token = nn.Parameter(0.02 * torch.randn(width))
        self.camera_position = nn.Parameter(0.02 * torch.randn(config.max_views, width))
        self.decoder = nn.ModuleList(DecoderBlock(config) for _ in range(config.decoder_depth))
        self.final_norm = nn.LayerNorm(width)

        self.center_head = nn.Linear(width, pixels * 3)
        self.gaussian_head = nn.Linear(width, pixels * (1 + 4 + 3 + config.color_channels))
        pose_channels = 8 if config.pose_parameterization == "dq" else 7
        self.camera_head = nn.Linear(width, pose_channels)
        self.pointmap_head = nn.Linear(width, pixels * 3)
        self.confidence_head = nn.Linear(width, pixels)
        self._init_heads()

    def _init_heads(self):
        patch = self.config.patch_size
        with torch.no_grad():
            for head in (self.center_head, self.pointmap_head):
                head.bias.view(patch * patch, 3)[:, 2] = 2.0
            params = self.gaussian_head.bias.view(patch * patch, -1)
            params[:, 1:5] = torch.tensor([1.0, 0.0, 0.0, 0.0])
            params[:, 5:8] = -3.0
            params[:, 8:] = 0.0
            self.camera_head.weight.zero_()
            self.camera_head.bias.copy_(torch.tensor(IDENTITY_DQ[:self.camera_head.out_features]))

    # ------------------------------------------
    # encode / decode / heads
    # ------------------------------------------

    def _check_frames(self, images):
        if images.dim() != 5 or images.shape[2] != 3:
            raise ContractViolation(f"frames must be (B, T, 3, H, W), got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if height % self.config.patch_size or width % self.config.patch_size:
            raise ContractViolation(f"{height}x{width} frames are not divisible by patch size {self.config.patch_size}")
        if (height, width) != (self.config.image_height, self.config.image_width):
            raise ContractViolation(
                f"frames are {height}x{width}, model expects {self.config.image_height}x{self.config.image_width}")
        if images.shape[1] > self.config.max_views:
            raise ContractViolation(f"{images.shape[1]} views exceed the model's max_views={self.config.max_views}")

    def encode(self, images, intrinsics=None):
        """(B, T, 3, H, W) frames -> (B, T, L, C) visual tokens, each frame independently."""
        self._check_frames(images)
        batch, frames, _, height, width = images.shape
        x = self.patch_embed(images.reshape(batch * frames, 3, height, width))
        x = x.flatten(2).transpose(1, 2)
        if self.intrinsics_embed is not None and intrinsics is not None:
            scale = intrinsics.new_tensor([width, height, width, height])
            embedding = self.intrinsics_embed((intrinsics / scale).to(x.dtype))
            x = x + embedding.reshape(batch * frames, 1, -1)
        for block in self.encoder:
            x = block(x, self.config.grid)
        x = self.encoder_norm(x)
        return x.reshape(batch, frames, self.config.tokens_per_frame, self.config.width)

    def decode(self, visual):
        """Attach one positional camera token per frame and run the decoder stack."""
        batch, frames = visual.shape[:2]
        camera = (self.camera_token + self.camera_position[:frames]).expand(batch, frames, -1)
        state = TokenState(visual, camera, self.config.grid)
        mask = build_blocked_causal_mask(frames, self.config.tokens_per_frame,
                                         causal=self.config.causal_mask, device=visual.device)
        for block in self.decoder:
            state = block(state, mask)
        return state

    def predict_heads(self, state, images, phase):
        if phase not in PHASES:
            raise ContractViolation(f"unknown phase '{phase}'")
        config = self.config
        grid, patch = config.grid, config.patch_size
        visual = self.final_norm(state.visual)
        camera = self.final_norm(state.camera)
        batch, frames = visual.shape[:2]
        height, width = config.image_height, config.image_width

        means = pixel_unshuffle_tokens(self.center_head(visual), grid, patch, 3)
        raw = pixel_unshuffle_tokens(self.gaussian_head(visual), grid, patch, 8 + config.color_channels)
        opacity = torch.sigmoid(raw[..., 0]).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)
        rotation = raw[..., 1:5] / raw[..., 1:5].norm(dim=-1, keepdim=True).clamp_min(1e-8)
        scale = torch.exp(raw[..., 5:8].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX))
        base = images.permute(0, 1, 3, 4, 2).to(raw.dtype).clamp(COLOR_BASE_EPS, 1.0 - COLOR_BASE_EPS)
        color = torch.sigmoid(torch.logit(base) + raw[..., 8:11])
        if config.sh_degree > 0:
            color = torch.cat((color, 0.1 * raw[..., 11:]), dim=-1)

        count = frames * height * width
        source_frame, source_pixel = pixel_provenance(frames, height, width)
        gaussians = GaussianSet(
            means=means.reshape(batch, count, 3),
            opacities=opacity.reshape(batch, count),
            rotations=rotation.reshape(batch, count, 4),
            scales=scale.reshape(batch, count, 3),
            colors=color.reshape(batch, count, -1),
            sh_degree=config.sh_degree,
            source_frame=source_frame,
            source_pixel=source_pixel,
            image_size=(height, width),
        )

        raw_pose = self.camera_head(camera[:, 1:])
        if config.pose_parameterization == "dq":
            rest = normalize_raw_dq(raw_pose)
        else:
            rest = quat_trans_to_dq(raw_pose)
        poses = with_identity_first(rest)

        pointmap = confidence = None
        if phase == "distill":
            pointmap = pixel_unshuffle_tokens(self.pointmap_head(visual), grid, patch, 3)
            confidence = F.softplus(pixel_unshuffle_tokens(self.confidence_head(visual), grid, patch, 1)[..., 0])
            confidence = confidence + CONFIDENCE_EPS
        return ModelOutput(gaussians, poses, phase, pointmap, confidence)

    def forward(self, images, intrinsics=None, phase="nvs"):
        """(B, T, 3, H, W) frames in [0, 1] -> ModelOutput with T*H*W Gaussians per clip."""
        visual = self.encode(images, intrinsics)
        state = self.decode(visual)
        return self.predict_heads(state, images, phase)

    # ------------------------------------------
    # stage transitions
    # ------------------------------------------

    def distill_heads(self):
        return [self.pointmap_head, self.confidence_head]

    def freeze_distill_heads(self, frozen=True):
        for head in self.distill_heads():
            for parameter in head.parameters():
                parameter.requires_grad_(not frozen)

    def seed_centers_from_pointmap(self):
        """Warm-start the Gaussian-centre head with the distilled point-map head."""
        with torch.no_grad():
            self.center_head.weight.copy_(self.pointmap_head.weight)
            self.center_head.bias.copy_(self.pointmap_head.bias)
        logger.info("centre head seeded from the point-map head")


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


# ==========================================
# Checkpoints
# ==========================================

def save_checkpoint(path, model, *, phase, seed, train_state=None, extra=None):
    """Self-describing container: versioned header, config echo, ablations, phase, seed, weights."""
    payload = {
        "format": settings.CHECKPOINT_FORMAT,
        "version": settings.CHECKPOINT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "ablations": list(model.config.ablations),
        "phase": phase,
        "seed": int(seed),
        "state_dict": model.state_dict(),
        "train_state": train_state,
        "extra": extra or {},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.debug("checkpoint written to %s (phase %s)", path, phase)
    return path


def read_checkpoint(path, map_location="cpu"):
    if not os.path.isfile(path):
        raise DataError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != settings.CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a splatcam checkpoint")
    if payload.get("version") != settings.CHECKPOINT_VERSION:
        raise DataError(f"{path} has checkpoint version {payload.get('version')}, "
                        f"expected {settings.CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path, map_location="cpu"):
    """Returns (model, payload)."""
    payload = read_checkpoint(path, map_location)
    config = ModelConfig.model_validate(payload["config"])
    model = SplatCamModel(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload
