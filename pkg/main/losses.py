"""Training objectives and the per-step loss report."""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import torch

from common.exceptions import ContractViolation
from common.numerics import VERIFY_DTYPE, register_primitive

from .dualquat import camera_loss_terms
from .forms import LossWeights
from .gsplat import CameraModel, render, render_options

logger = logging.getLogger(__name__)

CANONICAL_FRAME = "canonical"


# ==========================================
# 1. Types
# ==========================================

@dataclass
class PointMap:
    """Per-pixel 3D points (..., T, H, W, 3) in the named reference frame; ``valid`` masks reductions."""

    points: torch.Tensor
    valid: Optional[torch.Tensor] = None
    frame: str = CANONICAL_FRAME

    def __post_init__(self):
        if self.points.shape[-1] != 3:
            raise ContractViolation(f"point map must end in 3 coordinates, got {tuple(self.points.shape)}")
        if self.valid is None:
            self.valid = torch.ones(self.points.shape[:-1], dtype=torch.bool, device=self.points.device)
        elif self.valid.shape != self.points.shape[:-1]:
            raise ContractViolation("validity mask does not match the point map")


@dataclass
class ConfidenceMap:
    """Per-pixel confidence (..., T, H, W). Predictions are strictly positive; prior maps may hold zeros."""

    values: torch.Tensor
    allow_zero: bool = False

    def __post_init__(self):
        with torch.no_grad():
            bad = (self.values < 0) if self.allow_zero else (self.values <= 0)
            if bool(bad.any()):
                raise ContractViolation("confidence map must be positive")


class PerceptualBackend(Protocol):
    """Any differentiable image-pair distance over (N, H, W, 3) batches, returning a scalar."""

    def __call__(self, rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        ...


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def weighted_sum(self):
        total = None
        for name, value in self.components.items():
            term = self.weights.get(name, 1.0) * value
            total = term if total is None else total + term
        return total

    def as_floats(self):
        return {name: float(value.detach()) for name, value in self.components.items()}

    def is_finite(self):
        return math.isfinite(float(self.total.detach())) and all(
            math.isfinite(v) for v in self.as_floats().values())

    def first_non_finite(self):
        for name, value in self.as_floats().items():
            if not math.isfinite(value):
                return name
        return "total"

    def to_json(self, **extra):
        row = dict(extra)
        row["total"] = float(self.total.detach())
        row["components"] = self.as_floats()
        row["weights"] = dict(self.weights)
        return json.dumps(row, sort_keys=True)


# ==========================================
# 2. Individual losses
# ==========================================

def _check_shapes(rendered, target):
    if rendered.shape != target.shape:
        raise ContractViolation(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")


def photometric_terms(rendered, target, perceptual=None):
    _check_shapes(rendered, target)
    terms = {"img_mse": ((rendered - target) ** 2).mean()}
    if perceptual is not None:
        terms["img_perceptual"] = perceptual(rendered, target)
    return terms


@register_primitive("photometric_loss", sample=lambda g: (
        torch.rand(2, 3, 3, 3, generator=g, dtype=VERIFY_DTYPE),
        torch.rand(2, 3, 3, 3, generator=g, dtype=VERIFY_DTYPE)))
def photometric_loss(rendered, target, perceptual=None, weights=None):
    """weights.img_mse * MSE + weights.img_perceptual * perceptual; the second term only with a backend."""
    weights = weights or LossWeights()
    terms = photometric_terms(rendered, target, perceptual)
    loss = weights.img_mse * terms["img_mse"]
    if "img_perceptual" in terms:
        loss = loss + weights.img_perceptual * terms["img_perceptual"]
    return loss


def distill_terms(pred_points, pred_confidence, prior_points, prior_confidence):
    """Confidence-weighted point regression plus L1 confidence regression, summed over views and pixels.

    Leading batch dimensions beyond (T, H, W) are averaged.
    """
    if pred_points.frame != prior_points.frame:
        raise ContractViolation(
            f"point maps are in different reference frames: '{pred_points.frame}' vs '{prior_points.frame}'")
    if pred_points.points.shape != prior_points.points.shape:
        raise ContractViolation("predicted and prior point maps differ in shape")
    target = prior_points.points.detach()
    target_confidence = prior_confidence.values.detach()
    valid = (pred_points.valid & prior_points.valid).to(pred_points.points.dtype)

    distance = (pred_points.points - target).norm(dim=-1)
    point_term = (valid * target_confidence * distance).flatten(-3).sum(-1)
    conf_term = (valid * (pred_confidence.values - target_confidence).abs()).flatten(-3).sum(-1)
    return {"distill_point": point_term.mean(), "distill_conf": conf_term.mean()}


def distill_loss(pred_points, pred_confidence, prior_points, prior_confidence):
    terms = distill_terms(pred_points, pred_confidence, prior_points, prior_confidence)
    return terms["distill_point"] + terms["distill_conf"]


def _sample_distill(generator):
    points = torch.randn(2, 3, 3, 3, generator=generator, dtype=VERIFY_DTYPE)
    offset = 0.5 + torch.rand(2, 3, 3, 3, generator=generator, dtype=VERIFY_DTYPE)
    confidence = 0.5 + torch.rand(2, 3, 3, generator=generator, dtype=VERIFY_DTYPE)
    return points + offset, confidence, points


register_primitive("distill_loss", sample=_sample_distill,
                   exclusion="points equal to the prior (norm kink) and |C - C_prior| = 0")(
    lambda points, confidence, prior: distill_loss(
        PointMap(points), ConfidenceMap(confidence),
        PointMap(prior), ConfidenceMap(torch.full_like(confidence, 0.25), allow_zero=True)))


# ==========================================
# 3. Total loss
# ==========================================

def render_supervision(gaussians, sample, render_config=None):
    """Render the clip's input views and its held-out target views at their ground-truth cameras.

    Returns (rendered, target), both (V, H, W, 3).
    """
    options = render_options(render_config)
    height, width = sample.frames.height, sample.frames.width
    poses = torch.cat((sample.poses, sample.target_poses), dim=0)
    intrinsics = torch.cat((sample.frames.intrinsics, sample.target_intrinsics), dim=0)
    targets = torch.cat((sample.frames.images, sample.target_images), dim=0).permute(0, 2, 3, 1)
    dtype = gaussians.means.dtype
    rendered = []
    for pose, k in zip(poses.to(dtype), intrinsics.to(dtype)):
        camera = CameraModel.from_pose(pose, k, height, width)
        rendered.append(render(gaussians, camera, **options).image)
    return torch.stack(rendered), targets.to(dtype)


def total_loss(output, samples, phase, weights=None, *, camera_weight=None, render_config=None,
               perceptual=None, parameterization="dq", align=True):
    """Weighted objective for one batch.

    ``samples`` holds one SceneSample per batch element of ``output``. The distill phase uses the
    point/confidence terms only; the nvs phase uses the image terms plus ``camera_weight`` times
    the camera terms (``weights.camera`` when not given).
    """
    weights = weights or LossWeights()
    if phase == "distill":
        if output.pointmap is None or output.confidence is None:
            raise ContractViolation("distill phase needs pointmap and confidence outputs")
        prior_points = PointMap(torch.stack([s.pointmap.points for s in samples]).to(output.pointmap.dtype),
                                  torch.stack([s.pointmap.valid for s in samples]))
        prior_confidence = ConfidenceMap(
            torch.stack([s.confidence.values for s in samples]).to(output.pointmap.dtype), allow_zero=True)
        components = distill_terms(PointMap(output.pointmap), ConfidenceMap(output.confidence),
                                   prior_points, prior_confidence)
        report_weights = {name: weights.distill for name in components}
    elif phase == "nvs":
        if any(s.target_images is None for s in samples):
            raise ContractViolation("nvs phase needs target views in every sample")
        rendered, targets = [], []
        for index, sample in enumerate(samples):
            image, target = render_supervision(output.gaussians[index], sample, render_config)
            rendered.append(image)
            targets.append(target)
        components = photometric_terms(torch.cat(rendered), torch.cat(targets), perceptual)
        gt_poses = torch.stack([s.poses for s in samples]).to(output.poses.dtype)
        components.update(camera_loss_terms(output.poses, gt_poses, parameterization=parameterization,
                                            align=align))
        lam = weights.camera if camera_weight is None else camera_weight
        report_weights = {"img_mse": weights.img_mse, "img_perceptual": weights.img_perceptual}
        report_weights.update({name: lam for name in components if name.startswith("camera_")})
        report_weights = {name: report_weights[name] for name in components}
    else:
        raise ContractViolation(f"unknown phase '{phase}'")

    report = LossReport(torch.zeros(()), components, report_weights)
    report.total = report.weighted_sum()
    return report
