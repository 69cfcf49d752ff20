"""Evaluation calculators: image metrics, trajectory metrics, alignment and report figures."""

import base64
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import matplotlib.pyplot as plt
import pandas as pd
import torch
import torch.nn.functional as F

from common.exceptions import ContractViolation
from common.numerics import line_search_descent

from .dualquat import (PoseSE3, camera_centers, compose_se3, dq_to_se3, invert_se3, se3_exp, se3_to_dq)
from .gsplat import CameraModel, render, render_options

# Render figures off-screen; this runs on headless training boxes.
plt.switch_backend('Agg')

logger = logging.getLogger(__name__)

METRIC_DTYPE = torch.float64
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_SCHEMA_VERSION = 1
MIN_TRAJECTORY_EXTENT = 1e-8
ALIGN_MODES = ("none", "similarity", "photometric")


# ==========================================
# 1. Image metrics
# ==========================================

def _check_images(image, reference):
    if image.shape != reference.shape:
        raise ContractViolation(f"image shapes differ: {tuple(image.shape)} vs {tuple(reference.shape)}")
    if image.dim() != 3 or image.shape[-1] not in (1, 3):
        raise ContractViolation(f"images must be (H, W, C), got {tuple(image.shape)}")


def psnr(image, reference):
    """10 log10(1 / MSE) in dB for [0, 1] images; identical images report PSNR_CAP."""
    _check_images(image, reference)
    mse = float(((image.to(METRIC_DTYPE) - reference.to(METRIC_DTYPE)) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size, sigma, dtype):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    kernel = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = kernel / kernel.sum()
    return torch.outer(kernel, kernel)


def ssim(image, reference):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    _check_images(image, reference)
    height, width, channels = image.shape
    size = min(SSIM_WINDOW, height, width)
    if size % 2 == 0:
        size -= 1
    window = _gaussian_window(size, SSIM_SIGMA, METRIC_DTYPE).expand(channels, 1, size, size)

    x = image.to(METRIC_DTYPE).permute(2, 0, 1).unsqueeze(0)
    y = reference.to(METRIC_DTYPE).permute(2, 0, 1).unsqueeze(0)

    def blur(t):
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((numerator / denominator).mean())


# ==========================================
# 2. Trajectory metrics
# ==========================================

def _canonical(poses):
    if poses.dim() != 2 or poses.shape[-1] != 8:
        raise ContractViolation(f"trajectory must be (T, 8), got {tuple(poses.shape)}")
    se3 = dq_to_se3(poses.to(METRIC_DTYPE))
    first = invert_se3(PoseSE3(se3.rotation[0], se3.translation[0]))
    return compose_se3(se3, PoseSE3(first.rotation.expand_as(se3.rotation),
                                    first.translation.expand_as(se3.translation)))


def is_normalizable(poses):
    """False when the last pose sits (numerically) on the first one."""
    return float(_canonical(poses).translation[-1].norm()) > MIN_TRAJECTORY_EXTENT


def normalize_trajectory(poses):
    """Re-express (T, 8) poses relative to frame 1 and scale so the last translation has unit norm."""
    canonical = _canonical(poses)
    norm = float(canonical.translation[-1].norm())
    if norm <= MIN_TRAJECTORY_EXTENT:
        raise ContractViolation("last pose has (near) zero translation; the trajectory cannot be normalized")
    return se3_to_dq(PoseSE3(canonical.rotation, canonical.translation / norm))


def _as_se3(poses):
    if isinstance(poses, PoseSE3):
        return PoseSE3(poses.rotation.to(METRIC_DTYPE), poses.translation.to(METRIC_DTYPE))
    return dq_to_se3(poses.to(METRIC_DTYPE))


def _check_lengths(pred, gt):
    if pred.translation.shape != gt.translation.shape:
        raise ContractViolation(
            f"trajectories differ in length: {pred.translation.shape[0]} vs {gt.translation.shape[0]}")


def ate(pred, gt):
    """RMSE of camera-centre differences. Accepts (T, 8) DQs or PoseSE3."""
    pred, gt = _as_se3(pred), _as_se3(gt)
    _check_lengths(pred, gt)
    errors = (camera_centers(pred) - camera_centers(gt)).norm(dim=-1)
    return float(torch.sqrt((errors ** 2).mean()))


def _rotation_angle_deg(rotation):
    cosine = ((rotation.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0).clamp(-1.0, 1.0)
    return torch.rad2deg(torch.arccos(cosine))


def rpe_terms(pred, gt):
    """Per-step relative errors at stride 1: (translation norms, rotation angles in degrees), each (T-1,)."""
    pred, gt = _as_se3(pred), _as_se3(gt)
    _check_lengths(pred, gt)

    def step(se3):
        earlier = invert_se3(PoseSE3(se3.rotation[:-1], se3.translation[:-1]))
        return compose_se3(earlier, PoseSE3(se3.rotation[1:], se3.translation[1:]))

    delta = compose_se3(invert_se3(step(gt)), step(pred))
    return delta.translation.norm(dim=-1), _rotation_angle_deg(delta.rotation)


def rpe(pred, gt):
    """(RMSE translation, RMSE rotation degrees) over consecutive frames."""
    trans, rot = rpe_terms(pred, gt)
    if trans.numel() == 0:
        return 0.0, 0.0
    return float(torch.sqrt((trans ** 2).mean())), float(torch.sqrt((rot ** 2).mean()))


# ==========================================
# 3. Alignment
# ==========================================

@dataclass
class AlignmentResult:
    poses: object                      # PoseSE3 (trajectory modes) or (V, 8) DQs (photometric)
    mode: str
    scale: float = 1.0
    rotation: Optional[torch.Tensor] = None
    translation: Optional[torch.Tensor] = None
    degenerate: bool = False
    history: list = field(default_factory=list)


def _fit_similarity(source, target):
    """Least-squares s, R, t with target ~ s R source + t. Falls back to scale+translation on rank deficiency."""
    count = source.shape[0]
    mu_s, mu_t = source.mean(0), target.mean(0)
    src, dst = source - mu_s, target - mu_t
    var_s = float((src ** 2).sum()) / count
    eye = torch.eye(3, dtype=source.dtype)

    singular = torch.linalg.svdvals(src) if count else torch.zeros(3, dtype=source.dtype)
    rank = int((singular > 1e-9 * max(1.0, float(singular.max()) if singular.numel() else 1.0)).sum())
    if count < 3 or rank < 2:
        scale = float((src * dst).sum()) / (count * var_s) if var_s > 1e-12 else 1.0
        scale = max(scale, 0.0)
        return scale, eye, mu_t - scale * mu_s, True

    covariance = dst.T @ src / count
    u, sigma, vh = torch.linalg.svd(covariance)
    d = eye.clone()
    if float(torch.linalg.det(u) * torch.linalg.det(vh)) < 0:
        d[2, 2] = -1.0
    rotation = u @ d @ vh
    scale = float((sigma * d.diagonal()).sum()) / var_s
    return scale, rotation, mu_t - scale * rotation @ mu_s, False


def similarity_align(pred, gt):
    """Map ``pred`` into ``gt``'s frame with the similarity fitted between camera centres."""
    pred, gt = _as_se3(pred), _as_se3(gt)
    _check_lengths(pred, gt)
    scale, rotation, translation, degenerate = _fit_similarity(camera_centers(pred), camera_centers(gt))
    if degenerate:
        logger.info("similarity alignment is rank deficient; fitted scale and translation only")
    aligned_rotation = pred.rotation @ rotation.T
    aligned_translation = scale * pred.translation - (aligned_rotation @ translation)
    return AlignmentResult(PoseSE3(aligned_rotation, aligned_translation), "similarity", scale, rotation,
                           translation, degenerate)


@dataclass
class PhotometricTarget:
    """Frozen Gaussians plus the target views a pose is refined against."""

    gaussians: object
    images: torch.Tensor        # (V, H, W, 3)
    intrinsics: torch.Tensor    # (V, 4)
    render_config: object = None
    steps: int = 50
    initial_step: float = 1e-2


def refine_pose_photometric(gaussians, initial_pose, intrinsics, target_image, *, render_config=None, steps=50,
                            initial_step=1e-2):
    """Descend target-view MSE over a twist applied to ``initial_pose`` with the Gaussians frozen.

    Returns (refined DQ, loss history); the history is non-increasing.
    """
    frozen = gaussians.detach()
    dtype = frozen.means.dtype
    height, width = target_image.shape[:2]
    base = dq_to_se3(initial_pose.detach().to(dtype))
    k = intrinsics.to(dtype)
    target = target_image.to(dtype)
    options = render_options(render_config)
    twist = torch.zeros(6, dtype=dtype, requires_grad=True)

    def current_pose():
        return compose_se3(se3_exp(twist), base)

    def loss_fn():
        camera = CameraModel(k, current_pose(), height, width)
        return ((render(frozen, camera, **options).image - target) ** 2).mean()

    history = line_search_descent(loss_fn, [twist], steps, initial_step=initial_step)
    with torch.no_grad():
        refined = current_pose()
        refined = PoseSE3(refined.rotation.detach(), refined.translation.detach())
    return se3_to_dq(refined), history


def align_eval_poses(pred, gt=None, mode="similarity", *, photometric=None):
    """Evaluation-time pose alignment.

    ``similarity``: closed-form fit of the predicted trajectory onto ``gt`` over camera centres.
    ``photometric``: ``pred`` are (V, 8) target poses refined one by one against ``photometric``.
    ``none`` returns ``pred`` unchanged.
    """
    if mode not in ALIGN_MODES:
        raise ContractViolation(f"unknown alignment mode '{mode}', expected one of {ALIGN_MODES}")
    if mode == "none":
        return AlignmentResult(_as_se3(pred), "none")
    if mode == "similarity":
        if gt is None:
            raise ContractViolation("similarity alignment needs a reference trajectory")
        return similarity_align(pred, gt)
    if photometric is None:
        raise ContractViolation("photometric alignment needs frozen Gaussians and target views")
    refined, histories = [], []
    for pose, k, image in zip(pred, photometric.intrinsics, photometric.images):
        dq, history = refine_pose_photometric(photometric.gaussians, pose, k, image,
                                              render_config=photometric.render_config,
                                              steps=photometric.steps, initial_step=photometric.initial_step)
        refined.append(dq)
        histories.append(history)
    return AlignmentResult(torch.stack(refined), "photometric", history=histories)


# ==========================================
# 4. Point maps
# ==========================================

def scene_extent(points, hits):
    """Bounding-box diagonal of the hit points."""
    if points.shape[:-1] != hits.shape:
        raise ContractViolation(f"hit mask {tuple(hits.shape)} does not match points {tuple(points.shape)}")
    selected = points.to(METRIC_DTYPE)[hits.bool()]
    if selected.shape[0] == 0:
        raise ContractViolation("no hit pixels to measure a scene extent on")
    return float((selected.max(dim=0).values - selected.min(dim=0).values).norm())


def pointmap_error(pred, gt, hits, extent=None):
    """Mean Euclidean point error over hit pixels, as a fraction of ``extent`` (scene extent by default)."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"point maps differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    extent = scene_extent(gt, hits) if extent is None else extent
    if not extent > 0.0:
        raise ContractViolation(f"scene extent must be positive, got {extent}")
    mask = hits.bool()
    error = (pred.to(METRIC_DTYPE) - gt.to(METRIC_DTYPE)).norm(dim=-1)[mask]
    return float(error.mean()) / extent


def confidence_auc(confidence, hits):
    """ROC AUC of confidence as a hit-vs-background score (Mann-Whitney, ties count half).

    None when either class is empty.
    """
    if confidence.shape != hits.shape:
        raise ContractViolation(f"confidence {tuple(confidence.shape)} does not match hits {tuple(hits.shape)}")
    scores = confidence.detach().to(METRIC_DTYPE).reshape(-1)
    labels = hits.bool().reshape(-1)
    positives = int(labels.sum())
    negatives = labels.numel() - positives
    if positives == 0 or negatives == 0:
        return None
    _, inverse, counts = torch.unique(scores, sorted=True, return_inverse=True, return_counts=True)
    ends = torch.cumsum(counts, 0).to(METRIC_DTYPE)
    ranks = (ends - (counts.to(METRIC_DTYPE) - 1.0) / 2.0)[inverse]
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)


# ==========================================
# 5. Reports
# ==========================================

@dataclass
class PoseMetricReport:
    ate: float
    rpe_trans: float
    rpe_rot: float
    aligned: bool = False
    degenerate: bool = False

    def __post_init__(self):
        for name in ("ate", "rpe_trans", "rpe_rot"):
            if not getattr(self, name) >= 0.0:
                raise ContractViolation(f"{name} must be non-negative, got {getattr(self, name)}")

    def as_dict(self):
        return asdict(self)


def pose_metrics(pred, gt, align="none"):
    """ATE / RPE on normalized trajectories; ``align='similarity'`` fits pred onto gt first."""
    pred_n, gt_n = normalize_trajectory(pred), normalize_trajectory(gt)
    degenerate = False
    if align == "similarity":
        result = similarity_align(pred_n, gt_n)
        pred_n, degenerate = result.poses, result.degenerate
    elif align != "none":
        raise ContractViolation(f"trajectory alignment must be 'none' or 'similarity', got '{align}'")
    trans, rot = rpe(pred_n, gt_n)
    return PoseMetricReport(ate(pred_n, gt_n), trans, rot, aligned=align == "similarity", degenerate=degenerate)


def _mean(values):
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def build_metric_report(rows, config_digest, **extra):
    """JSON-ready document: config digest, one row per scene, column means (absent columns stay None)."""
    columns = []
    for row in rows:
        for key, value in row.items():
            if key not in columns and (value is None or isinstance(value, (int, float))) \
                    and not isinstance(value, bool):
                columns.append(key)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_digest": config_digest,
        "rpe_aggregation": "rmse",
        "scenes": rows,
        "mean": {key: _mean([row.get(key) for row in rows]) for key in columns},
    }
    report.update(extra)
    return report


def write_metric_report(report, directory, name="metrics"):
    """Writes <name>.json and a per-scene <name>.csv table. Returns both paths."""
    os.makedirs(directory, exist_ok=True)
    json_path = os.path.join(directory, f"{name}.json")
    csv_path = os.path.join(directory, f"{name}.csv")
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
    pd.DataFrame(report["scenes"]).to_csv(csv_path, index=False)
    return json_path, csv_path


# ==========================================
# 6. Figures
# ==========================================

def get_image():
    """Current figure as a base64 PNG string."""
    buffer = io.BytesIO()
    plt.savefig(buffer, format='png', bbox_inches='tight')
    buffer.seek(0)
    image_png = buffer.getvalue()
    buffer.close()
    plt.close()
    return base64.b64encode(image_png).decode('utf-8')


def draw_trajectory(pred, gt=None, path=None, title="camera trajectory"):
    """Top-down (x, z) plot of camera centres. Saves to ``path`` when given, else returns base64 PNG."""
    plt.figure(figsize=(5, 5))
    ax = plt.gca()
    if gt is not None:
        centres = camera_centers(_as_se3(gt)).numpy()
        ax.plot(centres[:, 0], centres[:, 2], 'o-', color='gray', label='ground truth')
    centres = camera_centers(_as_se3(pred)).detach().numpy()
    ax.plot(centres[:, 0], centres[:, 2], 'o-', color='tab:blue', label='predicted')
    ax.scatter(centres[:1, 0], centres[:1, 2], color='red', zorder=5, label='frame 1')
    ax.set_xlabel('x')
    ax.set_ylabel('z')
    ax.set_aspect('equal', adjustable='datalim')
    ax.set_title(title)
    ax.legend(loc='best')
    if path is None:
        return get_image()
    plt.savefig(path, format='png', bbox_inches='tight')
    plt.close()
    return path
