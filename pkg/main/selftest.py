"""Property suites behind ``manage.py selftest``.

Each suite returns a list of CheckResult; a suite never raises for a failed property, it reports it.
"""

import logging
import time
from dataclasses import asdict, dataclass

import torch

from common.exceptions import ContractViolation
from common.numerics import (PRIMITIVES, check_primitive, deterministic_mode, grad_check_parameters,
                             line_search_descent, verification_mode)

from . import attention, dualquat, gsplat, losses  # noqa: F401  (register primitives)
from .attention import DecoderBlock, TokenState, build_blocked_causal_mask
from .calculators import psnr
from .dualquat import (camera_loss, canonicalize_sign, check_unit, compose_se3, dq_conjugate, dq_mul,
                       dq_to_se3, identity_dq, invert_se3, normalize_raw_dq, quat_mul, random_unit_dq,
                       rotmat_to_quat, se3_to_dq, with_identity_first)
from .forms import ModelConfig, RenderConfig, SceneConfig
from .gsplat import CameraModel, GaussianSet, compositing_weights, render
from .losses import total_loss
from .models import SplatCamModel
from .scenegen import generate_scene, oracle_gaussians, sample_training_clip

logger = logging.getLogger(__name__)

SUITES = ("gradients", "mask", "zero_init", "dualquat", "renderer")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def as_dict(self):
        return asdict(self)


def tiny_model_config(**overrides):
    values = dict(image_height=16, image_width=16, patch_size=8, width=16, encoder_depth=1, decoder_depth=1,
                  num_heads=2, mlp_ratio=2.0, max_views=4)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_scene_config(**overrides):
    values = dict(image_height=16, image_width=16, num_frames=4, min_primitives=20, max_primitives=40,
                  num_targets=1)
    values.update(overrides)
    return SceneConfig(**values)


# ==========================================
# gradients
# ==========================================

def end_to_end_check(seed=0, max_elements=3):
    """Central-difference check of the 2-frame 16x16 nvs loss with respect to every model parameter.

    ``max_elements`` caps the probes per parameter tensor.
    """
    with verification_mode():
        torch.manual_seed(seed)
        model = SplatCamModel(tiny_model_config()).double()
        scene = generate_scene(seed, tiny_scene_config())
        clip = sample_training_clip(scene, 2, 2, start=0)
        images = clip.frames.images[None].double()
        intrinsics = clip.frames.intrinsics[None].double()
        render_config = RenderConfig(cutoff_sigma=None)

        def closure():
            output = model(images, intrinsics, phase="nvs")
            return total_loss(output, [clip], "nvs", render_config=render_config).total

        generator = torch.Generator().manual_seed(seed)
        return grad_check_parameters(closure, model.parameters(), name="end_to_end_nvs_loss", generator=generator,
                                     max_elements=max_elements)


def decoder_block_check(seed=0, frames=2, max_elements=6):
    """Central-difference check of one decoder block's visual and camera outputs against all its parameters.

    Parameters are jittered away from their zero-initialised modulation so every path carries gradient.
    """
    config = tiny_model_config()
    with verification_mode():
        generator = torch.Generator().manual_seed(seed)
        block = DecoderBlock(config).double()
        with torch.no_grad():
            for parameter in block.parameters():
                parameter.add_(0.1 * torch.randn(parameter.shape, generator=generator, dtype=torch.float64))
        tokens = config.tokens_per_frame
        visual = torch.randn(1, frames, tokens, config.width, generator=generator, dtype=torch.float64)
        camera = torch.randn(1, frames, config.width, generator=generator, dtype=torch.float64)
        mask = build_blocked_causal_mask(frames, tokens)

        def closure():
            state = block(TokenState(visual, camera, config.grid), mask)
            return torch.cat((state.visual.reshape(-1), state.camera.reshape(-1)))

        return grad_check_parameters(closure, block.parameters(), name="decoder_block", generator=generator,
                                     max_elements=max_elements)


def run_gradients(seeds=range(10)):
    results = []
    for name in sorted(PRIMITIVES):
        reports = check_primitive(name, seeds)
        worst = max(report.max_relative_error for report in reports)
        results.append(CheckResult("gradients", name, all(r.passed for r in reports),
                                   f"max rel err {worst:.2e} over {len(reports)} seeds"))
    for report in (decoder_block_check(), end_to_end_check()):
        results.append(CheckResult("gradients", report.op_name, report.passed,
                                   f"max rel err {report.max_relative_error:.2e} over {report.element_count} elements"))
    return results


# ==========================================
# mask
# ==========================================

def expected_mask_row(row, frames, tokens_per_frame):
    block = 1 + tokens_per_frame
    if row % block:
        return torch.ones(frames * block, dtype=torch.bool)
    frame = row // block
    return torch.arange(frames * block) // block <= frame


def run_mask(max_frames=8, max_tokens=16, seed=0):
    mismatches = []
    for frames in range(1, max_frames + 1):
        for tokens in range(1, max_tokens + 1):
            mask = build_blocked_causal_mask(frames, tokens)
            for row in range(mask.shape[0]):
                if not torch.equal(mask[row], expected_mask_row(row, frames, tokens)):
                    mismatches.append((frames, tokens, row))
                    break
    results = [CheckResult("mask", "blocked_causal_layout", not mismatches,
                           f"first mismatch (T, L, row) = {mismatches[0]}" if mismatches else "")]

    for label, sublayer in (("vca_sublayer", "vca"), ("decoder_block", None)):
        changed = camera_causality_violation(sublayer, seed=seed)
        results.append(CheckResult("mask", f"camera_causality_{label}", changed is None,
                                   "" if changed is None else f"camera token of frame {changed} moved"))
    return results


def camera_causality_violation(sublayer=None, frames=4, seed=0):
    """Perturb the last frame; return the first earlier frame whose camera output changed, else None."""
    config = tiny_model_config()
    with deterministic_mode(True):
        generator = torch.manual_seed(seed)
        block = DecoderBlock(config).double()
        tokens = config.tokens_per_frame
        visual = torch.randn(1, frames, tokens, config.width, generator=generator, dtype=torch.float64)
        camera = torch.randn(1, frames, config.width, generator=generator, dtype=torch.float64)
        mask = build_blocked_causal_mask(frames, tokens)
        module = getattr(block, sublayer) if sublayer else block

        with torch.no_grad():
            before = module(TokenState(visual, camera, config.grid), mask).camera
            visual2, camera2 = visual.clone(), camera.clone()
            visual2[:, -1] += torch.randn(tokens, config.width, generator=generator, dtype=torch.float64)
            camera2[:, -1] += 1.0
            after = module(TokenState(visual2, camera2, config.grid), mask).camera
    for frame in range(frames - 1):
        if not torch.equal(before[:, frame], after[:, frame]):
            return frame
    return None


# ==========================================
# zero_init
# ==========================================

def modulation_outputs_identical(seed=0, frames=3):
    outputs = []
    for modulation in (True, False):
        torch.manual_seed(seed)
        model = SplatCamModel(tiny_model_config(modulation=modulation))
        generator = torch.Generator().manual_seed(seed + 1)
        images = torch.rand(1, frames, 3, 16, 16, generator=generator)
        intrinsics = torch.tensor([[14.0, 14.0, 8.0, 8.0]]).expand(1, frames, 4)
        with torch.no_grad():
            outputs.append(model(images, intrinsics, phase="distill"))
    a, b = outputs
    fields = {
        "means": (a.gaussians.means, b.gaussians.means),
        "opacities": (a.gaussians.opacities, b.gaussians.opacities),
        "scales": (a.gaussians.scales, b.gaussians.scales),
        "colors": (a.gaussians.colors, b.gaussians.colors),
        "poses": (a.poses, b.poses),
        "pointmap": (a.pointmap, b.pointmap),
    }
    return [name for name, (x, y) in fields.items() if not torch.equal(x, y)]


def run_zero_init(seed=0):
    with deterministic_mode(True):
        differing = modulation_outputs_identical(seed)
    return [CheckResult("zero_init", "modulation_on_off_bit_identical", not differing,
                        f"outputs differ: {differing}" if differing else "")]


# ==========================================
# dualquat
# ==========================================

def toy_pose_fit(seed=0, frames=3, steps=500):
    """Fit raw camera-head outputs to a ground-truth pose set by descending the camera loss."""
    generator = torch.Generator().manual_seed(seed)
    gt = with_identity_first(random_unit_dq(generator, frames - 1, translation_scale=0.5))
    raw = (gt[1:] + 0.05 * torch.randn(frames - 1, 8, generator=generator, dtype=torch.float64)).requires_grad_(True)

    def loss_fn():
        return camera_loss(with_identity_first(normalize_raw_dq(raw)), gt)

    return line_search_descent(loss_fn, [raw], steps)


def run_dualquat(seed=0, count=64):
    results = []
    with verification_mode():
        generator = torch.Generator().manual_seed(seed)
        a = random_unit_dq(generator, count)
        b = random_unit_dq(generator, count)

        product = dq_mul(a, b, check=False)
        try:
            check_unit(product, "product")
            results.append(CheckResult("dualquat", "closure", True))
        except ValueError as exc:
            results.append(CheckResult("dualquat", "closure", False, str(exc)))

        identity = identity_dq(count, dtype=torch.float64)
        error = float((canonicalize_sign(dq_mul(a, dq_conjugate(a), check=False)) - identity).abs().max())
        results.append(CheckResult("dualquat", "conjugate_product_identity", error < 1e-9, f"max err {error:.2e}"))

        error = float((se3_to_dq(dq_to_se3(a)) - canonicalize_sign(a)).abs().max())
        results.append(CheckResult("dualquat", "se3_round_trip", error < 1e-6, f"max err {error:.2e}"))

        pose_a, pose_b = dq_to_se3(a), dq_to_se3(b)
        composed = se3_to_dq(compose_se3(pose_a, pose_b))
        error = float((composed - canonicalize_sign(product)).abs().max())
        results.append(CheckResult("dualquat", "product_matches_se3_composition", error < 1e-6,
                                   f"max err {error:.2e}"))

        gt = with_identity_first(random_unit_dq(generator, 4, translation_scale=0.5))
        at_truth = float(camera_loss(gt, gt))
        results.append(CheckResult("dualquat", "loss_at_truth", at_truth < 1e-12, f"loss {at_truth:.2e}"))

        pred = with_identity_first(random_unit_dq(generator, 4, translation_scale=0.5))
        flipped = torch.cat((pred[:1], -pred[1:]), dim=0)
        gap = abs(float(camera_loss(pred, gt)) - float(camera_loss(flipped, gt)))
        results.append(CheckResult("dualquat", "double_cover_insensitive", gap < 1e-12, f"gap {gap:.2e}"))

        error = float((invert_se3(invert_se3(pose_a)).translation - pose_a.translation).abs().max())
        results.append(CheckResult("dualquat", "inverse_involution", error < 1e-9, f"max err {error:.2e}"))

        history = toy_pose_fit(seed)
        results.append(CheckResult("dualquat", "toy_pose_fit", history[-1] < 1e-6,
                                   f"loss {history[0]:.2e} -> {history[-1]:.2e} in {len(history) - 1} steps"))
    return results


# ==========================================
# renderer
# ==========================================

def oracle_round_trip_psnr(seed=0):
    scene = generate_scene(seed, SceneConfig(image_height=32, image_width=32, num_frames=6, num_targets=1))
    values = []
    for view in (0, scene.num_frames - 1):
        gaussians = oracle_gaussians(scene, view, dtype=torch.float64)
        camera = CameraModel.from_pose(scene.poses[view], scene.frames.intrinsics[view], 32, 32)
        image = render(gaussians, camera).image
        values.append(psnr(image, scene.frames.images[view].permute(1, 2, 0)))
    return min(values)


def random_gaussians(generator, count, dtype=torch.float64):
    means = torch.randn(count, 3, generator=generator, dtype=dtype) * 0.5
    means[:, 2] += 3.0
    rotations = torch.randn(count, 4, generator=generator, dtype=dtype)
    rotations = rotations / rotations.norm(dim=-1, keepdim=True)
    return GaussianSet(
        means=means,
        opacities=0.1 + 0.8 * torch.rand(count, generator=generator, dtype=dtype),
        rotations=rotations,
        scales=0.05 + 0.2 * torch.rand(count, 3, generator=generator, dtype=dtype),
        colors=torch.rand(count, 3, generator=generator, dtype=dtype),
    )


def rigid_motion_error(seed=0, size=16):
    """Move Gaussians and camera by the same rigid motion; the image must not change."""
    generator = torch.Generator().manual_seed(seed)
    gaussians = random_gaussians(generator, 12)
    intrinsics = torch.tensor([14.0, 14.0, size / 2.0, size / 2.0], dtype=torch.float64)
    camera = CameraModel.identity(intrinsics, size, size, dtype=torch.float64)

    motion = dq_to_se3(random_unit_dq(generator, translation_scale=0.7))
    quat = rotmat_to_quat(motion.rotation)
    moved = GaussianSet(
        means=gaussians.means @ motion.rotation.T + motion.translation,
        opacities=gaussians.opacities,
        rotations=quat_mul(quat.expand_as(gaussians.rotations), gaussians.rotations),
        scales=gaussians.scales,
        colors=gaussians.colors,
    )
    moved_camera = CameraModel(intrinsics, compose_se3(camera.pose, invert_se3(motion)), size, size)
    a = render(gaussians, camera).image
    b = render(moved, moved_camera).image
    return float((a - b).abs().max())


def zero_opacity_is_noop(seed=0, size=12):
    generator = torch.Generator().manual_seed(seed)
    gaussians = random_gaussians(generator, 8)
    extra = random_gaussians(generator, 5)
    merged = GaussianSet(
        means=torch.cat((gaussians.means, extra.means)),
        opacities=torch.cat((gaussians.opacities, torch.zeros(5, dtype=torch.float64))),
        rotations=torch.cat((gaussians.rotations, extra.rotations)),
        scales=torch.cat((gaussians.scales, extra.scales)),
        colors=torch.cat((gaussians.colors, extra.colors)),
    )
    camera = CameraModel.identity(torch.tensor([10.0, 10.0, size / 2.0, size / 2.0]), size, size,
                                  dtype=torch.float64)
    a, b = render(gaussians, camera), render(merged, camera)
    return torch.equal(a.image, b.image) and torch.equal(a.alpha, b.alpha) and torch.equal(a.depth, b.depth)


def compositing_weights_bounded(seed=0):
    generator = torch.Generator().manual_seed(seed)
    alphas = 0.999 * torch.rand(64, 32, generator=generator, dtype=torch.float64)
    weights = compositing_weights(alphas)
    return bool((weights >= 0).all() and (weights <= 1).all() and (weights.sum(-1) <= 1 + 1e-12).all())


def run_renderer(seed=0):
    results = []
    value = oracle_round_trip_psnr(seed)
    results.append(CheckResult("renderer", "oracle_round_trip", value > 30.0, f"psnr {value:.2f} dB"))
    error = rigid_motion_error(seed)
    results.append(CheckResult("renderer", "rigid_motion_equivariance", error < 1e-5, f"max err {error:.2e}"))
    results.append(CheckResult("renderer", "zero_opacity_noop", zero_opacity_is_noop(seed)))
    results.append(CheckResult("renderer", "compositing_weights_bounded", compositing_weights_bounded(seed)))
    return results


RUNNERS = {
    "gradients": run_gradients,
    "mask": run_mask,
    "zero_init": run_zero_init,
    "dualquat": run_dualquat,
    "renderer": run_renderer,
}


def run_suites(names=None):
    """Run the named suites (all by default). Returns a JSON-ready summary."""
    names = list(names or SUITES)
    unknown = [name for name in names if name not in RUNNERS]
    if unknown:
        raise ContractViolation(f"unknown self-test suite(s) {unknown}; available: {', '.join(SUITES)}")
    summary = {"suites": {}, "passed": True}
    for name in names:
        started = time.perf_counter()
        try:
            results = RUNNERS[name]()
        except Exception as exc:
            logger.exception("suite %s crashed", name)
            results = [CheckResult(name, "suite", False, f"{type(exc).__name__}: {exc}")]
        elapsed = time.perf_counter() - started
        failed = [r.name for r in results if not r.passed]
        for result in results:
            log = logger.info if result.passed else logger.error
            log("%s/%s: %s %s", name, result.name, "ok" if result.passed else "FAILED", result.detail)
        summary["suites"][name] = {
            "passed": not failed,
            "failed": failed,
            "seconds": round(elapsed, 3),
            "checks": [r.as_dict() for r in results],
        }
        summary["passed"] = summary["passed"] and not failed
    return summary
