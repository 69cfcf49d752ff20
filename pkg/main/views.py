"""Command handlers. Each ``cmd_*`` does one job and writes exactly one manifest.json into its output directory."""

import glob
import hashlib
import json
import logging
import os
import platform
import resource
import sys
import time
from datetime import datetime, timezone
from typing import Any, Optional

import pandas as pd
import torch
from pydantic import BaseModel, Field

from common.exceptions import ContractViolation, DataError
from common.numerics import deterministic_mode, seed_everything
from splatcam import __version__, settings

from .calculators import (PhotometricTarget, align_eval_poses, build_metric_report, draw_trajectory, psnr, ssim,
                          write_metric_report)
from .dualquat import check_unit, format_matrix_lines, format_pose_lines
from .forms import SceneConfig, apply_ablations, load_run_config, parse_run_config
from .gsplat import CameraModel, export_ply, import_ply, render, render_options, save_depth_png, save_png
from .models import load_checkpoint
from .scenegen import generate_scene, ingest_image_folder, is_scene_directory, load_scene, save_scene
from .trainer import (Trainer, evaluate_clip, pool_seeds, schedule_for, scoring_views, validate,
                      validation_clip)

logger = logging.getLogger(__name__)

PACKAGE_DIRS = ("main", "common", "splatcam")


# ==========================================
# 1. Manifest
# ==========================================

class RunManifest(BaseModel):
    command: str
    arguments: dict[str, Any] = Field(default_factory=dict)
    config: Optional[dict[str, Any]] = None
    config_digest: Optional[str] = None
    seed: Optional[int] = None
    code_version: str = ""
    code_digest: str = ""
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    started_at: str = ""
    wall_clock_seconds: float = 0.0
    deterministic: bool = True
    environment: dict[str, str] = Field(default_factory=dict)
    result: dict[str, Any] = Field(default_factory=dict)

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, settings.MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.model_dump_json(indent=2))
        return path


def code_digest():
    """sha256 over the package sources, in sorted path order."""
    digest = hashlib.sha256()
    for package in PACKAGE_DIRS:
        for path in sorted(glob.glob(os.path.join(settings.BASE_DIR, package, "**", "*.py"), recursive=True)):
            digest.update(os.path.relpath(path, settings.BASE_DIR).encode("utf-8"))
            with open(path, "rb") as handle:
                digest.update(handle.read())
    return digest.hexdigest()


def file_digest(path):
    """sha256 of a file, or of every file under a directory (relative names included)."""
    digest = hashlib.sha256()
    if os.path.isdir(path):
        for root, _, files in sorted(os.walk(path)):
            for name in sorted(files):
                full = os.path.join(root, name)
                digest.update(os.path.relpath(full, path).encode("utf-8"))
                with open(full, "rb") as handle:
                    digest.update(handle.read())
    else:
        with open(path, "rb") as handle:
            digest.update(handle.read())
    return digest.hexdigest()


def _start_manifest(command, arguments, *, config=None, seed=None):
    return RunManifest(
        command=command,
        arguments=arguments,
        config=config.model_dump(mode="json") if config is not None else None,
        config_digest=config.digest() if config is not None else None,
        seed=seed,
        code_version=__version__,
        code_digest=code_digest(),
        started_at=datetime.now(timezone.utc).isoformat(),
        deterministic=settings.DETERMINISTIC,
        environment={"python": platform.python_version(), "torch": torch.__version__,
                     "platform": platform.platform()},
    )


def _finish(manifest, directory, started):
    manifest.wall_clock_seconds = round(time.perf_counter() - started, 3)
    path = manifest.write(directory)
    logger.info("%s: manifest written to %s", manifest.command, path)
    return manifest


def output_directory(out_dir, command):
    path = out_dir or os.path.join(settings.OUTPUT_ROOT, command)
    os.makedirs(path, exist_ok=True)
    return path


def _config_or_default(config_path):
    return load_run_config(config_path) if config_path else parse_run_config({})


# ==========================================
# 2. generate
# ==========================================

def cmd_generate(seeds, out_dir=None, config_path=None):
    """Write one synthetic scene directory per seed."""
    started = time.perf_counter()
    config = _config_or_default(config_path)
    out_dir = output_directory(out_dir, "generate")
    manifest = _start_manifest("generate", {"seeds": list(seeds), "config_path": config_path}, config=config)
    with deterministic_mode(settings.DETERMINISTIC):
        for seed in seeds:
            scene = generate_scene(seed, config.scene)
            directory = os.path.join(out_dir, f"scene-{seed}")
            save_scene(scene, directory)
            manifest.outputs.append(directory)
    manifest.result = {"scenes": len(manifest.outputs)}
    return _finish(manifest, out_dir, started)


# ==========================================
# 3. train
# ==========================================

def cmd_train(config_path, out_dir=None, resume=None, seed=None, ablate=()):
    started = time.perf_counter()
    config = load_run_config(config_path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if ablate:
        updates["model"] = apply_ablations(config.model, ablate)
    if updates:
        config = config.model_copy(update=updates)
    if resume is not None and not os.path.isfile(resume):
        raise DataError(f"cannot resume: checkpoint {resume} does not exist")

    out_dir = output_directory(out_dir, "train")
    manifest = _start_manifest("train", {"config_path": config_path, "resume": resume, "seed": seed,
                                         "ablate": list(ablate)}, config=config, seed=config.seed)
    manifest.inputs[config_path] = file_digest(config_path)
    if resume is not None:
        manifest.inputs[resume] = file_digest(resume)

    with deterministic_mode(settings.DETERMINISTIC):
        trainer = Trainer(config, out_dir)
        state = trainer.train(resume=resume)
    manifest.outputs = sorted(glob.glob(os.path.join(trainer.checkpoint_dir, "*.pt")))
    manifest.outputs.append(trainer.metrics_path)
    manifest.result = dict(state.as_dict(), stages=[stage.name for stage in trainer.schedule.stages],
                           ablations=list(config.model.ablations))
    return _finish(manifest, out_dir, started)


# ==========================================
# 4. infer
# ==========================================

def _peak_memory_bytes():
    if torch.cuda.is_available():
        return int(torch.cuda.max_memory_allocated())
    scale = 1 if sys.platform == "darwin" else 1024
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * scale


def read_input_frames(path, height, width):
    """A scene directory or a folder of images -> FrameSequence."""
    if not os.path.exists(path):
        raise DataError(f"input {path} does not exist")
    if is_scene_directory(path):
        return load_scene(path).frames
    return ingest_image_folder(path, height, width)


def cmd_infer(checkpoint, input_path, out_dir=None, views=None):
    """One forward pass over ``views`` frames: gaussians.ply, poses.txt, poses_matrix.txt."""
    started = time.perf_counter()
    model, payload = load_checkpoint(checkpoint)
    config = model.config
    frames = read_input_frames(input_path, config.image_height, config.image_width)
    views = views or min(frames.count, config.max_views)
    if views > config.max_views:
        raise ContractViolation(f"{views} views requested but the model was configured for at most "
                                f"max_views={config.max_views}")
    if views > frames.count:
        raise DataError(f"{input_path} holds {frames.count} frames, {views} requested")
    frames = frames.select(list(range(views)))

    out_dir = output_directory(out_dir, "infer")
    manifest = _start_manifest("infer", {"checkpoint": checkpoint, "input": input_path, "views": views},
                               seed=payload.get("seed"))
    manifest.config = {"model": config.model_dump(mode="json"), "phase": payload.get("phase")}
    manifest.inputs = {checkpoint: file_digest(checkpoint), input_path: file_digest(input_path)}

    images = frames.images[None].to(torch.float32)
    intrinsics = frames.intrinsics[None].to(torch.float32) if frames.intrinsics is not None else None
    if intrinsics is None:
        logger.info("no intrinsics supplied; running without intrinsics conditioning")
    model.eval()
    with deterministic_mode(settings.DETERMINISTIC), torch.no_grad():
        tic = time.perf_counter()
        output = model(images, intrinsics, phase="nvs")
        latency = time.perf_counter() - tic
    logger.info("%d-view inference took %.1f ms", views, 1000.0 * latency)

    gaussians = output.gaussians[0]
    ply_path = os.path.join(out_dir, "gaussians.ply")
    with open(ply_path, "wb") as handle:
        handle.write(export_ply(gaussians))
    pose_path = os.path.join(out_dir, "poses.txt")
    with open(pose_path, "w", encoding="utf-8") as handle:
        handle.write(format_pose_lines(output.poses[0], frames.frame_indices))
    matrix_path = os.path.join(out_dir, "poses_matrix.txt")
    with open(matrix_path, "w", encoding="utf-8") as handle:
        handle.write(format_matrix_lines(output.poses[0]))

    manifest.outputs = [ply_path, pose_path, matrix_path]
    manifest.result = {"gaussians": len(gaussians), "views": views, "latency_seconds": round(latency, 6),
                       "peak_memory_bytes": _peak_memory_bytes()}
    return _finish(manifest, out_dir, started)


# ==========================================
# 5. render
# ==========================================

def parse_camera_spec(text):
    """Lines ``fx fy cx cy | q_r(4) q_d(4)``; '#' starts a comment. Returns [(intrinsics (4,), dq (8,))]."""
    cameras = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.count("|") != 1:
            raise DataError(f"camera spec line {number}: expected 'fx fy cx cy | q_r(4) q_d(4)'")
        left, right = line.split("|")
        try:
            intrinsics = [float(v) for v in left.split()]
            pose = [float(v) for v in right.split()]
        except ValueError as exc:
            raise DataError(f"camera spec line {number}: {exc}") from exc
        if len(intrinsics) != 4 or len(pose) != 8:
            raise DataError(f"camera spec line {number}: need 4 intrinsics and 8 pose values, "
                            f"got {len(intrinsics)} and {len(pose)}")
        dq = torch.tensor(pose, dtype=torch.float64)
        try:
            check_unit(dq, f"camera {number} pose")
        except ContractViolation as exc:
            raise DataError(f"camera spec line {number}: {exc}") from exc
        cameras.append((torch.tensor(intrinsics, dtype=torch.float64), dq))
    if not cameras:
        raise DataError("camera spec lists no cameras")
    return cameras


def format_camera_spec(intrinsics, poses):
    lines = []
    for k, dq in zip(intrinsics.tolist(), poses.tolist()):
        lines.append(" ".join(f"{v:.17g}" for v in k) + " | " + " ".join(f"{v:.17g}" for v in dq))
    return "\n".join(lines) + "\n"


def cmd_render(ply_path, camera_spec_path, out_dir=None, height=None, width=None, render_config=None):
    """RGB PNG and 16-bit depth PNG per camera in the spec."""
    started = time.perf_counter()
    try:
        with open(ply_path, "rb") as handle:
            gaussians = import_ply(handle.read())
        with open(camera_spec_path, "r", encoding="utf-8") as handle:
            cameras = parse_camera_spec(handle.read())
    except OSError as exc:
        raise DataError(f"cannot read render inputs: {exc}") from exc
    if height is None or width is None:
        if gaussians.image_size is None:
            raise ContractViolation("the PLY carries no image size; pass --height and --width")
        height, width = gaussians.image_size

    out_dir = output_directory(out_dir, "render")
    manifest = _start_manifest("render", {"ply": ply_path, "cameras": camera_spec_path, "height": height,
                                          "width": width})
    manifest.inputs = {ply_path: file_digest(ply_path), camera_spec_path: file_digest(camera_spec_path)}
    if render_config is not None:
        manifest.config = {"render": render_config.model_dump(mode="json")}
    options = render_options(render_config)
    gaussians = gaussians.detach()
    dtype = gaussians.means.dtype
    with torch.no_grad():
        for index, (intrinsics, dq) in enumerate(cameras):
            camera = CameraModel.from_pose(dq.to(dtype), intrinsics.to(dtype), height, width)
            result = render(gaussians, camera, **options)
            rgb_path = os.path.join(out_dir, f"rgb_{index:03d}.png")
            depth_path = os.path.join(out_dir, f"depth_{index:03d}.png")
            save_png(result.image, rgb_path)
            save_depth_png(result.depth, depth_path)
            manifest.outputs += [rgb_path, depth_path]
    manifest.result = {"cameras": len(cameras), "gaussians": len(gaussians)}
    return _finish(manifest, out_dir, started)


# ==========================================
# 6. eval
# ==========================================

def cmd_eval(checkpoint, seeds, out_dir=None, views=None, align="none", config_path=None, photometric_steps=30):
    """Held-out synthetic scenes -> metrics.json / metrics.csv plus one trajectory figure per scene."""
    started = time.perf_counter()
    model, payload = load_checkpoint(checkpoint)
    config = _config_or_default(config_path)
    scene_config = config.scene
    if (scene_config.image_height, scene_config.image_width) != (model.config.image_height,
                                                                 model.config.image_width):
        scene_config = SceneConfig.model_validate(dict(scene_config.model_dump(), image_height=model.config.image_height,
                                                       image_width=model.config.image_width))
    views = views or model.config.max_views
    if views > model.config.max_views:
        raise ContractViolation(f"{views} views requested but the model was configured for at most "
                                f"max_views={model.config.max_views}")

    out_dir = output_directory(out_dir, "eval")
    manifest = _start_manifest("eval", {"checkpoint": checkpoint, "seeds": list(seeds), "views": views,
                                        "align": align, "config_path": config_path},
                               seed=payload.get("seed"))
    manifest.config = {"model": model.config.model_dump(mode="json"), "scene": scene_config.model_dump(mode="json"),
                       "render": config.render.model_dump(mode="json")}
    manifest.inputs = {checkpoint: file_digest(checkpoint)}

    rows = []
    trajectory_align = "none" if align == "none" else "similarity"
    with deterministic_mode(settings.DETERMINISTIC):
        seed_everything(payload.get("seed", 0))
        for seed in seeds:
            clip = validation_clip(seed, views, scene_config)
            row, _, poses = evaluate_clip(model, clip, config.render, align=trajectory_align, distill=True)
            row.update(seed=seed, views=views, align=align, lpips=None)
            if align == "photometric":
                row.update(_photometric_rows(model, clip, config.render, photometric_steps))
            figure = os.path.join(out_dir, f"trajectory-{seed}.png")
            draw_trajectory(poses.double(), clip.poses, path=figure, title=f"scene {seed}")
            manifest.outputs.append(figure)
            rows.append(row)

    digest = (payload.get("extra") or {}).get("config_digest")
    report = build_metric_report(rows, digest,
                                 checkpoint=os.path.basename(checkpoint), views=views, align=align)
    json_path, csv_path = write_metric_report(report, out_dir)
    manifest.outputs += [json_path, csv_path]
    manifest.result = report["mean"]
    return _finish(manifest, out_dir, started)


def _photometric_rows(model, clip, render_config, steps):
    """Refine each target pose against its image with the predicted Gaussians frozen, then re-score."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        output = model(clip.frames.images[None].to(dtype), clip.frames.intrinsics[None].to(dtype))
    gaussians = output.gaussians[0].detach()
    images, poses, intrinsics, _ = scoring_views(clip)
    targets = images.permute(0, 2, 3, 1).to(dtype)
    target = PhotometricTarget(gaussians, targets, intrinsics.to(dtype), render_config, steps=steps)
    result = align_eval_poses(poses.to(dtype), mode="photometric", photometric=target)
    options = render_options(render_config)
    height, width = clip.frames.height, clip.frames.width
    scores_psnr, scores_ssim = [], []
    with torch.no_grad():
        for pose, k, image in zip(result.poses, target.intrinsics, targets):
            rendered = render(gaussians, CameraModel.from_pose(pose.to(dtype), k, height, width), **options).image
            scores_psnr.append(psnr(rendered, image))
            scores_ssim.append(ssim(rendered, image))
    return {
        "psnr_aligned": sum(scores_psnr) / len(scores_psnr),
        "ssim_aligned": sum(scores_ssim) / len(scores_ssim),
        "photometric_mse_start": sum(h[0] for h in result.history) / len(result.history),
        "photometric_mse_end": sum(h[-1] for h in result.history) / len(result.history),
    }


def load_metric_table(path):
    """metrics.csv -> DataFrame, for notebooks and ablation comparisons."""
    if not os.path.isfile(path):
        raise DataError(f"{path} does not exist")
    return pd.read_csv(path)


# ==========================================
# 7. selftest
# ==========================================

def cmd_selftest(suites=None, out_dir=None):
    from .selftest import run_suites

    started = time.perf_counter()
    out_dir = output_directory(out_dir, "selftest")
    manifest = _start_manifest("selftest", {"suites": list(suites or [])})
    with deterministic_mode(True):
        summary = run_suites(suites)
    report_path = os.path.join(out_dir, "selftest.json")
    with open(report_path, "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
    manifest.outputs = [report_path]
    manifest.result = {"passed": summary["passed"],
                       "failed": {name: s["failed"] for name, s in summary["suites"].items() if s["failed"]}}
    return _finish(manifest, out_dir, started)


# ==========================================
# 8. compare
# ==========================================

def held_in_seeds(config):
    """Training scenes of a pooled run, else the configured validation seeds."""
    if config.train.scene_pool:
        return pool_seeds(config.seed, config.train.scene_pool)
    return list(config.train.validation_seeds)


def cmd_compare(config_path, ablations=("no_cna", "no_modulation"), out_dir=None, seed=None):
    """Train the full model and each single ablation on the same seed, score them on the same scenes.

    Writes comparison.json / comparison.csv (one row per variant) and reports whether the full model's
    target-view PSNR is strictly above every ablation's.
    """
    started = time.perf_counter()
    config = load_run_config(config_path)
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    ablations = list(ablations)
    for name in ablations:
        apply_ablations(config.model, [name])
    out_dir = output_directory(out_dir, "compare")
    manifest = _start_manifest("compare", {"config_path": config_path, "ablations": ablations, "seed": seed},
                               config=config, seed=config.seed)
    manifest.inputs[config_path] = file_digest(config_path)

    seeds = held_in_seeds(config)
    views = schedule_for(config.train).views
    rows = []
    for variant in ["full"] + ablations:
        variant_config = config if variant == "full" else config.model_copy(
            update={"model": apply_ablations(config.model, [variant])})
        with deterministic_mode(settings.DETERMINISTIC):
            trainer = Trainer(variant_config, os.path.join(out_dir, variant))
            trainer.train()
            summary = validate(trainer.model, seeds, views, config.scene, config.render)
        logger.info("variant %s: psnr %s, ate %s", variant, summary["psnr"], summary["ate"])
        rows.append(dict(summary, variant=variant, steps=trainer.state.step))
        manifest.outputs.append(trainer.metrics_path)

    table = pd.DataFrame(rows).set_index("variant")
    full = table.loc["full", "psnr"]
    margins = {name: float(full - table.loc[name, "psnr"]) for name in ablations}
    report = {
        "seed": config.seed,
        "views": views,
        "scene_seeds": seeds,
        "variants": rows,
        "psnr_margin": margins,
        "full_is_best": all(margin > 0.0 for margin in margins.values()),
    }
    json_path = os.path.join(out_dir, "comparison.json")
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
    csv_path = os.path.join(out_dir, "comparison.csv")
    table.to_csv(csv_path)
    manifest.outputs += [json_path, csv_path]
    if not report["full_is_best"]:
        logger.warning("full model does not beat every ablation on psnr: %s", margins)
    manifest.result = {"psnr": {row["variant"]: row["psnr"] for row in rows}, "psnr_margin": margins,
                       "full_is_best": report["full_is_best"]}
    return _finish(manifest, out_dir, started)
