"""Staged training: 3D-prior distillation, two-view NVS, then progressive growth to N views."""

import functools
import json
import logging
import math
import os
import queue
import threading
from dataclasses import asdict, dataclass, field

import torch

from common.exceptions import ContractViolation, NumericalFault, ScheduleError
from common.numerics import forward_backward, seed_everything
from splatcam import settings

from .calculators import confidence_auc, is_normalizable, pointmap_error, pose_metrics, psnr, ssim
from .forms import StageSpec
from .gsplat import render_views
from .losses import total_loss
from .models import SplatCamModel, read_checkpoint, save_checkpoint
from .scenegen import derive_seed, generate_scene, oracle_gaussians, sample_training_clip

logger = logging.getLogger(__name__)

SUPPORTED_VIEW_COUNTS = (2, 4, 8)
TRAIN_STATE_NAME = "train_state.json"

# (name, phase, views, interval start, interval end, budget key)
DEFAULT_STAGES = [
    ("distill", "distill", 2, 1, 8, "distill"),
    ("nvs2", "nvs", 2, 1, 8, "nvs2"),
    ("nvs4", "nvs", 4, 2, 4, "nvs4"),
    ("nvs8", "nvs", 8, 1, 2, "nvs8"),
]


# ==========================================
# 1. Schedule
# ==========================================

@dataclass
class TrainingSchedule:
    stages: list

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.stages:
            raise ScheduleError("a schedule needs at least one stage")
        nvs_views = [stage.views for stage in self.stages if stage.phase == "nvs"]
        if any(b < a for a, b in zip(nvs_views, nvs_views[1:])):
            raise ScheduleError(f"nvs view counts must be nondecreasing, got {nvs_views}")
        for previous, stage in zip(self.stages, self.stages[1:]):
            if stage.initial_span > previous.final_span:
                raise ScheduleError(
                    f"stage '{stage.name}' starts with span {stage.initial_span}, wider than the final span "
                    f"{previous.final_span} of stage '{previous.name}'")
        return self

    @property
    def views(self):
        return self.stages[-1].views

    @property
    def total_steps(self):
        return sum(stage.steps for stage in self.stages)

    @property
    def max_span(self):
        return max(max(stage.initial_span, stage.final_span) for stage in self.stages)

    def locate(self, step):
        """Global step -> (stage index, step within that stage)."""
        if step < 0:
            raise ContractViolation("step must be non-negative")
        offset = 0
        for index, stage in enumerate(self.stages):
            if step < offset + stage.steps:
                return index, step - offset
            offset += stage.steps
        return len(self.stages), 0

    def stage_start(self, index):
        return sum(stage.steps for stage in self.stages[:index])


def build_default_schedule(train_config):
    """distill@2, nvs@2, nvs@4, nvs@8 truncated at ``train_config.views``."""
    views = train_config.views
    if views not in SUPPORTED_VIEW_COUNTS:
        raise ScheduleError(f"view count must be one of {SUPPORTED_VIEW_COUNTS}, got {views}")
    stages = []
    for name, phase, stage_views, start, end, key in DEFAULT_STAGES:
        if stage_views > views:
            break
        stages.append(StageSpec(name=name, phase=phase, views=stage_views, interval_start=start,
                                interval_end=end, steps=train_config.budgets[key], lr=train_config.lr))
    return TrainingSchedule(stages)


def schedule_for(train_config):
    if train_config.stages:
        return TrainingSchedule(list(train_config.stages))
    return build_default_schedule(train_config)


def lr_factor(step, steps, warmup_fraction):
    """Linear warmup over the first ``warmup_fraction`` of a stage, then cosine decay to zero."""
    warmup = int(math.ceil(warmup_fraction * steps))
    if warmup and step < warmup:
        return (step + 1) / warmup
    remaining = max(steps - warmup, 1)
    progress = min((step - warmup) / remaining, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


# ==========================================
# 2. Data
# ==========================================

@functools.lru_cache(maxsize=64)
def _cached_scene(seed, scene_config):
    return generate_scene(seed, scene_config)


def pool_seeds(seed, pool):
    """Seeds of the fixed training scenes when a run draws from a pool of ``pool`` scenes."""
    return [derive_seed(seed, "pool", index) for index in range(pool)]


def scene_seed(seed, step, element, pool=None):
    if pool:
        return pool_seeds(seed, pool)[derive_seed(seed, "pick", step, element) % pool]
    return derive_seed(seed, "scene", step, element)


def make_batch(seed, step, schedule, scene_config, batch_size, pool=None):
    """The batch for global ``step``: a pure function of (seed, step) and the configuration."""
    stage_index, stage_step = schedule.locate(step)
    stage = schedule.stages[stage_index]
    interval = stage.interval_at(stage_step)
    generator = torch.Generator().manual_seed(derive_seed(seed, "clip", step))
    batch = []
    for element in range(batch_size):
        scene = _cached_scene(scene_seed(seed, step, element, pool), scene_config)
        batch.append(sample_training_clip(scene, stage.views, interval, generator=generator))
    return batch


class ClipProducer:
    """Bounded background producer of training batches for steps ``start``, ``start+1``, ..."""

    _DONE = object()

    def __init__(self, seed, schedule, scene_config, batch_size, *, pool=None, start=0, queue_size=8):
        self.seed = seed
        self.schedule = schedule
        self.scene_config = scene_config
        self.batch_size = batch_size
        self.pool = pool
        self.next_step = start
        self._queue = queue.Queue(maxsize=queue_size)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(start,), name="clip-producer", daemon=True)

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, start):
        try:
            for step in range(start, self.schedule.total_steps):
                batch = make_batch(self.seed, step, self.schedule, self.scene_config, self.batch_size, self.pool)
                if not self._put((step, batch)):
                    return
        except Exception as exc:  # handed to the consumer
            self._put((None, exc))
            return
        self._put((None, self._DONE))

    def start(self):
        self._thread.start()
        return self

    def get(self):
        step, batch = self._queue.get()
        if step is None:
            if batch is self._DONE:
                raise StopIteration
            raise batch
        if step != self.next_step:
            raise ContractViolation(f"producer handed out step {step}, expected {self.next_step}")
        self.next_step += 1
        return batch

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()
        return False


def stack_batch(batch, dtype):
    images = torch.stack([sample.frames.images for sample in batch]).to(dtype)
    intrinsics = torch.stack([sample.frames.intrinsics for sample in batch]).to(dtype)
    return images, intrinsics


# ==========================================
# 3. State
# ==========================================

@dataclass
class TrainState:
    step: int = 0                 # next global step to run
    stage_index: int = 0
    best: dict = field(default_factory=dict)
    last_loss: float = float("nan")

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in ("step", "stage_index", "best", "last_loss") if key in data})


def parameter_norms(model):
    return {name: float(p.detach().norm()) for name, p in model.named_parameters()}


def _gradient_norms(model):
    return {name: float(p.grad.detach().norm()) for name, p in model.named_parameters() if p.grad is not None}


# ==========================================
# 4. Training loop
# ==========================================

class Trainer:
    """Drives one run: stages in order, metric log, checkpoints and periodic validation."""

    def __init__(self, run_config, output_dir, *, model=None, perceptual=None, dtype=torch.float32):
        self.config = run_config
        self.output_dir = output_dir
        self.schedule = schedule_for(run_config.train)
        if self.schedule.views > run_config.model.max_views:
            raise ScheduleError(
                f"schedule ends at {self.schedule.views} views but the model supports {run_config.model.max_views}")
        if self.schedule.max_span > run_config.scene.num_frames - 1:
            raise ScheduleError(
                f"schedule needs clips spanning {self.schedule.max_span} frames; scenes have "
                f"{run_config.scene.num_frames}")
        self.dtype = dtype
        if model is None:
            seed_everything(run_config.seed)
            model = SplatCamModel(run_config.model)
        self.model = model.to(dtype)
        self.perceptual = perceptual
        self.state = TrainState()
        self.optimizer = None
        self._active_stage = None
        self.metrics_path = os.path.join(output_dir, settings.METRICS_LOG_NAME)
        self.checkpoint_dir = os.path.join(output_dir, "checkpoints")

    # ---------- optimizer ----------

    def _enter_stage(self, index, *, fresh):
        stage = self.schedule.stages[index]
        previous = self.schedule.stages[index - 1] if index else None
        if fresh and previous is not None and previous.phase == "distill" and stage.phase == "nvs" \
                and self.config.model.seed_centers_from_pointmap:
            self.model.seed_centers_from_pointmap()
        self.model.freeze_distill_heads(stage.phase != "distill")
        trainable = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(trainable, lr=stage.lr, weight_decay=self.config.train.weight_decay)
        logger.info("stage %d '%s': %s, %d views, intervals %d->%d, %d steps", index, stage.name, stage.phase,
                    stage.views, stage.interval_start, stage.interval_end, stage.steps)

    def _set_lr(self, stage, stage_step):
        lr = stage.lr * lr_factor(stage_step, stage.steps, self.config.train.warmup_fraction)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    # ---------- persistence ----------

    def checkpoint_path(self, step):
        return os.path.join(self.checkpoint_dir, f"step-{step:07d}.pt")

    def save(self, reason):
        train_state = dict(self.state.as_dict(), optimizer=self.optimizer.state_dict() if self.optimizer else None)
        stage_index = min(self.state.stage_index, len(self.schedule.stages) - 1)
        path = save_checkpoint(self.checkpoint_path(self.state.step), self.model,
                               phase=self.schedule.stages[stage_index].phase, seed=self.config.seed,
                               train_state=train_state,
                               extra={"reason": reason, "config_digest": self.config.digest()})
        with open(os.path.join(self.output_dir, TRAIN_STATE_NAME), "w", encoding="utf-8") as handle:
            json.dump(dict(self.state.as_dict(), checkpoint=os.path.basename(path), reason=reason), handle,
                      indent=2, sort_keys=True)
        return path

    def resume(self, path):
        payload = read_checkpoint(path)
        self.model.load_state_dict(payload["state_dict"])
        self.model.to(self.dtype)
        train_state = payload.get("train_state") or {}
        self.state = TrainState.from_dict(train_state)
        self.state.stage_index, stage_step = self.schedule.locate(self.state.step)
        self._active_stage = None
        # A checkpoint taken on a stage boundary re-enters the next stage from scratch.
        if self.state.stage_index < len(self.schedule.stages) and stage_step > 0:
            self._enter_stage(self.state.stage_index, fresh=False)
            self._active_stage = self.state.stage_index
            if train_state.get("optimizer"):
                self.optimizer.load_state_dict(train_state["optimizer"])
        logger.info("resumed from %s at step %d", path, self.state.step)
        return self.state

    def _log_row(self, row):
        with open(self.metrics_path, "a", encoding="utf-8") as handle:
            handle.write(row + "\n")

    # ---------- steps ----------

    def train_step(self, batch, stage, stage_step):
        images, intrinsics = stack_batch(batch, self.dtype)
        output = self.model(images, intrinsics, phase=stage.phase)
        report = total_loss(output, batch, stage.phase, self.config.loss, camera_weight=stage.camera_weight,
                            render_config=self.config.render, perceptual=self.perceptual,
                            parameterization=self.config.model.pose_parameterization,
                            align=self.config.model.dq_alignment_loss)
        if not report.is_finite():
            raise NumericalFault(f"loss:{report.first_non_finite()}", "non-finite loss", diagnostics={
                "step": self.state.step, "stage": stage.name, "component": report.first_non_finite(),
                "parameter_norms": parameter_norms(self.model)})
        self.optimizer.zero_grad(set_to_none=True)
        try:
            forward_backward(report.total)
        except NumericalFault as fault:
            fault.diagnostics = dict(fault.diagnostics or {}, step=self.state.step, stage=stage.name,
                                     parameter_norms=parameter_norms(self.model))
            raise
        grad_norm = None
        if self.config.train.grad_clip is not None:
            grad_norm = float(torch.nn.utils.clip_grad_norm_(
                [p for p in self.model.parameters() if p.requires_grad], self.config.train.grad_clip))
            if not math.isfinite(grad_norm):
                raise NumericalFault("grad_norm", "non-finite gradient", diagnostics={
                    "step": self.state.step, "stage": stage.name, "gradient_norms": _gradient_norms(self.model)})
        lr = self._set_lr(stage, stage_step)
        self.optimizer.step()
        return report, lr, grad_norm

    def train(self, resume=None):
        """Run (or continue) every stage. Returns the final TrainState."""
        os.makedirs(self.output_dir, exist_ok=True)
        train = self.config.train
        if resume is not None:
            self.resume(resume)
        total = self.schedule.total_steps
        if self.state.step >= total:
            logger.info("nothing to do: run already finished at step %d", self.state.step)
            return self.state

        producer = ClipProducer(self.config.seed, self.schedule, self.config.scene, train.batch_size,
                                pool=train.scene_pool, start=self.state.step, queue_size=train.queue_size)
        with producer:
            active_stage = self._active_stage
            while self.state.step < total:
                stage_index, stage_step = self.schedule.locate(self.state.step)
                stage = self.schedule.stages[stage_index]
                if stage_index != active_stage:
                    self._enter_stage(stage_index, fresh=True)
                    active_stage = stage_index
                self.state.stage_index = stage_index
                batch = producer.get()

                self.model.train()
                report, lr, grad_norm = self.train_step(batch, stage, stage_step)
                self.state.last_loss = float(report.total.detach())
                step = self.state.step
                self.state.step += 1

                if step % train.log_every == 0 or stage_step == stage.steps - 1:
                    self._log_row(report.to_json(kind="train", step=step, stage=stage.name, phase=stage.phase,
                                                 views=stage.views, interval=stage.interval_at(stage_step),
                                                 lr=lr, grad_norm=grad_norm))
                if self.state.step % train.validate_every == 0:
                    self.run_validation(stage, step)

                stage_done = stage_step == stage.steps - 1
                if stage_done:
                    self.state.stage_index = stage_index + 1
                if stage_done or self.state.step % train.checkpoint_every == 0:
                    self.save("stage_end" if stage_done else "cadence")
        logger.info("training finished after %d steps (last loss %.6g)", self.state.step, self.state.last_loss)
        return self.state

    def run_validation(self, stage, step):
        distill = stage.phase == "distill"
        summary = validate(self.model, self.config.train.validation_seeds, stage.views, self.config.scene,
                           self.config.render, distill=distill)
        row = dict(summary, kind="validation", step=step, views=stage.views, phase=stage.phase)
        self._log_row(json.dumps(row, sort_keys=True))
        if distill:
            return summary
        best = self.state.best.get("psnr")
        if summary["psnr"] is not None and (best is None or summary["psnr"] > best):
            self.state.best = {"psnr": summary["psnr"], "step": step}
        return summary


def train(run_config, output_dir, *, resume=None, perceptual=None):
    return Trainer(run_config, output_dir, perceptual=perceptual).train(resume=resume)


# ==========================================
# 5. Validation
# ==========================================

def validation_clip(seed, views, scene_config, interval=1):
    scene = _cached_scene(seed, scene_config)
    span = max(scene.num_frames - 1, 1)
    interval = max(1, min(interval, span // max(views - 1, 1)))
    return sample_training_clip(scene, views, interval, start=0, num_targets=None)


def scoring_views(clip):
    """(images, poses, intrinsics, kind) scored by evaluation.

    The clip's target views when it has any. A clip without targets (a single input view, or a span
    with no frame between its ends) is scored on its own input views, rendered from their canonical poses.
    """
    if clip.target_images is not None:
        return clip.target_images, clip.target_poses, clip.target_intrinsics, "target"
    return clip.frames.images, clip.poses, clip.frames.intrinsics, "input"


def pointmap_metrics(pointmap, confidence, clip):
    """Point error (fraction of scene extent) and hit/background confidence AUC over the clip's input views."""
    hits = clip.confidence.values > 0
    if not bool(hits.any()):
        return {"point_error": None, "confidence_auc": None}
    return {
        "point_error": pointmap_error(pointmap, clip.pointmap.points, hits),
        "confidence_auc": confidence_auc(confidence, hits),
    }


def evaluate_clip(model, clip, render_config=None, *, oracle=False, align="similarity", distill=False):
    """Image metrics on the scored views and pose metrics on the input trajectory (no gradients).

    ``distill=True`` adds the point-map head's error and confidence AUC.
    """
    height, width = clip.frames.height, clip.frames.width
    target_images, target_poses, target_intrinsics, kind = scoring_views(clip)
    with torch.no_grad():
        if oracle:
            predicted_poses = clip.poses
            images = torch.stack([
                render_views(oracle_gaussians(clip, j, target=kind == "target"), target_poses[j:j + 1],
                             target_intrinsics[j:j + 1], height, width, render_config)[0]
                for j in range(target_images.shape[0])])
            pointmap, confidence = clip.pointmap.points, clip.confidence.values
        else:
            model.eval()
            dtype = next(model.parameters()).dtype
            frames = clip.frames.images[None].to(dtype)
            intrinsics = clip.frames.intrinsics[None].to(dtype)
            output = model(frames, intrinsics, phase="distill" if distill else "nvs")
            predicted_poses = output.poses[0]
            images = render_views(output.gaussians[0], target_poses.to(dtype),
                                  target_intrinsics.to(dtype), height, width, render_config)
            if distill:
                pointmap, confidence = (value[0] for value in output.require_pointmap())
    targets = target_images.permute(0, 2, 3, 1)
    row = {
        "scene": clip.scene_id,
        "scored_views": kind,
        "psnr": sum(psnr(a, b) for a, b in zip(images, targets)) / len(targets),
        "ssim": sum(ssim(a, b) for a, b in zip(images, targets)) / len(targets),
    }
    if distill:
        row.update(pointmap_metrics(pointmap, confidence, clip))
    if clip.num_frames > 1:
        if is_normalizable(predicted_poses.detach()):
            metrics = pose_metrics(predicted_poses.detach(), clip.poses, align=align)
            row.update(ate=metrics.ate, rpe_trans=metrics.rpe_trans, rpe_rot=metrics.rpe_rot,
                       degenerate_alignment=metrics.degenerate)
        else:
            # an untrained camera head predicts identity for every frame
            logger.warning("scene %s: predicted trajectory has no extent; pose metrics left empty", clip.scene_id)
            row.update(ate=None, rpe_trans=None, rpe_rot=None, degenerate_alignment=None)
    return row, images, predicted_poses


def validate(model, seeds, views, scene_config, render_config=None, *, oracle=False, align="similarity",
             distill=False):
    """Mean metrics over held-out seeds: PSNR / SSIM / ATE / RPE, plus point error and AUC with ``distill``."""
    rows = []
    for seed in seeds:
        clip = validation_clip(seed, views, scene_config)
        row, _, _ = evaluate_clip(model, clip, render_config, oracle=oracle, align=align, distill=distill)
        rows.append(row)
    keys = ["psnr", "ssim", "ate", "rpe_trans", "rpe_rot"]
    if distill:
        keys += ["point_error", "confidence_auc"]
    summary = {"scenes": len(rows)}
    for key in keys:
        values = [row[key] for row in rows if row.get(key) is not None]
        summary[key] = sum(values) / len(values) if values else None
    logger.info("validation on %d scenes: psnr %s, ate %s", len(rows), summary["psnr"], summary["ate"])
    return summary
