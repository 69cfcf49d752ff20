"""Synthetic scenes: textured ellipsoids seen along a smooth forward-moving camera path.

Everything is ray-cast in float64, so point maps and depth are exact. The first trajectory
frame is the canonical frame and the scene is scaled so the last camera translation has unit
norm. Besides the ``num_frames`` trajectory frames, every scene carries one extra view halfway
between consecutive frames; those are the held-out target views.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from common.exceptions import ContractViolation, DataError, SceneGenerationError

from .dualquat import dq_to_matrix, format_pose_lines, matrix_to_dq, parse_pose_lines, quat_to_rotmat
from .forms import SceneConfig
from .gsplat import GaussianSet, pixel_provenance, save_png
from .losses import ConfidenceMap, PointMap

logger = logging.getLogger(__name__)

SCENE_DTYPE = torch.float64
FAR_DEPTH = 20.0
RAY_NEAR = 1e-3
LIGHT_DIRECTION = (0.3, -0.6, -0.74)
AMBIENT = 0.35
ORACLE_OPACITY = 0.999
ORACLE_FOOTPRINT_PX = 0.3

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff", ".webp"}


# ==========================================
# 1. Types
# ==========================================

@dataclass
class FrameSequence:
    images: torch.Tensor                        # (T, 3, H, W) in [0, 1]
    intrinsics: Optional[torch.Tensor] = None   # (T, 4) fx fy cx cy in pixels
    frame_indices: list = field(default_factory=list)

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 3:
            raise ContractViolation(f"frames must be (T, 3, H, W), got {tuple(self.images.shape)}")
        if self.images.shape[0] < 1:
            raise ContractViolation("a frame sequence needs at least one frame")
        if self.intrinsics is not None and self.intrinsics.shape != (self.images.shape[0], 4):
            raise ContractViolation("intrinsics must be (T, 4)")
        if not self.frame_indices:
            self.frame_indices = list(range(self.images.shape[0]))

    @property
    def count(self):
        return self.images.shape[0]

    @property
    def height(self):
        return self.images.shape[2]

    @property
    def width(self):
        return self.images.shape[3]

    def select(self, indices):
        intrinsics = self.intrinsics[indices] if self.intrinsics is not None else None
        return FrameSequence(self.images[indices], intrinsics, [self.frame_indices[i] for i in indices])


@dataclass
class Ellipsoids:
    centers: torch.Tensor      # (M, 3)
    axes: torch.Tensor         # (M, 3, 3), columns are the local axes
    radii: torch.Tensor        # (M, 3)
    colors: torch.Tensor       # (M, 2, 3) two texture colours
    texture_frequency: float

    def scaled(self, factor):
        return replace(self, centers=self.centers * factor, radii=self.radii * factor)


@dataclass
class SceneSample:
    frames: FrameSequence
    poses: torch.Tensor                 # (T, 8) canonical -> camera unit DQs, poses[0] = identity
    pointmap: PointMap                  # (T, H, W, 3) canonical frame
    confidence: ConfidenceMap           # (T, H, W), 1 on hits, 0 on background
    depth: torch.Tensor                 # (T, H, W) camera-space z
    target_images: Optional[torch.Tensor] = None       # (V, 3, H, W)
    target_poses: Optional[torch.Tensor] = None        # (V, 8)
    target_intrinsics: Optional[torch.Tensor] = None   # (V, 4)
    target_indices: list = field(default_factory=list)  # fractional trajectory positions
    target_pointmap: Optional[PointMap] = None
    target_confidence: Optional[ConfidenceMap] = None
    target_depth: Optional[torch.Tensor] = None
    scene_id: str = ""
    seed: int = 0
    config: Optional[SceneConfig] = None
    primitives: Optional[Ellipsoids] = None

    @property
    def num_frames(self):
        return self.frames.count


# ==========================================
# 2. Geometry sampling
# ==========================================

def derive_seed(seed, *tags):
    digest = hashlib.sha256(":".join(str(v) for v in (seed,) + tags).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _uniform(generator, low, high, *shape):
    return low + (high - low) * torch.rand(shape, generator=generator, dtype=SCENE_DTYPE)


def _sample_ellipsoids(generator, config):
    count = int(torch.randint(config.min_primitives, config.max_primitives + 1, (1,), generator=generator))
    centers = torch.stack((
        _uniform(generator, -2.2, 2.2, count),
        _uniform(generator, -1.6, 1.6, count),
        _uniform(generator, 2.4, 6.0, count),
    ), dim=-1)
    quats = torch.randn(count, 4, generator=generator, dtype=SCENE_DTYPE)
    axes = quat_to_rotmat(quats / quats.norm(dim=-1, keepdim=True))
    radii = _uniform(generator, 0.12, 0.5, count, 3)
    palette = _uniform(generator, 0.15, 1.0, config.palette_size, 3)
    picks = torch.randint(0, config.palette_size, (count, 2), generator=generator)
    return Ellipsoids(centers, axes, radii, palette[picks], config.texture_frequency)


def _rotation_yaw_pitch(yaw, pitch):
    cy, sy, cp, sp = torch.cos(yaw), torch.sin(yaw), torch.cos(pitch), torch.sin(pitch)
    one, zero = torch.ones_like(yaw), torch.zeros_like(yaw)
    r_yaw = torch.stack((torch.stack((cy, zero, sy), -1), torch.stack((zero, one, zero), -1),
                         torch.stack((-sy, zero, cy), -1)), -2)
    r_pitch = torch.stack((torch.stack((one, zero, zero), -1), torch.stack((zero, cp, -sp), -1),
                           torch.stack((zero, sp, cp), -1)), -2)
    return r_yaw @ r_pitch


def catmull_rom(points, u):
    """Uniform Catmull-Rom spline through ``points`` (K, D) evaluated at parameters ``u`` in [0, K-1]."""
    count = points.shape[0]
    padded = torch.cat((2 * points[:1] - points[1:2], points, 2 * points[-1:] - points[-2:-1]))
    segment = torch.clamp(torch.floor(u).long(), 0, count - 2)
    s = (u - segment.to(u.dtype))[:, None]
    p0, p1, p2, p3 = padded[segment], padded[segment + 1], padded[segment + 2], padded[segment + 3]
    return 0.5 * ((2 * p1) + (-p0 + p2) * s + (2 * p0 - 5 * p1 + 4 * p2 - p3) * s ** 2
                  + (-p0 + 3 * p1 - 3 * p2 + p3) * s ** 3)


def _sample_keyposes(generator, config):
    count = config.num_keyposes
    limit = math.radians(config.max_rotation_degrees) / 2.0
    forward = torch.linspace(0.0, config.path_length, count, dtype=SCENE_DTYPE)
    lateral = _uniform(generator, -0.15, 0.15, count) * config.path_length
    vertical = _uniform(generator, -0.08, 0.08, count) * config.path_length
    yaw = _uniform(generator, -limit, limit, count)
    pitch = _uniform(generator, -limit / 2, limit / 2, count)
    keys = torch.stack((lateral, vertical, forward, yaw, pitch), dim=-1)
    keys[0] = 0.0
    return keys


def trajectory_poses(keys, u):
    """World-to-camera matrices (N, 4, 4) at spline parameters ``u``."""
    state = catmull_rom(keys, u)
    rotation_c2w = _rotation_yaw_pitch(state[:, 3], state[:, 4])
    rotation = rotation_c2w.transpose(-1, -2)
    translation = -(rotation @ state[:, :3, None]).squeeze(-1)
    matrix = torch.zeros(u.shape[0], 4, 4, dtype=SCENE_DTYPE)
    matrix[:, :3, :3] = rotation
    matrix[:, :3, 3] = translation
    matrix[:, 3, 3] = 1.0
    return matrix


def intrinsics_for(config):
    focal = config.focal
    return torch.tensor([focal, focal, config.image_width / 2.0, config.image_height / 2.0], dtype=SCENE_DTYPE)


# ==========================================
# 3. Ray casting
# ==========================================

@dataclass
class RayHits:
    image: torch.Tensor     # (H, W, 3)
    points: torch.Tensor    # (H, W, 3) canonical frame
    depth: torch.Tensor     # (H, W) camera-space z
    hit: torch.Tensor       # (H, W) bool


def pixel_rays(intrinsics, height, width):
    fx, fy, cx, cy = intrinsics.tolist()
    rows, cols = torch.meshgrid(torch.arange(height, dtype=SCENE_DTYPE), torch.arange(width, dtype=SCENE_DTYPE),
                                indexing="ij")
    return torch.stack(((cols - cx) / fx, (rows - cy) / fy, torch.ones_like(rows)), dim=-1).reshape(-1, 3)


def cast_rays(ellipsoids, matrix, intrinsics, height, width):
    """First-surface hits for every pixel of the camera with world-to-camera ``matrix``."""
    rotation, translation = matrix[:3, :3], matrix[:3, 3]
    origin = -(rotation.T @ translation)
    directions = pixel_rays(intrinsics, height, width) @ rotation   # R^T d, row-wise

    local_origin = torch.einsum("mi,mij->mj", origin[None] - ellipsoids.centers, ellipsoids.axes) / ellipsoids.radii
    local_dir = torch.einsum("pi,mij->pmj", directions, ellipsoids.axes) / ellipsoids.radii[None]
    a = (local_dir ** 2).sum(-1)
    b = 2.0 * (local_dir * local_origin[None]).sum(-1)
    c = (local_origin ** 2).sum(-1) - 1.0
    disc = b * b - 4.0 * a * c[None]
    s = (-b - torch.sqrt(disc.clamp_min(0.0))) / (2.0 * a)
    hit = (disc > 0) & (s > RAY_NEAR) & (c[None] > 0)
    s = torch.where(hit, s, torch.full_like(s, math.inf))
    distance, index = s.min(dim=-1)
    any_hit = torch.isfinite(distance)
    distance = torch.where(any_hit, distance, torch.full_like(distance, FAR_DEPTH))

    pixels = torch.arange(directions.shape[0])
    surface = local_origin[index] + distance[:, None] * local_dir[pixels, index]
    axes = ellipsoids.axes[index]
    normal = (axes @ (surface / ellipsoids.radii[index])[..., None]).squeeze(-1)
    normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    freq = ellipsoids.texture_frequency
    pattern = 0.5 + 0.5 * torch.sin(freq * surface[:, 0]) * torch.sin(freq * surface[:, 1]) * torch.sin(
        freq * surface[:, 2])
    base = ellipsoids.colors[index]
    texture = pattern[:, None] * base[:, 0] + (1.0 - pattern[:, None]) * base[:, 1]
    light = torch.tensor(LIGHT_DIRECTION, dtype=SCENE_DTYPE)
    light = light / light.norm()
    shade = AMBIENT + (1.0 - AMBIENT) * (normal @ -light).clamp_min(0.0)
    color = torch.where(any_hit[:, None], (texture * shade[:, None]).clamp(0.0, 1.0), torch.zeros_like(texture))

    points = origin[None] + distance[:, None] * directions
    return RayHits(color.reshape(height, width, 3), points.reshape(height, width, 3),
                   distance.reshape(height, width), any_hit.reshape(height, width))


def ellipsoid_surface_residual(ellipsoids, points):
    """| |local(x)| - 1 | for the nearest-fitting primitive of each point (..., 3), in scene units."""
    flat = points.reshape(-1, 3)
    local = torch.einsum("pmi,mij->pmj", flat[:, None] - ellipsoids.centers[None], ellipsoids.axes)
    local = local / ellipsoids.radii[None]
    radius = local.norm(dim=-1)
    scale = ellipsoids.radii.min(dim=-1).values[None]
    return ((radius - 1.0).abs() * scale).min(dim=-1).values.reshape(points.shape[:-1])


# ==========================================
# 4. Scene generation
# ==========================================

def _render_views(ellipsoids, matrices, intrinsics, config):
    hits = [cast_rays(ellipsoids, m, intrinsics, config.image_height, config.image_width) for m in matrices]
    images = torch.stack([h.image for h in hits]).permute(0, 3, 1, 2).contiguous()
    return images, torch.stack([h.points for h in hits]), torch.stack([h.depth for h in hits]), \
        torch.stack([h.hit for h in hits])


def _canonicalize(matrices):
    """Re-express world-to-camera matrices relative to the first one; frame 0 becomes exactly identity."""
    canonical = matrices @ torch.linalg.inv(matrices[0])
    canonical[0] = torch.eye(4, dtype=matrices.dtype)
    return canonical


def _matrices_to_poses(matrices):
    poses = matrix_to_dq(matrices)
    poses[0] = torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0], dtype=poses.dtype)
    return poses


def _try_generate(seed, config, scene_id):
    generator = torch.Generator().manual_seed(seed)
    ellipsoids = _sample_ellipsoids(generator, config)
    keys = _sample_keyposes(generator, config)
    frames = config.num_frames
    spacing = (config.num_keyposes - 1) / (frames - 1)
    frame_u = torch.arange(frames, dtype=SCENE_DTYPE) * spacing
    target_u = (torch.arange(frames - 1, dtype=SCENE_DTYPE) + 0.5) * spacing

    matrices = trajectory_poses(keys, torch.cat((frame_u, target_u)))
    matrices = _canonicalize(matrices)
    scale = float(matrices[frames - 1, :3, 3].norm())
    if scale < 1e-8:
        return None
    matrices[:, :3, 3] /= scale
    ellipsoids = ellipsoids.scaled(1.0 / scale)

    intrinsics = intrinsics_for(config)
    first = cast_rays(ellipsoids, matrices[0], intrinsics, config.image_height, config.image_width)
    coverage = float(first.hit.to(SCENE_DTYPE).mean())
    if coverage < config.min_coverage:
        logger.debug("scene %s seed %d: frame-1 coverage %.2f below %.2f", scene_id, seed, coverage,
                     config.min_coverage)
        return None

    images, points, depth, hit = _render_views(ellipsoids, matrices, intrinsics, config)
    if not bool(hit.flatten(1).any(dim=1).all()):
        return None
    poses = _matrices_to_poses(matrices[:frames])
    target_poses = matrix_to_dq(matrices[frames:])
    all_intrinsics = intrinsics.expand(frames, 4).clone()
    return SceneSample(
        frames=FrameSequence(images[:frames], all_intrinsics, list(range(frames))),
        poses=poses,
        pointmap=PointMap(points[:frames], torch.ones_like(hit[:frames])),
        confidence=ConfidenceMap(hit[:frames].to(SCENE_DTYPE), allow_zero=True),
        depth=depth[:frames],
        target_images=images[frames:],
        target_poses=target_poses,
        target_intrinsics=intrinsics.expand(frames - 1, 4).clone(),
        target_indices=[i + 0.5 for i in range(frames - 1)],
        target_pointmap=PointMap(points[frames:], torch.ones_like(hit[frames:])),
        target_confidence=ConfidenceMap(hit[frames:].to(SCENE_DTYPE), allow_zero=True),
        target_depth=depth[frames:],
        scene_id=scene_id,
        seed=seed,
        config=config,
        primitives=ellipsoids,
    )


def generate_scene(seed, config=None, *, scene_id=None):
    """Deterministic synthetic scene for ``seed``; retries with derived seeds when coverage is too low."""
    config = config or SceneConfig()
    scene_id = scene_id or f"scene-{seed}"
    for attempt in range(config.max_retries + 1):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        sample = _try_generate(attempt_seed, config, scene_id)
        if sample is not None:
            if attempt:
                logger.info("scene %s generated after %d retries", scene_id, attempt)
            sample.seed = seed
            return sample
    raise SceneGenerationError(
        f"scene {scene_id} (seed {seed}) has no usable frustum coverage after {config.max_retries} retries")


# ==========================================
# 5. Training clips
# ==========================================

def clip_indices(start, views, interval):
    return [start + k * interval for k in range(views)]


def _transform_points(matrix, points):
    return points @ matrix[:3, :3].T + matrix[:3, 3]


def sample_training_clip(scene, views, interval, *, generator=None, start=None, num_targets=None):
    """Evenly spaced clip of ``views`` frames ``interval`` apart, plus target views strictly inside its span.

    The clip is re-canonicalized to its first frame and rescaled so its last translation has unit norm.
    """
    if views < 1 or interval < 1:
        raise ContractViolation("view count and interval must be positive")
    span = (views - 1) * interval
    total = scene.num_frames
    if span > total - 1:
        raise ContractViolation(f"clip span {span} exceeds the {total}-frame trajectory")
    if start is None:
        high = total - span
        start = int(torch.randint(0, high, (1,), generator=generator)) if generator is not None else 0
    if start < 0 or start + span > total - 1:
        raise ContractViolation(f"clip starting at {start} with span {span} leaves the trajectory")
    indices = clip_indices(start, views, interval)

    matrices = dq_to_matrix(scene.poses.to(SCENE_DTYPE))
    anchor = matrices[indices[0]]
    anchor_inv = torch.linalg.inv(anchor)
    clip_matrices = matrices[indices] @ anchor_inv
    clip_matrices[0] = torch.eye(4, dtype=SCENE_DTYPE)
    scale = float(clip_matrices[-1, :3, 3].norm()) if views > 1 else 1.0
    if scale < 1e-8:
        raise ContractViolation("clip has no baseline between its first and last frame")
    clip_matrices[:, :3, 3] /= scale

    points = _transform_points(anchor, scene.pointmap.points[indices].to(SCENE_DTYPE)) / scale
    depth = scene.depth[indices] / scale

    candidates = []
    if scene.target_images is not None and views > 1:
        candidates = [("target", j) for j, position in enumerate(scene.target_indices)
                      if indices[0] < position < indices[-1]]
        candidates += [("frame", i) for i in range(indices[0] + 1, indices[-1]) if i not in indices]
    if num_targets is None:
        num_targets = scene.config.num_targets if scene.config is not None else len(candidates)
    if num_targets < len(candidates):
        if generator is not None:
            order = torch.randperm(len(candidates), generator=generator)[:num_targets].tolist()
        else:
            order = list(range(num_targets))
        candidates = [candidates[i] for i in sorted(order)]

    target = _select_targets(scene, candidates, anchor, anchor_inv, scale)
    return SceneSample(
        frames=scene.frames.select(indices),
        poses=_matrices_to_poses(clip_matrices),
        pointmap=PointMap(points, scene.pointmap.valid[indices]),
        confidence=ConfidenceMap(scene.confidence.values[indices], allow_zero=True),
        depth=depth,
        scene_id=scene.scene_id,
        seed=scene.seed,
        config=scene.config,
        **target,
    )


def _select_targets(scene, candidates, anchor, anchor_inv, scale):
    if not candidates:
        return {}
    images, matrices, intrinsics, positions, points, confidences, depths = [], [], [], [], [], [], []
    frame_matrices = dq_to_matrix(scene.poses.to(SCENE_DTYPE))
    target_matrices = dq_to_matrix(scene.target_poses.to(SCENE_DTYPE)) if scene.target_poses is not None else None
    for kind, index in candidates:
        if kind == "target":
            images.append(scene.target_images[index])
            matrices.append(target_matrices[index])
            intrinsics.append(scene.target_intrinsics[index])
            positions.append(scene.target_indices[index])
            points.append(scene.target_pointmap.points[index])
            confidences.append(scene.target_confidence.values[index])
            depths.append(scene.target_depth[index])
        else:
            images.append(scene.frames.images[index])
            matrices.append(frame_matrices[index])
            intrinsics.append(scene.frames.intrinsics[index])
            positions.append(float(index))
            points.append(scene.pointmap.points[index])
            confidences.append(scene.confidence.values[index])
            depths.append(scene.depth[index])
    relative = torch.stack(matrices) @ anchor_inv
    relative[:, :3, 3] /= scale
    stacked_points = _transform_points(anchor, torch.stack(points).to(SCENE_DTYPE)) / scale
    return {
        "target_images": torch.stack(images),
        "target_poses": matrix_to_dq(relative),
        "target_intrinsics": torch.stack(intrinsics),
        "target_indices": positions,
        "target_pointmap": PointMap(stacked_points),
        "target_confidence": ConfidenceMap(torch.stack(confidences), allow_zero=True),
        "target_depth": torch.stack(depths) / scale,
    }


# ==========================================
# 6. Oracle Gaussians
# ==========================================

def oracle_gaussians(sample, view, *, target=False, dtype=torch.float32):
    """Pixel-aligned Gaussians reconstructing one view exactly: one tight, nearly opaque splat per hit pixel."""
    if target:
        points, depth = sample.target_pointmap.points[view], sample.target_depth[view]
        image, intrinsics = sample.target_images[view], sample.target_intrinsics[view]
        hit = sample.target_confidence.values[view] > 0
    else:
        points, depth = sample.pointmap.points[view], sample.depth[view]
        image, intrinsics = sample.frames.images[view], sample.frames.intrinsics[view]
        hit = sample.confidence.values[view] > 0
    height, width = depth.shape
    flat_hit = hit.reshape(-1)
    count = int(flat_hit.sum())
    sigma = ORACLE_FOOTPRINT_PX * depth.reshape(-1)[flat_hit] / float(intrinsics[0])
    _, pixel = pixel_provenance(1, height, width)
    return GaussianSet(
        means=points.reshape(-1, 3)[flat_hit].to(dtype),
        opacities=torch.full((count,), ORACLE_OPACITY, dtype=dtype),
        rotations=torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype).expand(count, 4).clone(),
        scales=sigma[:, None].expand(count, 3).to(dtype).clone(),
        colors=image.permute(1, 2, 0).reshape(-1, 3)[flat_hit].to(dtype),
        sh_degree=0,
        source_frame=torch.full((count,), int(view)),
        source_pixel=pixel[flat_hit],
        image_size=(height, width),
    )


# ==========================================
# 7. Image folders
# ==========================================

def _center_crop_box(width, height, target_w, target_h):
    aspect = target_w / target_h
    if width / height > aspect:
        crop_w, crop_h = int(round(height * aspect)), height
    else:
        crop_w, crop_h = width, int(round(width / aspect))
    left, top = (width - crop_w) // 2, (height - crop_h) // 2
    return left, top, left + crop_w, top + crop_h


def read_intrinsics_file(path, count=None):
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    values = [float(v) for v in line.split()]
                except ValueError as exc:
                    raise DataError(f"{path}:{number}: {exc}") from exc
                if len(values) != 4:
                    raise DataError(f"{path}:{number}: expected 'fx fy cx cy'")
                rows.append(values)
    except OSError as exc:
        raise DataError(f"cannot read intrinsics file {path}: {exc}") from exc
    if not rows:
        raise DataError(f"intrinsics file {path} is empty")
    intrinsics = torch.tensor(rows, dtype=SCENE_DTYPE)
    if count is not None and intrinsics.shape[0] == 1:
        intrinsics = intrinsics.expand(count, 4).clone()
    if count is not None and intrinsics.shape[0] != count:
        raise DataError(f"{path} lists {intrinsics.shape[0]} cameras for {count} frames")
    return intrinsics


def ingest_image_folder(path, height, width, intrinsics=None):
    """Decode a folder of equal-size images (lexicographic order) into a FrameSequence.

    Images are centre-cropped to the target aspect and resized. ``intrinsics`` (T, 4) or (1, 4), in
    source pixels, are carried through the crop and resize.
    """
    if not os.path.isdir(path):
        raise DataError(f"{path} is not a directory")
    images, size = [], None
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        if os.path.splitext(name)[1].lower() not in IMAGE_EXTENSIONS:
            logger.warning("skipping non-image file %s", full)
            continue
        try:
            with Image.open(full) as handle:
                picture = handle.convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode image {full}: {exc}") from exc
        if size is None:
            size = picture.size
        elif picture.size != size:
            raise DataError(f"image {full} is {picture.size[0]}x{picture.size[1]}, expected {size[0]}x{size[1]}")
        images.append(picture)
    if not images:
        raise DataError(f"no images found in {path}")

    src_w, src_h = size
    box = _center_crop_box(src_w, src_h, width, height)
    tensors = []
    for picture in images:
        resized = picture.crop(box).resize((width, height), Image.Resampling.BICUBIC)
        tensors.append(torch.from_numpy(np.asarray(resized, dtype=np.float32) / 255.0).permute(2, 0, 1))
    frames = torch.stack(tensors).clamp(0.0, 1.0)

    adjusted = None
    if intrinsics is not None:
        intrinsics = torch.as_tensor(intrinsics, dtype=SCENE_DTYPE).reshape(-1, 4)
        if intrinsics.shape[0] == 1:
            intrinsics = intrinsics.expand(len(images), 4)
        if intrinsics.shape[0] != len(images):
            raise DataError(f"{intrinsics.shape[0]} intrinsics rows for {len(images)} images")
        sx, sy = width / (box[2] - box[0]), height / (box[3] - box[1])
        adjusted = torch.stack((intrinsics[:, 0] * sx, intrinsics[:, 1] * sy,
                                (intrinsics[:, 2] - box[0]) * sx, (intrinsics[:, 3] - box[1]) * sy), dim=-1)
    logger.info("ingested %d frames from %s (%dx%d -> %dx%d)", len(images), path, src_w, src_h, width, height)
    return FrameSequence(frames, adjusted, list(range(len(images))))


# ==========================================
# 8. Scene directories
# ==========================================

def _write_intrinsics(path, intrinsics):
    with open(path, "w", encoding="utf-8") as handle:
        for row in intrinsics.tolist():
            handle.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_scene(sample, directory):
    """Write ``frames/NNN.png``, ``poses.txt``, ``intrinsics.txt``, ``meta.json`` and ``geometry.npz``."""
    frames_dir = os.path.join(directory, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for position, image in enumerate(sample.frames.images):
        save_png(image.permute(1, 2, 0), os.path.join(frames_dir, f"{position:03d}.png"))
    with open(os.path.join(directory, "poses.txt"), "w", encoding="utf-8") as handle:
        handle.write(format_pose_lines(sample.poses, sample.frames.frame_indices))
    _write_intrinsics(os.path.join(directory, "intrinsics.txt"), sample.frames.intrinsics)

    geometry = {
        "pointmap": sample.pointmap.points.cpu().numpy(),
        "confidence": sample.confidence.values.cpu().numpy(),
        "depth": sample.depth.cpu().numpy(),
    }
    if sample.target_images is not None:
        targets_dir = os.path.join(directory, "targets")
        os.makedirs(targets_dir, exist_ok=True)
        for position, image in enumerate(sample.target_images):
            save_png(image.permute(1, 2, 0), os.path.join(targets_dir, f"{position:03d}.png"))
        with open(os.path.join(targets_dir, "poses.txt"), "w", encoding="utf-8") as handle:
            handle.write(format_pose_lines(sample.target_poses))
        _write_intrinsics(os.path.join(targets_dir, "intrinsics.txt"), sample.target_intrinsics)
        geometry["target_pointmap"] = sample.target_pointmap.points.cpu().numpy()
        geometry["target_depth"] = sample.target_depth.cpu().numpy()
        geometry["target_confidence"] = sample.target_confidence.values.cpu().numpy()
    np.savez_compressed(os.path.join(directory, "geometry.npz"), **geometry)

    meta = {
        "scene_id": sample.scene_id,
        "seed": sample.seed,
        "frame_indices": list(sample.frames.frame_indices),
        "target_indices": list(sample.target_indices),
        "config": sample.config.model_dump(mode="json") if sample.config is not None else None,
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as handle:
        json.dump(meta, handle, indent=2)
    return directory


def _read_png_folder(folder, count):
    images = []
    for position in range(count):
        path = os.path.join(folder, f"{position:03d}.png")
        try:
            with Image.open(path) as handle:
                array = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read frame {path}: {exc}") from exc
        images.append(torch.from_numpy(array).permute(2, 0, 1))
    return torch.stack(images)


def _read_poses(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return parse_pose_lines(handle.read())
    except OSError as exc:
        raise DataError(f"cannot read pose file {path}: {exc}") from exc


def is_scene_directory(path):
    return os.path.isfile(os.path.join(path, "poses.txt")) and os.path.isdir(os.path.join(path, "frames"))


def load_scene(directory):
    """Read a directory written by ``save_scene`` (frames come back 8-bit quantized)."""
    if not is_scene_directory(directory):
        raise DataError(f"{directory} is not a scene directory (needs frames/ and poses.txt)")
    indices, poses = _read_poses(os.path.join(directory, "poses.txt"))
    count = poses.shape[0]
    intrinsics = read_intrinsics_file(os.path.join(directory, "intrinsics.txt"), count)
    images = _read_png_folder(os.path.join(directory, "frames"), count)
    try:
        with open(os.path.join(directory, "meta.json"), "r", encoding="utf-8") as handle:
            meta = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {directory}/meta.json: {exc}") from exc
    geometry_path = os.path.join(directory, "geometry.npz")
    geometry = dict(np.load(geometry_path)) if os.path.isfile(geometry_path) else {}
    height, width = images.shape[2], images.shape[3]

    if "pointmap" in geometry:
        pointmap = PointMap(torch.from_numpy(geometry["pointmap"]))
        confidence = ConfidenceMap(torch.from_numpy(geometry["confidence"]), allow_zero=True)
        depth = torch.from_numpy(geometry["depth"])
    else:
        pointmap = PointMap(torch.zeros(count, height, width, 3, dtype=SCENE_DTYPE),
                            torch.zeros(count, height, width, dtype=torch.bool))
        confidence = ConfidenceMap(torch.zeros(count, height, width, dtype=SCENE_DTYPE), allow_zero=True)
        depth = torch.zeros(count, height, width, dtype=SCENE_DTYPE)

    sample = SceneSample(
        frames=FrameSequence(images, intrinsics, indices),
        poses=poses, pointmap=pointmap, confidence=confidence, depth=depth,
        scene_id=meta.get("scene_id", os.path.basename(directory)), seed=int(meta.get("seed", 0)),
        config=SceneConfig.model_validate(meta["config"]) if meta.get("config") else None,
    )
    targets_dir = os.path.join(directory, "targets")
    if os.path.isdir(targets_dir):
        _, target_poses = _read_poses(os.path.join(targets_dir, "poses.txt"))
        sample.target_poses = target_poses
        sample.target_intrinsics = read_intrinsics_file(os.path.join(targets_dir, "intrinsics.txt"),
                                                        target_poses.shape[0])
        sample.target_images = _read_png_folder(targets_dir, target_poses.shape[0])
        sample.target_indices = list(meta.get("target_indices", []))
        if "target_pointmap" in geometry:
            sample.target_pointmap = PointMap(torch.from_numpy(geometry["target_pointmap"]))
            sample.target_depth = torch.from_numpy(geometry["target_depth"])
            sample.target_confidence = ConfidenceMap(torch.from_numpy(geometry["target_confidence"]), allow_zero=True)
    return sample

