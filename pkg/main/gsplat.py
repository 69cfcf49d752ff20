"""3D Gaussian primitives and a brute-force differentiable splat renderer.

Pixel convention: pixel (row, col) has its centre at image coordinates (u, v) = (col, row).
Colours: with SH degree 0 the colour field is linear RGB in [0, 1]; with degree 1 it holds the
RGB base followed by three RGB coefficients of the first-order band.
"""

import io
import logging
import re
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
import torch
from PIL import Image, PngImagePlugin
from plyfile import PlyData, PlyElement

from common.exceptions import ContractViolation, DataError, PlyFormatError
from common.numerics import VERIFY_DTYPE, register_primitive

from .dualquat import PoseSE3, dq_to_se3, quat_to_rotmat

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-3
COVARIANCE_EPS = 1e-6
MAX_ALPHA = 0.999
SH_C1 = 0.4886025119029199


# ==========================================
# 1. Primitives and cameras
# ==========================================

@dataclass
class GaussianSet:
    """Flat set of N Gaussians; leading batch dimensions are allowed on every field."""

    means: torch.Tensor        # (..., N, 3) canonical frame
    opacities: torch.Tensor    # (..., N) in (0, 1)
    rotations: torch.Tensor    # (..., N, 4) unit quaternions (w, x, y, z)
    scales: torch.Tensor       # (..., N, 3) > 0
    colors: torch.Tensor       # (..., N, 3 * (k + 1)^2)
    sh_degree: int = 0
    source_frame: Optional[torch.Tensor] = None   # (N,) int64
    source_pixel: Optional[torch.Tensor] = None   # (N,) int64, row-major pixel index
    image_size: Optional[tuple] = None            # (H, W) of the source frames

    def __len__(self):
        return self.means.shape[-2]

    @property
    def batch_shape(self):
        return self.means.shape[:-2]

    def __getitem__(self, index):
        if not self.batch_shape:
            raise IndexError("unbatched GaussianSet")
        return replace(self, means=self.means[index], opacities=self.opacities[index],
                       rotations=self.rotations[index], scales=self.scales[index], colors=self.colors[index])

    def detach(self):
        return replace(self, means=self.means.detach(), opacities=self.opacities.detach(),
                       rotations=self.rotations.detach(), scales=self.scales.detach(),
                       colors=self.colors.detach())

    def validate(self):
        tol = 1e-6 if self.means.dtype == torch.float64 else 1e-4
        count = len(self)
        if self.colors.shape[-1] != 3 * (self.sh_degree + 1) ** 2:
            raise ContractViolation(f"{self.colors.shape[-1]} colour channels do not match SH degree {self.sh_degree}")
        if count == 0:
            return self
        with torch.no_grad():
            if float((self.rotations.norm(dim=-1) - 1).abs().max()) > tol:
                raise ContractViolation("Gaussian rotations must be unit quaternions")
            if not bool((self.scales > 0).all()):
                raise ContractViolation("Gaussian scales must be positive")
            if not bool(((self.opacities >= 0) & (self.opacities < 1)).all()):
                raise ContractViolation("Gaussian opacities must lie in [0, 1)")
        if self.source_frame is not None and self.image_size is not None:
            pixels = self.image_size[0] * self.image_size[1]
            if bool((self.source_pixel < 0).any()) or bool((self.source_pixel >= pixels).any()):
                raise ContractViolation("Gaussian provenance pixel out of range")
            if bool((self.source_frame < 0).any()):
                raise ContractViolation("Gaussian provenance frame out of range")
        return self

    @classmethod
    def empty(cls, sh_degree=0, dtype=None):
        dtype = dtype or torch.get_default_dtype()
        channels = 3 * (sh_degree + 1) ** 2
        return cls(torch.zeros(0, 3, dtype=dtype), torch.zeros(0, dtype=dtype), torch.zeros(0, 4, dtype=dtype),
                   torch.zeros(0, 3, dtype=dtype), torch.zeros(0, channels, dtype=dtype), sh_degree)


def pixel_provenance(frames, height, width):
    pixels = height * width
    source_frame = torch.arange(frames).repeat_interleave(pixels)
    source_pixel = torch.arange(pixels).repeat(frames)
    return source_frame, source_pixel


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics (fx, fy, cx, cy) in pixels and a canonical-to-camera pose."""

    intrinsics: torch.Tensor   # (4,)
    pose: PoseSE3
    height: int
    width: int

    def __post_init__(self):
        fx, fy, cx, cy = [float(v) for v in self.intrinsics.detach().reshape(-1)[:4]]
        if fx <= 0 or fy <= 0:
            raise ContractViolation(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise ContractViolation(f"principal point ({cx}, {cy}) lies outside the {self.width}x{self.height} image")

    @classmethod
    def from_pose(cls, pose_dq, intrinsics, height, width):
        return cls(torch.as_tensor(intrinsics), dq_to_se3(pose_dq), height, width)

    @classmethod
    def identity(cls, intrinsics, height, width, dtype=None):
        dtype = dtype or torch.get_default_dtype()
        pose = PoseSE3(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))
        return cls(torch.as_tensor(intrinsics, dtype=dtype), pose, height, width)

    @property
    def center(self):
        return -(self.pose.rotation.transpose(-1, -2) @ self.pose.translation)


def default_intrinsics(height, width, focal):
    return torch.tensor([focal, focal, width / 2.0, height / 2.0])


def covariance_3d(rotations, scales):
    rot = quat_to_rotmat(rotations)
    return rot @ torch.diag_embed(scales ** 2) @ rot.transpose(-1, -2)


def project(means, rotations, scales, camera, *, eps=COVARIANCE_EPS, near=NEAR_PLANE):
    """EWA projection. Returns (means2d (N,2), cov2d (N,2,2), depth (N,), in_front (N,) bool)."""
    rotation, translation = camera.pose.rotation, camera.pose.translation
    fx, fy, cx, cy = camera.intrinsics.to(means.dtype).unbind(-1)
    points = means @ rotation.transpose(-1, -2) + translation
    x, y, z = points.unbind(-1)
    in_front = z > near
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    means2d = torch.stack((fx * x / z_safe + cx, fy * y / z_safe + cy), dim=-1)

    zeros = torch.zeros_like(z_safe)
    jacobian = torch.stack((
        torch.stack((fx / z_safe, zeros, -fx * x / z_safe ** 2), -1),
        torch.stack((zeros, fy / z_safe, -fy * y / z_safe ** 2), -1),
    ), dim=-2)
    cov_cam = rotation @ covariance_3d(rotations, scales) @ rotation.transpose(-1, -2)
    cov2d = jacobian @ cov_cam @ jacobian.transpose(-1, -2)
    cov2d = cov2d + eps * torch.eye(2, dtype=cov2d.dtype, device=cov2d.device)
    return means2d, cov2d, z, in_front


def evaluate_colors(gaussians, camera_center):
    if gaussians.sh_degree == 0:
        return gaussians.colors
    base, bands = gaussians.colors[..., :3], gaussians.colors[..., 3:12].unflatten(-1, (3, 3))
    direction = gaussians.means - camera_center
    direction = direction / direction.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    x, y, z = direction.unbind(-1)
    basis = torch.stack((-y, z, -x), dim=-1)
    return (base + SH_C1 * (basis.unsqueeze(-1) * bands).sum(-2)).clamp_min(0.0)


# ==========================================
# 2. Rendering
# ==========================================

class RenderResult(NamedTuple):
    image: torch.Tensor   # (H, W, 3)
    alpha: torch.Tensor   # (H, W) total compositing weight
    depth: torch.Tensor   # (H, W) composited depth


def compositing_weights(alphas):
    """Front-to-back weights a_i * prod_{j<i} (1 - a_j) along the last axis (already depth-sorted)."""
    transmittance = torch.cumprod(1.0 - alphas, dim=-1)
    transmittance = torch.cat((torch.ones_like(alphas[..., :1]), transmittance[..., :-1]), dim=-1)
    return alphas * transmittance


def render(gaussians, camera, background=(0.0, 0.0, 0.0), *, near=NEAR_PLANE, eps=COVARIANCE_EPS,
           max_alpha=MAX_ALPHA, cutoff_sigma=3.0, chunk_pixels=1024):
    """Splat an unbatched GaussianSet into ``camera``.

    Gaussians behind the near plane or with zero opacity are culled. The rest are sorted by
    camera depth (stable, ties keep index order) and composited front to back per pixel.
    """
    height, width = camera.height, camera.width
    dtype = gaussians.means.dtype
    background = torch.as_tensor(background, dtype=dtype, device=gaussians.means.device)
    if gaussians.batch_shape:
        raise ContractViolation("render takes a single, unbatched GaussianSet")

    means2d, cov2d, depth, in_front = project(gaussians.means, gaussians.rotations, gaussians.scales,
                                              camera, eps=eps, near=near)
    keep = in_front & (gaussians.opacities > 0)
    if not bool(keep.any()):
        image = background.expand(height, width, 3).clone()
        zeros = torch.zeros(height, width, dtype=dtype, device=background.device)
        return RenderResult(image, zeros, zeros.clone())

    index = keep.nonzero(as_tuple=True)[0]
    order = torch.sort(depth[index], stable=True).indices
    index = index[order]
    means2d, cov2d, depth = means2d[index], cov2d[index], depth[index]
    opacities = gaussians.opacities[index]
    colors = evaluate_colors(gaussians, camera.center.to(dtype))[index]

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack((c / det, -b / det, a / det), dim=-1)

    rows, cols = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype),
                                indexing="ij")
    pixels = torch.stack((cols.reshape(-1), rows.reshape(-1)), dim=-1).to(means2d.device)

    image_chunks, alpha_chunks, depth_chunks = [], [], []
    for start in range(0, pixels.shape[0], chunk_pixels):
        offset = pixels[start:start + chunk_pixels, None, :] - means2d[None, :, :]
        dx, dy = offset[..., 0], offset[..., 1]
        mahalanobis = conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy
        alphas = torch.clamp(opacities * torch.exp(-0.5 * mahalanobis), 0.0, max_alpha)
        if cutoff_sigma is not None:
            alphas = torch.where(mahalanobis > cutoff_sigma ** 2, torch.zeros_like(alphas), alphas)
        weights = compositing_weights(alphas)
        total = weights.sum(-1)
        image_chunks.append(weights @ colors + (1.0 - total)[:, None] * background)
        alpha_chunks.append(total)
        depth_chunks.append(weights @ depth)

    image = torch.cat(image_chunks).reshape(height, width, 3)
    alpha = torch.cat(alpha_chunks).reshape(height, width)
    depth_map = torch.cat(depth_chunks).reshape(height, width)
    return RenderResult(image, alpha, depth_map)


def render_views(gaussians, poses, intrinsics, height, width, render_config=None):
    """Render one unbatched set from several (T, 8) DQ poses; intrinsics (T, 4). Returns (T, H, W, 3)."""
    options = render_options(render_config)
    images = []
    for pose, k in zip(poses, intrinsics):
        images.append(render(gaussians, CameraModel.from_pose(pose, k, height, width), **options).image)
    return torch.stack(images)


def render_options(render_config):
    if render_config is None:
        return {}
    return {
        "background": tuple(render_config.background),
        "near": render_config.near,
        "eps": render_config.covariance_eps,
        "max_alpha": render_config.max_alpha,
        "cutoff_sigma": render_config.cutoff_sigma,
        "chunk_pixels": render_config.chunk_pixels,
    }


def _sample_two_gaussians(generator):
    def rand(*shape):
        return torch.rand(shape, generator=generator, dtype=VERIFY_DTYPE)

    means = torch.stack((0.1 * (rand(2) - 0.5), 0.1 * (rand(2) - 0.5), torch.tensor([1.0, 1.6], dtype=VERIFY_DTYPE)), -1)
    opacities = 0.3 + 0.5 * rand(2)
    scales = 0.05 + 0.05 * rand(2, 3)
    colors = rand(2, 3)
    translation = 0.05 * (rand(3) - 0.5)
    return means, opacities, scales, colors, translation


@register_primitive("render_pixel", sample=_sample_two_gaussians,
                    exclusion="depth ties between the two Gaussians (centres 0.6 units apart in depth)")
def _render_probe(means, opacities, scales, colors, translation):
    rotations = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=means.dtype).expand(2, 4)
    gaussians = GaussianSet(means, opacities, rotations, scales, colors)
    pose = PoseSE3(torch.eye(3, dtype=means.dtype), translation)
    camera = CameraModel(torch.tensor([8.0, 8.0, 2.0, 2.0], dtype=means.dtype), pose, 4, 4)
    result = render(gaussians, camera, cutoff_sigma=None)
    return torch.cat((result.image.reshape(-1), result.depth.reshape(-1)))


# ==========================================
# 3. PLY files
# ==========================================
#
# Binary little-endian, one ``vertex`` element, properties in this order:
#   x y z              float  centre (canonical frame)
#   opacity            float  in (0, 1), stored as is (not as a logit)
#   rot_0..rot_3       float  unit quaternion w x y z
#   scale_0..scale_2   float  linear scales (not logs)
#   f_0..f_{K-1}       float  colour channels, K = 3 (k + 1)^2
#   source_frame       int    provenance frame index
#   source_pixel       int    provenance pixel index (row-major)
# "float" is float32 or float64 according to the exported tensors.

_PLY_SIZES = {"char": 1, "uchar": 1, "int8": 1, "uint8": 1, "short": 2, "ushort": 2, "int16": 2,
              "uint16": 2, "int": 4, "uint": 4, "int32": 4, "uint32": 4, "float": 4, "float32": 4,
              "double": 8, "float64": 8}


def export_ply(gaussians):
    """Serialize an unbatched GaussianSet; returns the file contents as bytes."""
    if gaussians.batch_shape:
        raise ContractViolation("export_ply takes a single, unbatched GaussianSet")
    float_type = "f8" if gaussians.means.dtype == torch.float64 else "f4"
    channels = gaussians.colors.shape[-1]
    names = (["x", "y", "z", "opacity"] + [f"rot_{i}" for i in range(4)] + [f"scale_{i}" for i in range(3)]
             + [f"f_{i}" for i in range(channels)])
    dtype = [(name, "<" + float_type) for name in names] + [("source_frame", "<i4"), ("source_pixel", "<i4")]
    count = len(gaussians)
    vertices = np.empty(count, dtype=dtype)
    if count:
        columns = torch.cat((gaussians.means, gaussians.opacities[:, None], gaussians.rotations,
                             gaussians.scales, gaussians.colors), dim=-1).detach().cpu().numpy()
        for position, name in enumerate(names):
            vertices[name] = columns[:, position]
        frame = gaussians.source_frame if gaussians.source_frame is not None else torch.full((count,), -1)
        pixel = gaussians.source_pixel if gaussians.source_pixel is not None else torch.full((count,), -1)
        vertices["source_frame"] = frame.cpu().numpy()
        vertices["source_pixel"] = pixel.cpu().numpy()
    element = PlyElement.describe(vertices, "vertex")
    comments = [f"sh_degree {gaussians.sh_degree}"]
    if gaussians.image_size is not None:
        comments.append(f"image_size {gaussians.image_size[0]} {gaussians.image_size[1]}")
    buffer = io.BytesIO()
    PlyData([element], text=False, byte_order="<", comments=comments).write(buffer)
    return buffer.getvalue()


def _check_ply_layout(data):
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n"):
        raise PlyFormatError("missing 'ply' magic", offset=0)
    if end < 0:
        raise PlyFormatError("header has no end_header line", offset=len(data))
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body_start = end + len(marker)
    if "format binary_little_endian 1.0" not in header:
        raise PlyFormatError("only binary_little_endian 1.0 files are supported", offset=0)

    count, row_size, in_vertex = None, 0, False
    for line in header:
        fields = line.split()
        if fields[:2] == ["element", "vertex"]:
            try:
                count = int(fields[2])
            except (IndexError, ValueError):
                raise PlyFormatError(f"bad vertex count line '{line}'",
                                     offset=data.find(line.encode("ascii", errors="replace"))) from None
            in_vertex = True
        elif fields[:1] == ["element"]:
            in_vertex = False
        elif fields[:1] == ["property"] and in_vertex:
            if fields[1] == "list" or fields[1] not in _PLY_SIZES:
                raise PlyFormatError(f"unsupported vertex property '{line}'", offset=0)
            row_size += _PLY_SIZES[fields[1]]
    if count is None or count < 0:
        raise PlyFormatError("no valid 'element vertex' declaration", offset=0)
    expected = count * row_size
    actual = len(data) - body_start
    if actual != expected:
        raise PlyFormatError(
            f"vertex count {count} needs {expected} body bytes but {actual} are present",
            offset=body_start + min(actual, expected))


def import_ply(data):
    """Inverse of ``export_ply``."""
    _check_ply_layout(data)
    try:
        ply = PlyData.read(io.BytesIO(data))
        vertices = ply["vertex"].data
    except Exception as exc:
        raise PlyFormatError(f"unreadable PLY body: {exc}") from exc

    names = vertices.dtype.names or ()
    required = ["x", "y", "z", "opacity"] + [f"rot_{i}" for i in range(4)] + [f"scale_{i}" for i in range(3)]
    missing = [n for n in required if n not in names]
    if missing:
        raise PlyFormatError(f"missing vertex properties: {', '.join(missing)}")
    channels = len([n for n in names if re.fullmatch(r"f_\d+", n)])
    sh_degree = {3: 0, 12: 1}.get(channels)
    if sh_degree is None:
        raise PlyFormatError(f"{channels} colour channels do not match SH degree 0 or 1")

    def column(name):
        return torch.from_numpy(np.ascontiguousarray(vertices[name]).astype(vertices[name].dtype.newbyteorder("=")))

    def stack(keys):
        if not len(vertices):
            dtype = torch.float64 if vertices.dtype[names[0]].itemsize == 8 else torch.float32
            return torch.zeros(0, len(keys), dtype=dtype)
        return torch.stack([column(k) for k in keys], dim=-1)

    image_size = None
    for comment in ply.comments:
        fields = comment.split()
        if fields[:1] == ["image_size"] and len(fields) == 3:
            image_size = (int(fields[1]), int(fields[2]))

    source_frame = column("source_frame").long() if "source_frame" in names else None
    source_pixel = column("source_pixel").long() if "source_pixel" in names else None
    if source_frame is not None and bool((source_frame < 0).any()):
        source_frame = source_pixel = None
    return GaussianSet(
        means=stack(["x", "y", "z"]),
        opacities=stack(["opacity"]).reshape(-1),
        rotations=stack([f"rot_{i}" for i in range(4)]),
        scales=stack([f"scale_{i}" for i in range(3)]),
        colors=stack([f"f_{i}" for i in range(channels)]),
        sh_degree=sh_degree,
        source_frame=source_frame,
        source_pixel=source_pixel,
        image_size=image_size,
    )


# ==========================================
# 4. Images
# ==========================================

DEPTH_UNITS_PER_SCENE_UNIT = 1000.0
SRGB_RENDERING_INTENT = 0  # perceptual


def to_uint8(image):
    array = image.detach().clamp(0.0, 1.0).cpu().numpy()
    return np.round(array * 255.0).astype(np.uint8)


def save_png(image, path):
    """8-bit sRGB PNG from an (H, W, 3) tensor in [0, 1].

    Colours are display-referred end to end (scene textures, ingested frames and splat colours all live
    in sRGB), so values are quantized without a transfer curve and the file carries an sRGB chunk.
    """
    info = PngImagePlugin.PngInfo()
    info.add(b"sRGB", bytes([SRGB_RENDERING_INTENT]))
    Image.fromarray(to_uint8(image)).save(path, pnginfo=info)


def save_depth_png(depth, path):
    """16-bit grayscale PNG, 1000 counts per scene unit, saturating at 65535."""
    counts = np.clip(np.round(depth.detach().cpu().numpy() * DEPTH_UNITS_PER_SCENE_UNIT), 0, 65535)
    Image.fromarray(counts.astype(np.uint16)).save(path)


def load_depth_png(path):
    try:
        with Image.open(path) as handle:
            array = np.asarray(handle, dtype=np.float64)
    except OSError as exc:
        raise DataError(f"cannot read depth image {path}: {exc}") from exc
    return torch.from_numpy(array / DEPTH_UNITS_PER_SCENE_UNIT)
