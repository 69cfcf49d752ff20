"""Unit dual quaternions for SE(3) camera poses.

Layout: a unit DQ is the last axis of a tensor of size 8, ``(w, x, y, z | w, x, y, z)``; the
first four numbers are the rotation quaternion q_r and the last four the dual part
q_d = 0.5 * (0, t) * q_r. A *pose* maps canonical (first camera) coordinates into the
coordinates of camera t, i.e. it is a world-to-camera extrinsic.

A pose set is a ``(..., T, 8)`` tensor whose frame 0 is exactly the identity DQ.
"""

import logging
from typing import NamedTuple

import torch

from common.exceptions import ContractViolation, DataError
from common.numerics import VERIFY_DTYPE, register_primitive

logger = logging.getLogger(__name__)

IDENTITY_DQ = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

_QUAT_CONJ = (1.0, -1.0, -1.0, -1.0)


def _tolerance(dtype):
    return 1e-6 if dtype == torch.float64 else 1e-4


class PoseSE3(NamedTuple):
    rotation: torch.Tensor     # (..., 3, 3)
    translation: torch.Tensor  # (..., 3)


# ==========================================
# 1. Quaternion helpers
# ==========================================

def quat_mul(a, b):
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack((
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ), dim=-1)


def quat_conjugate(q):
    return q * q.new_tensor(_QUAT_CONJ)


def quat_to_rotmat(q):
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = (
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    )
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(rotation):
    """Shepperd's method, branch picked per element by the largest diagonal term."""
    m = rotation
    m00, m01, m02 = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    m10, m11, m12 = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    m20, m21, m22 = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    trace = m00 + m11 + m22

    def root(value):
        return 2.0 * torch.sqrt(torch.clamp(1.0 + value, min=1e-12))

    s0 = root(trace)
    s1 = root(m00 - m11 - m22)
    s2 = root(m11 - m00 - m22)
    s3 = root(m22 - m00 - m11)
    candidates = torch.stack((
        torch.stack((0.25 * s0, (m21 - m12) / s0, (m02 - m20) / s0, (m10 - m01) / s0), -1),
        torch.stack(((m21 - m12) / s1, 0.25 * s1, (m01 + m10) / s1, (m02 + m20) / s1), -1),
        torch.stack(((m02 - m20) / s2, (m01 + m10) / s2, 0.25 * s2, (m12 + m21) / s2), -1),
        torch.stack(((m10 - m01) / s3, (m02 + m20) / s3, (m12 + m21) / s3, 0.25 * s3), -1),
    ), dim=-2)
    branch = torch.stack((trace, m00, m11, m22), dim=-1).argmax(dim=-1)
    index = branch[..., None, None].expand(branch.shape + (1, 4))
    quat = torch.gather(candidates, -2, index).squeeze(-2)
    quat = quat / quat.norm(dim=-1, keepdim=True)
    return _canonical_quat(quat)


def _canonical_quat(q):
    nonzero = (q != 0).to(torch.int8)
    first = nonzero.argmax(dim=-1, keepdim=True)
    lead = torch.gather(q, -1, first)
    sign = torch.where(lead < 0, -torch.ones_like(lead), torch.ones_like(lead))
    return q * sign


# ==========================================
# 2. Dual-quaternion algebra
# ==========================================

def identity_dq(*batch, dtype=None, device=None):
    base = torch.tensor(IDENTITY_DQ, dtype=dtype or torch.get_default_dtype(), device=device)
    return base.expand(batch + (8,)).clone()


def canonicalize_sign(dq):
    """Resolve the double cover: scalar of q_r >= 0, else first nonzero component of q_r > 0."""
    real = dq[..., :4]
    nonzero = (real != 0).to(torch.int8)
    first = nonzero.argmax(dim=-1, keepdim=True)
    lead = torch.gather(real, -1, first)
    sign = torch.where(lead < 0, -torch.ones_like(lead), torch.ones_like(lead))
    return dq * sign


def check_unit(dq, what="dual quaternion"):
    tol = _tolerance(dq.dtype)
    real, dual = dq[..., :4], dq[..., 4:]
    with torch.no_grad():
        norm_error = float((real.norm(dim=-1) - 1.0).abs().max()) if dq.numel() else 0.0
        ortho_error = float((real * dual).sum(-1).abs().max()) if dq.numel() else 0.0
    if norm_error > tol or ortho_error > tol:
        raise ContractViolation(
            f"{what} is not unit: |q_r|-1 = {norm_error:.2e}, <q_r,q_d> = {ortho_error:.2e}")
    return dq


def dq_mul(a, b, *, check=True):
    """Product of two unit DQs (composition ``a o b`` of rigid motions)."""
    if check:
        check_unit(a, "left operand")
        check_unit(b, "right operand")
    a_real, a_dual = a[..., :4], a[..., 4:]
    b_real, b_dual = b[..., :4], b[..., 4:]
    real = quat_mul(a_real, b_real)
    dual = quat_mul(a_real, b_dual) + quat_mul(a_dual, b_real)
    return canonicalize_sign(torch.cat((real, dual), dim=-1))


def dq_conjugate(p):
    """Quaternion conjugate of both parts; the inverse rigid motion of a unit DQ."""
    return canonicalize_sign(torch.cat((quat_conjugate(p[..., :4]), quat_conjugate(p[..., 4:])), dim=-1))


def _sample_raw_dq(generator):
    raw = torch.randn(8, generator=generator, dtype=VERIFY_DTYPE)
    raw[0] = 0.5 + raw[0].abs()
    return (raw,)


@register_primitive("normalize_raw_dq", sample=_sample_raw_dq,
                    exclusion="scalar part of the real quaternion bounded away from 0 (sign flip)")
def normalize_raw_dq(raw):
    """Project a raw 8-vector head output onto the unit-DQ manifold.

    q_r = raw_r / |raw_r|, q_d = raw_d - <raw_d, q_r> q_r (Gram-Schmidt), then sign-canonicalized.
    """
    raw_real, raw_dual = raw[..., :4], raw[..., 4:]
    norm = raw_real.norm(dim=-1, keepdim=True)
    if raw.numel() and float(norm.min()) <= 1e-8:
        raise ContractViolation("raw pose has a near-zero real part; camera head diverged or is uninitialised")
    real = raw_real / norm
    dual = raw_dual - (raw_dual * real).sum(-1, keepdim=True) * real
    return canonicalize_sign(torch.cat((real, dual), dim=-1))


def random_unit_dq(generator, *batch, translation_scale=1.0, dtype=VERIFY_DTYPE):
    quat = torch.randn(batch + (4,), generator=generator, dtype=dtype)
    quat = quat / quat.norm(dim=-1, keepdim=True)
    translation = translation_scale * torch.randn(batch + (3,), generator=generator, dtype=dtype)
    return se3_to_dq(PoseSE3(quat_to_rotmat(quat), translation))


def _sample_dq_pair(generator):
    return random_unit_dq(generator, 2), random_unit_dq(generator, 2)


register_primitive("dq_mul", sample=_sample_dq_pair,
                   exclusion="products with q_r scalar part near 0")(
    lambda a, b: dq_mul(a, b, check=False))


# ==========================================
# 3. SE(3) conversions
# ==========================================

def check_rotation(rotation):
    tol = _tolerance(rotation.dtype)
    eye = torch.eye(3, dtype=rotation.dtype, device=rotation.device)
    with torch.no_grad():
        ortho = float((rotation.transpose(-1, -2) @ rotation - eye).abs().max()) if rotation.numel() else 0.0
        det = float((torch.linalg.det(rotation) - 1.0).abs().max()) if rotation.numel() else 0.0
    if ortho > 10 * tol or det > 10 * tol:
        raise ContractViolation(f"degenerate rotation matrix (|RtR-I| = {ortho:.2e}, |det-1| = {det:.2e})")


def se3_to_dq(pose):
    check_rotation(pose.rotation)
    real = rotmat_to_quat(pose.rotation)
    pure = torch.cat((torch.zeros_like(pose.translation[..., :1]), pose.translation), dim=-1)
    dual = 0.5 * quat_mul(pure, real)
    return canonicalize_sign(torch.cat((real, dual), dim=-1))


def dq_to_se3(p):
    real, dual = p[..., :4], p[..., 4:]
    rotation = quat_to_rotmat(real)
    translation = 2.0 * quat_mul(dual, quat_conjugate(real))[..., 1:]
    return PoseSE3(rotation, translation)


def compose_se3(a, b):
    """``a o b``: apply b first, then a."""
    rotation = a.rotation @ b.rotation
    translation = (a.rotation @ b.translation.unsqueeze(-1)).squeeze(-1) + a.translation
    return PoseSE3(rotation, translation)


def invert_se3(pose):
    rotation = pose.rotation.transpose(-1, -2)
    translation = -(rotation @ pose.translation.unsqueeze(-1)).squeeze(-1)
    return PoseSE3(rotation, translation)


def camera_centers(pose):
    """Position of each camera in canonical coordinates, ``-R^T t``."""
    return invert_se3(pose).translation


def se3_to_matrix(pose):
    batch = pose.translation.shape[:-1]
    matrix = torch.zeros(batch + (4, 4), dtype=pose.translation.dtype, device=pose.translation.device)
    matrix[..., :3, :3] = pose.rotation
    matrix[..., :3, 3] = pose.translation
    matrix[..., 3, 3] = 1.0
    return matrix


def dq_to_matrix(p):
    return se3_to_matrix(dq_to_se3(p))


def matrix_to_dq(matrix):
    return se3_to_dq(PoseSE3(matrix[..., :3, :3], matrix[..., :3, 3]))


def se3_exp(twist):
    """Exponential map of a twist ``(omega, v)`` (..., 6) to a PoseSE3."""
    omega, v = twist[..., :3], twist[..., 3:]
    zero = torch.zeros_like(omega[..., 0])
    wx, wy, wz = omega.unbind(-1)
    hat = torch.stack((
        torch.stack((zero, -wz, wy, v[..., 0]), -1),
        torch.stack((wz, zero, -wx, v[..., 1]), -1),
        torch.stack((-wy, wx, zero, v[..., 2]), -1),
        torch.stack((zero, zero, zero, zero), -1),
    ), dim=-2)
    matrix = torch.linalg.matrix_exp(hat)
    return PoseSE3(matrix[..., :3, :3], matrix[..., :3, 3])


# ==========================================
# 4. Pose sets
# ==========================================

def with_identity_first(rest):
    """Prepend the fixed identity pose of frame 1 to predicted poses of frames 2..T."""
    identity = identity_dq(*rest.shape[:-2], 1, dtype=rest.dtype, device=rest.device)
    return torch.cat((identity, rest), dim=-2)


def check_pose_set(poses):
    if poses.shape[-1] != 8 or poses.dim() < 2:
        raise ContractViolation(f"pose set must be (..., T, 8), got {tuple(poses.shape)}")
    identity = poses.new_tensor(IDENTITY_DQ)
    if not torch.equal(poses[..., 0, :], identity.expand_as(poses[..., 0, :])):
        raise ContractViolation("frame 1 of a pose set must be the identity DQ")
    return poses


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ContractViolation(f"pose sets differ in shape: {tuple(pred.shape)} vs {tuple(gt.shape)}")


# ==========================================
# 5. Camera losses
# ==========================================

def dq_align_loss(pred, gt):
    """Alignment loss: sum over frames 2..T of |p_hat - gt p*| + |p_hat - p gt*| (L2 over 8 coefficients).

    Both sets are sign-canonicalized first. Batched inputs are averaged over leading dims.
    """
    _check_pair(pred, gt)
    pred = canonicalize_sign(pred[..., 1:, :])
    gt = canonicalize_sign(gt[..., 1:, :])
    identity = pred.new_tensor(IDENTITY_DQ)
    forward = (identity - dq_mul(gt, dq_conjugate(pred), check=False)).norm(dim=-1)
    backward = (identity - dq_mul(pred, dq_conjugate(gt), check=False)).norm(dim=-1)
    per_clip = (forward + backward).sum(-1)
    return per_clip.mean() if per_clip.dim() else per_clip


def _dq_mse(pred, gt):
    pred = canonicalize_sign(pred[..., 1:, :])
    gt = canonicalize_sign(gt[..., 1:, :])
    if pred.shape[-2] == 0:
        return pred.sum() * 0.0
    return ((pred - gt) ** 2).mean()


def quat_trans_loss(pred, gt):
    """MSE over (sign-canonical unit quaternion, translation) of frames 2..T."""
    _check_pair(pred, gt)

    def split(poses):
        poses = canonicalize_sign(poses[..., 1:, :])
        return torch.cat((poses[..., :4], dq_to_se3(poses).translation), dim=-1)

    pred_qt, gt_qt = split(pred), split(gt)
    if pred_qt.shape[-2] == 0:
        return pred_qt.sum() * 0.0
    return ((pred_qt - gt_qt) ** 2).mean()


def camera_loss_terms(pred, gt, *, parameterization="dq", align=True):
    """Named camera-loss components: ``camera_mse`` always, ``camera_align`` for DQ with alignment on."""
    _check_pair(pred, gt)
    if parameterization == "quat_trans":
        return {"camera_mse": quat_trans_loss(pred, gt)}
    if parameterization != "dq":
        raise ContractViolation(f"unknown pose parameterization '{parameterization}'")
    terms = {"camera_mse": _dq_mse(pred, gt)}
    if align:
        terms["camera_align"] = dq_align_loss(pred, gt)
    return terms


def _sample_pose_sets(generator):
    pred = with_identity_first(random_unit_dq(generator, 2, translation_scale=0.5))
    gt = with_identity_first(random_unit_dq(generator, 2, translation_scale=0.5))
    return pred, gt


@register_primitive("camera_loss", sample=_sample_pose_sets,
                    exclusion="prediction equal to ground truth (L2 kink at zero residual)")
def camera_loss(pred, gt, *, parameterization="dq", align=True):
    """MSE over the 8 DQ coefficients of frames 2..T plus the alignment loss."""
    return sum(camera_loss_terms(pred, gt, parameterization=parameterization, align=align).values())


# ==========================================
# 6. Pose files
# ==========================================

def format_pose_lines(poses, frame_indices=None):
    """One line per frame: ``frame_index q_r(4) q_d(4)`` as decimal text."""
    poses = poses.detach().to(torch.float64).reshape(-1, 8)
    indices = list(frame_indices) if frame_indices is not None else list(range(poses.shape[0]))
    if len(indices) != poses.shape[0]:
        raise ContractViolation("one frame index per pose is required")
    lines = []
    for index, row in zip(indices, poses.tolist()):
        lines.append(" ".join([str(int(index))] + [f"{value:.17g}" for value in row]))
    return "\n".join(lines) + "\n"


def parse_pose_lines(text):
    """Inverse of ``format_pose_lines``; returns (frame indices, (T, 8) float64 tensor)."""
    indices, rows = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 9:
            raise DataError(f"pose line {number}: expected 9 fields, got {len(fields)}")
        try:
            indices.append(int(fields[0]))
            rows.append([float(value) for value in fields[1:]])
        except ValueError as exc:
            raise DataError(f"pose line {number}: {exc}") from exc
    poses = torch.tensor(rows, dtype=torch.float64).reshape(-1, 8)
    return indices, poses


def format_matrix_lines(poses):
    """4x4 world-to-camera matrices, one row-major matrix (16 numbers) per line."""
    matrices = dq_to_matrix(poses.detach().to(torch.float64).reshape(-1, 8))
    return "".join(" ".join(f"{v:.17g}" for v in m.reshape(-1).tolist()) + "\n" for m in matrices)
