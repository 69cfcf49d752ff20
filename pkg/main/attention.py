"""Decoder building blocks.

Token layout: visual tokens are ``(B, T, L, C)`` with ``L = rows * cols`` patch tokens per frame,
camera tokens are ``(B, T, C)``. The video-camera attention runs over the mixed sequence
``[cam_1, vis_1..., cam_2, vis_2..., ...]`` of length ``T * (1 + L)``.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from common.exceptions import ContractViolation
from common.numerics import VERIFY_DTYPE, register_primitive

logger = logging.getLogger(__name__)


# ==========================================
# 1. Token containers
# ==========================================

@dataclass
class TokenState:
    visual: torch.Tensor   # (B, T, L, C)
    camera: torch.Tensor   # (B, T, C)
    grid: tuple

    def __post_init__(self):
        if self.visual.dim() != 4 or self.camera.dim() != 3:
            raise ContractViolation(
                f"expected visual (B,T,L,C) and camera (B,T,C), got {tuple(self.visual.shape)} "
                f"and {tuple(self.camera.shape)}")
        batch, frames, tokens, width = self.visual.shape
        if self.camera.shape != (batch, frames, width):
            raise ContractViolation("visual and camera tokens disagree on batch, frame count or width")
        if tokens != self.grid[0] * self.grid[1]:
            raise ContractViolation(f"{tokens} visual tokens per frame do not fill a {self.grid} patch grid")

    @property
    def frames(self):
        return self.visual.shape[1]

    @property
    def tokens_per_frame(self):
        return self.visual.shape[2]

    @property
    def width(self):
        return self.visual.shape[3]


@dataclass(frozen=True)
class IndexMap:
    frames: int
    tokens_per_frame: int
    grid: tuple

    @property
    def length(self):
        return self.frames * (1 + self.tokens_per_frame)

    @property
    def camera_index(self):
        return torch.arange(self.frames) * (1 + self.tokens_per_frame)

    @property
    def visual_index(self):
        return self.camera_index[:, None] + 1 + torch.arange(self.tokens_per_frame)[None, :]


def build_mixed_sequence(state):
    """Interleave camera and visual tokens frame by frame: ``[cam_t, vis_t...]`` for t = 1..T."""
    batch, frames, tokens, width = state.visual.shape
    blocks = torch.cat((state.camera.unsqueeze(2), state.visual), dim=2)
    return blocks.reshape(batch, frames * (1 + tokens), width), IndexMap(frames, tokens, tuple(state.grid))


def split_mixed_sequence(sequence, index_map):
    batch, length, width = sequence.shape
    if length != index_map.length:
        raise ContractViolation(f"sequence length {length} does not match index map ({index_map.length})")
    blocks = sequence.reshape(batch, index_map.frames, 1 + index_map.tokens_per_frame, width)
    return TokenState(blocks[:, :, 1:], blocks[:, :, 0], index_map.grid)


def build_blocked_causal_mask(frames, tokens_per_frame, *, causal=True, device=None):
    """Boolean (S, S) mask, True = attend. Camera token t sees frames <= t; visual rows see everything."""
    if frames < 1:
        raise ContractViolation("need at least one frame")
    block = 1 + tokens_per_frame
    position = torch.arange(frames * block, device=device)
    frame_of = position // block
    is_camera = (position % block) == 0
    if not causal:
        return torch.ones(position.numel(), position.numel(), dtype=torch.bool, device=device)
    return (~is_camera)[:, None] | (frame_of[None, :] <= frame_of[:, None])


# ==========================================
# 2. Rotary position embeddings
# ==========================================

def _inverse_frequencies(dim, base, dtype, device=None):
    return base ** (-torch.arange(0, dim, 2, dtype=dtype, device=device) / dim)


def apply_rope(x, angles):
    """Rotate consecutive channel pairs of ``x`` (..., S, D) by ``angles`` (S, D/2)."""
    pairs = x.unflatten(-1, (x.shape[-1] // 2, 2))
    even, odd = pairs[..., 0], pairs[..., 1]
    cos, sin = angles.cos(), angles.sin()
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


def rope_angles_1d(positions, dim, base, dtype=None):
    dtype = dtype or torch.get_default_dtype()
    return positions[:, None].to(dtype) * _inverse_frequencies(dim, base, dtype, positions.device)


def rope_angles_2d(rows, cols, dim, base, dtype=None):
    half = dim // 2
    return torch.cat((rope_angles_1d(rows, half, base, dtype), rope_angles_1d(cols, half, base, dtype)), dim=-1)


def apply_rope_1d(x, positions, base=100.0):
    return apply_rope(x, rope_angles_1d(positions, x.shape[-1], base, x.dtype))


def apply_rope_2d(x, rows, cols, base=100.0):
    if x.shape[-1] % 4:
        raise ContractViolation("2D rotary embedding needs a channel count divisible by 4")
    return apply_rope(x, rope_angles_2d(rows, cols, x.shape[-1], base, x.dtype))


def grid_coordinates(grid, device=None):
    rows, cols = grid
    row = torch.arange(rows, device=device).repeat_interleave(cols)
    col = torch.arange(cols, device=device).repeat(rows)
    return row, col


@lru_cache(maxsize=32)
def _mixed_angle_table(frames, grid, dim, base, dtype):
    row, col = grid_coordinates(grid)
    visual = rope_angles_2d(row, col, dim, base, dtype)
    camera = rope_angles_1d(torch.arange(frames), dim, base, dtype)
    blocks = torch.cat((camera[:, None, :], visual[None].expand(frames, -1, -1)), dim=1)
    return blocks.reshape(-1, dim // 2)


def mixed_rope_angles(frames, grid, dim, base, dtype=None):
    """Angles for the mixed sequence: 1D by frame index on camera rows, 2D by patch row/col on visual rows."""
    dtype = dtype or torch.get_default_dtype()
    return _mixed_angle_table(frames, tuple(grid), dim, float(base), dtype)


# ==========================================
# 3. Functional attention cores
# ==========================================

def masked_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d) + mask) v over (..., S, D) tensors; ``mask`` is boolean, True = attend."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def neighbor_context_sizes(frames, tokens_per_frame):
    """Number of key/value tokens each frame sees under cross-neighbor attention."""
    if frames == 1:
        return [0]
    return [tokens_per_frame if t in (0, frames - 1) else 2 * tokens_per_frame for t in range(frames)]


def cross_neighbor_attend(q, k, v):
    """Per-frame cross-attention against the concatenated keys/values of frames t-1 and t+1.

    Shapes are (B, H, T, L, D). Boundary frames attend to their single neighbor. With T = 1
    there is no neighbor and the result is all zeros (the sublayer reduces to its residual).
    """
    frames, tokens = q.shape[2], q.shape[3]
    if frames == 1:
        return torch.zeros_like(q)
    pad = (0, 0, 0, 0, 1, 1)
    k_pad, v_pad = F.pad(k, pad), F.pad(v, pad)
    k_near = torch.cat((k_pad[:, :, :-2], k_pad[:, :, 2:]), dim=3)
    v_near = torch.cat((v_pad[:, :, :-2], v_pad[:, :, 2:]), dim=3)

    index = torch.arange(frames, device=q.device)
    has_prev = (index > 0).repeat_interleave(tokens)
    has_next = (index < frames - 1).repeat_interleave(tokens)
    valid = torch.cat((has_prev.view(frames, tokens), has_next.view(frames, tokens)), dim=1)
    mask = valid[:, None, :]  # (T, 1, 2L)
    return masked_attention(q, k_near, v_near, mask)


def framewise_modulate(x, params, sublayer, norm):
    """Pre-norm residual sublayer with per-frame scale/shift/gate.

    ``x`` is (B, T, L, C); ``params`` is ``(gamma, beta, delta)`` each (B, T, 1, C), or None
    for the plain residual ``x + f(norm(x))``.
    """
    normed = norm(x)
    if params is None:
        return x + sublayer(normed)
    gamma, beta, delta = params
    return x + (1 + delta) * sublayer(normed * (1 + gamma) + beta)


# ==========================================
# 4. Modules
# ==========================================

class FeedForward(nn.Module):
    def __init__(self, width, mlp_ratio=4.0):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class FramewiseModulation(nn.Module):
    """Regresses (gamma, beta, delta) from each frame's camera token. Zero at initialization."""

    def __init__(self, width):
        super().__init__()
        # Built from zeros so creating it draws nothing from the global RNG.
        self.weight = nn.Parameter(torch.zeros(3 * width, width))
        self.bias = nn.Parameter(torch.zeros(3 * width))

    def forward(self, camera):
        params = F.linear(camera, self.weight, self.bias).unsqueeze(2)
        return params.chunk(3, dim=-1)


class SelfAttention(nn.Module):
    """Multi-head self-attention with rotary phases supplied by the caller."""

    def __init__(self, width, num_heads):
        super().__init__()
        if width % num_heads:
            raise ContractViolation(f"width {width} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, angles, mask=None):
        batch, length, width = x.shape
        qkv = self.qkv(x).reshape(batch, length, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = apply_rope(qkv[0], angles), apply_rope(qkv[1], angles), qkv[2]
        out = masked_attention(q, k, v, mask)
        return self.proj(out.transpose(1, 2).reshape(batch, length, width))


class VideoCameraAttention(nn.Module):
    """Masked self-attention over the mixed camera+visual sequence, with a residual."""

    def __init__(self, width, num_heads, rope_base=100.0):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = SelfAttention(width, num_heads)
        self.rope_base = rope_base

    def forward(self, state, mask):
        sequence, index_map = build_mixed_sequence(state)
        if mask is not None and mask.shape != (index_map.length, index_map.length):
            raise ContractViolation(
                f"mask {tuple(mask.shape)} does not match mixed sequence length {index_map.length}")
        angles = mixed_rope_angles(state.frames, state.grid, self.attn.head_dim, self.rope_base, sequence.dtype)
        sequence = sequence + self.attn(self.norm(sequence), angles.to(sequence.device), mask)
        return split_mixed_sequence(sequence, index_map)


class CrossNeighborAttention(nn.Module):
    """Visual tokens of frame t cross-attend to frames t-1 and t+1. Returns the branch output only."""

    def __init__(self, width, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        batch, frames, tokens, width = x.shape
        q = self.q(x).reshape(batch, frames, tokens, self.num_heads, self.head_dim).permute(0, 3, 1, 2, 4)
        kv = self.kv(x).reshape(batch, frames, tokens, 2, self.num_heads, self.head_dim).permute(3, 0, 4, 1, 2, 5)
        out = cross_neighbor_attend(q, kv[0], kv[1])
        return self.proj(out.permute(0, 2, 3, 1, 4).reshape(batch, frames, tokens, width))


class DecoderBlock(nn.Module):
    """Video-camera attention, then modulated cross-neighbor attention, then modulated feed-forward.

    Camera tokens go through the same feed-forward network without modulation.
    """

    def __init__(self, config):
        super().__init__()
        width = config.width
        self.vca = VideoCameraAttention(width, config.num_heads, config.rope_base)
        self.cna_norm = nn.LayerNorm(width)
        self.cna = CrossNeighborAttention(width, config.num_heads) if config.cna else None
        self.ffn_norm = nn.LayerNorm(width)
        self.ffn = FeedForward(width, config.mlp_ratio)
        self.cna_modulation = FramewiseModulation(width) if config.modulation and config.cna else None
        self.ffn_modulation = FramewiseModulation(width) if config.modulation else None

    def forward(self, state, mask):
        state = self.vca(state, mask)
        visual, camera = state.visual, state.camera
        if self.cna is not None and state.frames > 1:
            params = self.cna_modulation(camera) if self.cna_modulation is not None else None
            visual = framewise_modulate(visual, params, self.cna, self.cna_norm)
        params = self.ffn_modulation(camera) if self.ffn_modulation is not None else None
        visual = framewise_modulate(visual, params, self.ffn, self.ffn_norm)
        camera = camera + self.ffn(self.ffn_norm(camera))
        return TokenState(visual, camera, state.grid)


class EncoderBlock(nn.Module):
    """Per-frame pre-norm transformer block with 2D rotary embeddings on the patch grid."""

    def __init__(self, width, num_heads, mlp_ratio=4.0, rope_base=100.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, num_heads)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = FeedForward(width, mlp_ratio)
        self.rope_base = rope_base

    def forward(self, x, grid):
        row, col = grid_coordinates(grid, x.device)
        angles = rope_angles_2d(row, col, self.attn.head_dim, self.rope_base, x.dtype)
        x = x + self.attn(self.norm1(x), angles)
        return x + self.ffn(self.norm2(x))


# ==========================================
# 5. Registered primitives
# ==========================================

def _randn(generator, *shape):
    return torch.randn(shape, generator=generator, dtype=VERIFY_DTYPE)


@register_primitive("masked_attention", sample=lambda g: (
        _randn(g, 1, 2, 4, 4), _randn(g, 1, 2, 4, 4), _randn(g, 1, 2, 4, 4)))
def _masked_attention_probe(q, k, v):
    return masked_attention(q, k, v, build_blocked_causal_mask(2, 1))


@register_primitive("cross_neighbor_attention", sample=lambda g: (
        _randn(g, 1, 2, 3, 2, 4), _randn(g, 1, 2, 3, 2, 4), _randn(g, 1, 2, 3, 2, 4)))
def _cross_neighbor_probe(q, k, v):
    return cross_neighbor_attend(q, k, v)


@register_primitive("rope_2d", sample=lambda g: (_randn(g, 2, 6, 8),))
def _rope_2d_probe(x):
    row, col = grid_coordinates((2, 3))
    return apply_rope_2d(x, row, col)


@register_primitive("framewise_modulate", sample=lambda g: (
        _randn(g, 1, 2, 3, 8), 0.3 * _randn(g, 1, 2, 1, 8), 0.3 * _randn(g, 1, 2, 1, 8),
        0.3 * _randn(g, 1, 2, 1, 8)))
def _framewise_modulate_probe(x, gamma, beta, delta):
    return framewise_modulate(x, (gamma, beta, delta), torch.tanh,
                              lambda t: F.layer_norm(t, t.shape[-1:]))
