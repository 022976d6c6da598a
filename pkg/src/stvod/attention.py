"""Attention mechanisms: dense multi-head, deformable, temporal deformable.

All three share conventions: model width d splits into M heads of C_v = d/M
channels; attention weights are positive and normalize to 1 per query per
head (for the temporal variant, jointly across frames and points); sampling
offsets live in normalized [0, 1] coordinates and are resolved against a map
with align-corners scaling (x maps to column x * (W - 1)).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Linear
from .tensor import (
    ParamRegistry,
    Tensor,
    bilinear_sample,
    concat,
    matmul,
    reshape,
    softmax,
    transpose,
)


def rescale_reference(points, extent: tuple[int, int]) -> np.ndarray:
    """Map normalized (x, y) points onto a (H, W) map's pixel grid.

    Align-corners: (0, 0) lands on pixel (0, 0), (1, 1) on (W - 1, H - 1).
    """
    h, w = extent
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise ContractError(f"reference points must end in 2, got {pts.shape}")
    out = np.empty_like(pts)
    out[..., 0] = pts[..., 0] * (w - 1)
    out[..., 1] = pts[..., 1] * (h - 1)
    return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., M, n, C_v]."""
    *lead, n, d = x.shape
    split = reshape(x, (*lead, n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return transpose(split, axes)


def _merge_heads(x: Tensor, d: int) -> Tensor:
    """[..., M, n, C_v] -> [..., n, d]."""
    *lead, m, n, cv = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return reshape(transpose(x, axes), (*lead, n, d))


def _swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


class MultiHeadAttention:
    """Dense scaled dot-product attention over an explicit key/value set.

    Per head m the weight on key k is softmax over k of
    q_m . k_m / sqrt(C_v); the output stacks per-head value mixtures and
    projects them back to width d.  Positional terms are the caller's job.
    Leading axes batch independent attention problems.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, heads: int) -> None:
        if d % heads != 0:
            raise ContractError(f"model width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.q_proj = Linear(reg, f"{prefix}.q", d, d)
        self.k_proj = Linear(reg, f"{prefix}.k", d, d)
        self.v_proj = Linear(reg, f"{prefix}.v", d, d)
        self.out_proj = Linear(reg, f"{prefix}.out", d, d, init="zeros")

    def weights(self, queries: Tensor, keys_values: Tensor,
                mask: Tensor | None = None) -> Tensor:
        """Attention weights [..., M, n_q, n_k]; rows sum to 1.

        ``mask`` is added to the pre-softmax logits (broadcast over heads);
        -inf entries receive exactly zero weight, so a block-diagonal mask
        makes one call equivalent to independent per-block attention.
        """
        if queries.shape[-1] != self.d or keys_values.shape[-1] != self.d:
            raise DimensionError("attention width", queries.shape, (self.d,))
        q = _split_heads(self.q_proj(queries), self.heads)
        k = _split_heads(self.k_proj(keys_values), self.heads)
        logits = matmul(q, _swap_last(k)) * (1.0 / math.sqrt(self.d // self.heads))
        if mask is not None:
            logits = logits + mask
        return softmax(logits, axis=-1)

    def __call__(self, queries: Tensor, keys_values: Tensor,
                 values: Tensor | None = None,
                 mask: Tensor | None = None) -> Tensor:
        """Mix values by attention weight; ``values`` defaults to the keys.

        Passing ``values`` separately lets callers put positional terms on
        the query/key side only.
        """
        if keys_values.shape[-2] == 0:
            raise ContractError("attention over an empty key set")
        if values is not None and values.shape != keys_values.shape:
            raise DimensionError("attention values", values.shape, keys_values.shape)
        attn = self.weights(queries, keys_values, mask)
        v = _split_heads(self.v_proj(values if values is not None else keys_values),
                         self.heads)
        mixed = matmul(attn, v)  # [..., M, n_q, C_v]
        return self.out_proj(_merge_heads(mixed, self.d))


class DeformableAttention:
    """Sparse attention that samples K learned offsets around each reference.

    A single linear head of width 3*M*K yields, per head, K (x, y) offsets in
    normalized units plus K weight logits (softmax over K).  Both that head's
    weights and bias start at zero: at step 0 every sample lands exactly on
    the reference point with uniform weights.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, heads: int, points: int) -> None:
        if d % heads != 0:
            raise ContractError(f"model width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.points = points
        self.sample_proj = Linear(reg, f"{prefix}.sample", d, 3 * heads * points, init="zeros")
        self.v_proj = Linear(reg, f"{prefix}.v", d, d)
        self.out_proj = Linear(reg, f"{prefix}.out", d, d, init="zeros")

    def sample_plan(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        """Offsets [..., n, M, K, 2] and head weights [..., n, M, K] summing to 1."""
        *lead, n, _ = queries.shape
        m, k = self.heads, self.points
        raw = self.sample_proj(queries)
        offsets = reshape(raw[..., : 2 * m * k], (*lead, n, m, k, 2))
        weights = softmax(reshape(raw[..., 2 * m * k:], (*lead, n, m, k)), axis=-1)
        return offsets, weights

    def __call__(self, queries: Tensor, ref_points: Tensor, fmap: Tensor) -> Tensor:
        """Queries [n, d] against one [H, W, d] map, or [B, n, d] against
        [B, H, W, d] with each batch row reading its own map."""
        if fmap.ndim not in (3, 4) or fmap.shape[-1] != self.d:
            raise DimensionError("deformable value map", fmap.shape, (self.d,))
        if fmap.ndim != queries.ndim + 1:
            raise DimensionError("deformable batch rank", fmap.shape, queries.shape)
        batched = fmap.ndim == 4
        B = fmap.shape[0] if batched else 1
        n = queries.shape[-2]
        m, k, cv = self.heads, self.points, self.d // self.heads
        h, w = fmap.shape[-3], fmap.shape[-2]

        offsets, weights = self.sample_plan(queries)
        lead = queries.shape[:-2]
        ref = reshape(ref_points, (*lead, n, 1, 1, 2))
        locations = ref + offsets  # [..., n, M, K, 2] normalized

        values = reshape(self.v_proj(fmap), (*lead, h, w, m, cv))
        if batched:
            vmaps = reshape(transpose(values, (0, 3, 1, 2, 4)), (B * m, h, w, cv))
            locs = reshape(transpose(locations, (0, 2, 1, 3, 4)), (B * m, n, k, 2))
            wts = reshape(transpose(weights, (0, 2, 1, 3)), (B * m, n, k, 1))
        else:
            vmaps = transpose(values, (2, 0, 1, 3))           # [M, h, w, C_v]
            locs = transpose(locations, (1, 0, 2, 3))         # [M, n, K, 2]
            wts = reshape(transpose(weights, (1, 0, 2)), (m, n, k, 1))
        sampled = bilinear_sample(vmaps, locs)                # [(B*)M, n, K, C_v]
        mixed = (wts * sampled).sum(axis=2)                   # [(B*)M, n, C_v]
        if batched:
            mixed = reshape(mixed, (B, m, n, cv))
        return self.out_proj(_merge_heads(mixed, self.d))


class TemporalDeformableAttention:
    """Deformable attention spread across L frame memories.

    Each frame gets its own 3*M*K slice of the sampling head; the K*L weight
    logits per head normalize jointly, so with L = 1 this reduces exactly to
    single-frame deformable attention with the same parameters.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, heads: int,
                 points: int, frames: int) -> None:
        if frames < 1:
            raise ContractError(f"temporal attention needs at least one frame, got {frames}")
        self.d = d
        self.heads = heads
        self.points = points
        self.frames = frames
        self.sample_proj = Linear(
            reg, f"{prefix}.sample", d, frames * 3 * heads * points, init="zeros"
        )
        self.v_proj = Linear(reg, f"{prefix}.v", d, d)
        self.out_proj = Linear(reg, f"{prefix}.out", d, d, init="zeros")

    def sample_plan(self, queries: Tensor) -> tuple[list[Tensor], Tensor]:
        """Per-frame offsets [n, M, K, 2] and joint weights [n, M, L*K].

        The weight logits of all frames normalize together, so the weights
        sum to 1 over (frame, point) per head.
        """
        n = queries.shape[0]
        m, k = self.heads, self.points
        raw = self.sample_proj(queries)
        per_frame_offsets = []
        per_frame_logits = []
        for f in range(self.frames):
            block = raw[:, f * 3 * m * k:(f + 1) * 3 * m * k]
            per_frame_offsets.append(reshape(block[:, : 2 * m * k], (n, m, k, 2)))
            per_frame_logits.append(reshape(block[:, 2 * m * k:], (n, m, k)))
        weights = softmax(concat(per_frame_logits, axis=2), axis=-1)
        return per_frame_offsets, weights

    def __call__(self, queries: Tensor, ref_points: Tensor, fmaps: list[Tensor]) -> Tensor:
        if len(fmaps) != self.frames:
            raise ContractError(f"expected {self.frames} frame maps, got {len(fmaps)}")
        widths = {tuple(f.shape) for f in fmaps}
        if len(widths) != 1:
            raise ContractError(f"frame maps disagree in shape: {sorted(widths)}")
        n = queries.shape[0]
        m, k, cv = self.heads, self.points, self.d // self.heads
        h, w, _ = fmaps[0].shape
        L = self.frames

        per_frame_offsets, weights = self.sample_plan(queries)

        ref = reshape(ref_points, (n, 1, 1, 2))
        accum: Tensor | None = None
        for f in range(L):
            values = reshape(self.v_proj(fmaps[f]), (h, w, m, cv))
            vmaps = transpose(values, (2, 0, 1, 3))               # [M, h, w, C_v]
            locs = transpose(ref + per_frame_offsets[f], (1, 0, 2, 3))
            wts = reshape(transpose(weights[:, :, f * k:(f + 1) * k], (1, 0, 2)),
                          (m, n, k, 1))
            sampled = bilinear_sample(vmaps, locs)                # [M, n, K, C_v]
            mixed = (wts * sampled).sum(axis=2)                   # [M, n, C_v]
            accum = mixed if accum is None else accum + mixed
        return self.out_proj(_merge_heads(accum, self.d))
