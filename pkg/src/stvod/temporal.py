"""Temporal aggregation stacks on top of the single-frame detector.

Three wirings share the same building blocks:

* ``transvod``: per-frame detection, then one stage of query aggregation
  (reference-frame object queries fused into the current frame's queries by
  dense attention) plus memory-level fusion over all frames by temporal
  deformable attention, decoded against the fused memory.
* ``transvod_pp``: three coarse-to-fine stages; each stage filters queries on
  current and reference frames by classification confidence, enriches the
  survivors with their own pooled region features through dynamic pointwise
  transforms, aggregates, and decodes against the current frame's memory with
  auxiliary supervision per stage.
* ``lite``: one shared stack for a whole window of frames; every frame's
  queries enter one pool, each stage keeps the top scorers of the pool,
  aggregates each frame's survivors against the pool, and decodes all frames
  at once.

Query filtering ranks by max class sigmoid and routes gradients only through
the values of the selected rows, never through the ranking itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import MultiHeadAttention, TemporalDeformableAttention
from .errors import ContractError
from .nn import FeedForward, LayerNorm, Linear, copy_params
from .spatial import (
    DecoderLayer,
    FrameOutput,
    PredictionHeads,
    SpatialConfig,
    SpatialDetector,
    cell_reference_grid,
)
from .tensor import (
    ParamRegistry,
    Tensor,
    bilinear_sample,
    concat,
    matmul,
    relu,
    take_rows,
)

VARIANTS = ("transvod", "transvod_pp", "lite")


@dataclass
class TemporalConfig:
    variant: str = "transvod"
    stages: int | None = None                 # J; 1 for transvod, 3 otherwise
    k_schedule: tuple[int, ...] | None = None  # resolved against the model
    n_tdte: int = 1
    n_tqe: int = 3
    n_tdtd: int = 1
    n_ref: int = 4
    window: int = 12
    d_hidden: int | None = None               # dynamic-conv width, default d/4
    frame_identity: bool = False               # lite: learned per-slot embedding

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stages is None:
            self.stages = 1 if self.variant == "transvod" else 3
        want = 1 if self.variant == "transvod" else 3
        if self.stages != want:
            raise ContractError(
                f"{self.variant} runs {want} aggregation stage(s), got {self.stages}"
            )
        if self.k_schedule is not None:
            ks = tuple(self.k_schedule)
            if len(ks) != self.stages:
                raise ContractError(
                    f"k_schedule needs {self.stages} entries, got {len(ks)}"
                )
            if any(a < b for a, b in zip(ks, ks[1:])):
                raise ContractError(f"k_schedule must be non-increasing, got {ks}")
            self.k_schedule = ks
        if self.n_ref < 1:
            raise ContractError("need at least one reference frame")
        if self.window < 1:
            raise ContractError("window must be at least one frame")

    def resolved_schedule(self, n_queries: int) -> tuple[int, ...]:
        """Fill in the per-stage retention counts for a given query budget."""
        if self.k_schedule is not None:
            return self.k_schedule
        if self.variant == "transvod":
            return (n_queries,)
        if self.variant == "transvod_pp":
            return (n_queries // 2, n_queries // 3, n_queries // 5)
        pool = n_queries * self.window
        return tuple(min(pool, c * self.window) for c in (8, 5, 3))

    @classmethod
    def paper_defaults(cls, variant: str) -> "TemporalConfig":
        """The full-scale settings reported for each variant."""
        schedules = {
            "transvod": (300,),
            "transvod_pp": (80, 50, 20),
            "lite": (80, 50, 30),
        }
        return cls(
            variant=variant, k_schedule=schedules[variant],
            n_tdte=1, n_tqe=3, n_tdtd=1, n_ref=14, window=12,
        )


# ---------------------------------------------------------------------------
# query filtering
# ---------------------------------------------------------------------------


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def qfh_scores(queries: Tensor, class_head: Linear) -> np.ndarray:
    """Max class sigmoid per query, as plain numbers (ranking only)."""
    logits = queries.data @ class_head.weight.data + class_head.bias.data
    return _stable_sigmoid(logits).max(axis=1)


def qfh_select(queries: Tensor, k: int, class_head: Linear) -> tuple[Tensor, np.ndarray]:
    """Keep the k most confident queries, most confident first.

    Ties go to the lower original index.  The ranking itself carries no
    gradient; the returned rows do.
    """
    n = queries.shape[0]
    if k > n:
        raise ContractError(f"cannot keep {k} of {n} queries")
    scores = qfh_scores(queries, class_head)
    idx = np.argsort(-scores, kind="stable")[:k]
    return take_rows(queries, idx), idx


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class TQELayer:
    """Query aggregation: self-attention, cross-attention over references, FFN."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, heads: int,
                 ffn_dim: int) -> None:
        self.norm1 = LayerNorm(reg, f"{prefix}.norm1", d)
        self.self_attn = MultiHeadAttention(reg, f"{prefix}.self", d, heads)
        self.norm2 = LayerNorm(reg, f"{prefix}.norm2", d)
        self.cross_attn = MultiHeadAttention(reg, f"{prefix}.cross", d, heads)
        self.norm3 = LayerNorm(reg, f"{prefix}.norm3", d)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", d, ffn_dim)

    def __call__(self, current: Tensor, references: Tensor,
                 self_mask: Tensor | None = None) -> Tensor:
        """``self_mask`` (additive, -inf to block) restricts self-attention;
        a block-diagonal mask runs several frames' queries in one call."""
        if references.shape[0] == 0:
            raise ContractError("query aggregation needs at least one reference query")
        normed = self.norm1(current)
        current = current + self.self_attn(normed, normed, mask=self_mask)
        current = current + self.cross_attn(self.norm2(current), references)
        return current + self.ffn(self.norm3(current))


class TDTELayer:
    """Memory fusion: map cells attend into every frame's memory at once."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, heads: int,
                 points: int, frames: int, ffn_dim: int) -> None:
        self.norm1 = LayerNorm(reg, f"{prefix}.norm1", d)
        self.attn = TemporalDeformableAttention(
            reg, f"{prefix}.attn", d, heads, points, frames
        )
        self.norm2 = LayerNorm(reg, f"{prefix}.norm2", d)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", d, ffn_dim)

    def __call__(self, cells: Tensor, pos: Tensor, refs: Tensor,
                 extent: tuple[int, int], ref_memories: list[Tensor]) -> Tensor:
        h, w = extent
        normed = self.norm1(cells)
        fmaps = [normed.reshape(h, w, cells.shape[1])] + ref_memories
        cells = cells + self.attn(normed + pos, refs, fmaps)
        return cells + self.ffn(self.norm2(cells))


def roi_extract(memory: Tensor, boxes: Tensor, bins: int = 7) -> Tensor:
    """Average a bins x bins grid of bilinear samples over each box.

    Box extents below 1e-4 collapse the grid to the box center on that axis.
    """
    k = boxes.shape[0]
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ContractError(f"boxes must be [k, 4], got {boxes.shape}")
    offsets = ((np.arange(bins) + 0.5) / bins - 0.5).astype(np.float64)
    live_w = (boxes.data[:, 2:3] >= 1e-4).astype(boxes.data.dtype)
    live_h = (boxes.data[:, 3:4] >= 1e-4).astype(boxes.data.dtype)
    xs = boxes[:, 0:1] + boxes[:, 2:3] * Tensor(live_w) * Tensor(offsets[None, :])
    ys = boxes[:, 1:2] + boxes[:, 3:4] * Tensor(live_h) * Tensor(offsets[None, :])
    ones_row = np.ones((1, 1, bins, 1))
    ones_col = np.ones((1, bins, 1, 1))
    xg = xs.reshape(k, 1, bins, 1) * Tensor(ones_col)
    yg = ys.reshape(k, bins, 1, 1) * Tensor(ones_row)
    pts = concat([xg, yg], axis=3)  # [k, bins, bins, 2]
    samples = bilinear_sample(memory, pts)  # [k, bins, bins, d]
    return samples.reshape(k, bins * bins, memory.shape[2]).mean(axis=1)


class QRF:
    """Region-feature fusion driven by query-generated pointwise transforms.

    Queries first exchange information through self-attention; each then
    emits the weights of a two-layer pointwise network (d -> d_h -> d, relu
    between) that it applies to its own pooled region vector.  The transformed
    region feature joins the query residually under a final normalization.
    The generator starts at zero, so at initialization the region branch is
    silent and the output is just the normalized self-attention path.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, heads: int,
                 d_hidden: int) -> None:
        self.d = d
        self.d_hidden = d_hidden
        self.norm1 = LayerNorm(reg, f"{prefix}.norm1", d)
        self.self_attn = MultiHeadAttention(reg, f"{prefix}.self", d, heads)
        n_params = d * d_hidden + d_hidden + d_hidden * d + d
        self.generator = Linear(reg, f"{prefix}.generator", d, n_params, init="zeros")
        self.norm_gen = LayerNorm(reg, f"{prefix}.norm_gen", d)
        self.norm2 = LayerNorm(reg, f"{prefix}.norm2", d)

    def __call__(self, queries: Tensor, roi: Tensor) -> Tensor:
        if queries.shape[0] != roi.shape[0]:
            raise ContractError(
                f"{queries.shape[0]} queries but {roi.shape[0]} region features"
            )
        k, d, dh = queries.shape[0], self.d, self.d_hidden
        normed = self.norm1(queries)
        queries = queries + self.self_attn(normed, normed)
        params = self.generator(self.norm_gen(queries))
        w1 = params[:, : d * dh].reshape(k, d, dh)
        b1 = params[:, d * dh: d * dh + dh].reshape(k, 1, dh)
        w2 = params[:, d * dh + dh: d * dh + dh + dh * d].reshape(k, dh, d)
        b2 = params[:, d * dh + dh + dh * d:].reshape(k, 1, d)
        h = relu(matmul(roi.reshape(k, 1, d), w1) + b1)
        fused = (matmul(h, w2) + b2).reshape(k, d)
        return self.norm2(queries + fused)


class TDTDLayer:
    """Deformable cross-attention from temporal queries into a memory, + FFN."""

    def __init__(self, reg: ParamRegistry, prefix: str, cfg: SpatialConfig) -> None:
        from .attention import DeformableAttention

        self.norm1 = LayerNorm(reg, f"{prefix}.norm1", cfg.d)
        self.cross_attn = DeformableAttention(
            reg, f"{prefix}.cross", cfg.d, cfg.heads, cfg.points
        )
        self.norm2 = LayerNorm(reg, f"{prefix}.norm2", cfg.d)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", cfg.d, cfg.ffn_dim)

    def __call__(self, queries: Tensor, refs: Tensor, memory: Tensor) -> Tensor:
        queries = queries + self.cross_attn(self.norm1(queries), refs, memory)
        return queries + self.ffn(self.norm2(queries))


# ---------------------------------------------------------------------------
# the full video detector
# ---------------------------------------------------------------------------


@dataclass
class StagePrediction:
    """One stage's detections for one frame."""

    frame: int
    logits: Tensor
    boxes: Tensor
    query_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


class VideoDetector:
    """Spatial detector plus the configured temporal aggregation stack."""

    def __init__(self, reg: ParamRegistry, spatial_cfg: SpatialConfig,
                 temporal_cfg: TemporalConfig) -> None:
        self.reg = reg
        self.spatial_cfg = spatial_cfg
        self.cfg = temporal_cfg
        self.spatial = SpatialDetector(reg, spatial_cfg)
        d, heads, ffn = spatial_cfg.d, spatial_cfg.heads, spatial_cfg.ffn_dim
        cfg = temporal_cfg
        self.schedule = cfg.resolved_schedule(spatial_cfg.n_queries)
        pool = spatial_cfg.n_queries * (cfg.window if cfg.variant == "lite" else 1)
        for j, k in enumerate(self.schedule):
            if k < 1 or k > pool:
                raise ContractError(
                    f"stage {j} keeps {k} queries but the pool holds {pool}"
                )

        self.tqe_stages = [
            [
                TQELayer(reg, f"temporal.stage{j}.tqe{i}", d, heads, ffn)
                for i in range(cfg.n_tqe)
            ]
            for j in range(cfg.stages)
        ]
        self.tdtd_stages = [
            [
                TDTDLayer(reg, f"temporal.stage{j}.tdtd{i}", spatial_cfg)
                for i in range(cfg.n_tdtd)
            ]
            for j in range(cfg.stages)
        ]
        self.heads = PredictionHeads(reg, "temporal.heads", d, spatial_cfg.n_classes)

        self.tdte = None
        if cfg.variant == "transvod":
            self.tdte = [
                TDTELayer(reg, f"temporal.tdte{i}", d, heads, spatial_cfg.points,
                          frames=1 + cfg.n_ref, ffn_dim=ffn)
                for i in range(cfg.n_tdte)
            ]
        self.qrf = None
        if cfg.variant == "transvod_pp":
            d_hidden = cfg.d_hidden or max(1, d // 4)
            self.qrf = QRF(reg, "temporal.qrf", d, heads, d_hidden)
        self.frame_embed = None
        if cfg.variant == "lite" and cfg.frame_identity:
            self.frame_embed = reg.param(
                "temporal.frame_embed", (cfg.window, d), init="normal", scale=0.1
            )

    # -- bookkeeping ---------------------------------------------------

    def sync_temporal_heads(self) -> None:
        """Start the temporal prediction heads from the trained spatial ones."""
        src = self.spatial.heads
        copy_params(
            [src.cls.weight, src.cls.bias,
             src.box.fc1.weight, src.box.fc1.bias,
             src.box.fc2.weight, src.box.fc2.bias,
             src.box.fc3.weight, src.box.fc3.bias],
            [self.heads.cls.weight, self.heads.cls.bias,
             self.heads.box.fc1.weight, self.heads.box.fc1.bias,
             self.heads.box.fc2.weight, self.heads.box.fc2.bias,
             self.heads.box.fc3.weight, self.heads.box.fc3.bias],
        )

    def _scorer(self, stage: int) -> Linear:
        # first-stage ranking comes from the spatial class head the queries
        # were trained against; later stages use the temporal head that the
        # stage outputs actually optimize
        return self.spatial.heads.cls if stage == 0 else self.heads.cls

    def baseline(self, frame: Tensor) -> FrameOutput:
        """Single-frame predictions with the temporal stack bypassed."""
        return self.spatial.forward(frame)

    # -- transvod --------------------------------------------------------

    def _forward_transvod(self, current: FrameOutput,
                          references: list[FrameOutput],
                          frame_label: int) -> list[list[StagePrediction]]:
        k = self.schedule[0]
        ref_queries = []
        for ref in references:
            selected, _ = qfh_select(ref.queries, min(k, ref.queries.shape[0]),
                                     self._scorer(0))
            ref_queries.append(selected)
        pool = concat(ref_queries, axis=0)

        queries = current.queries
        for layer in self.tqe_stages[0]:
            queries = layer(queries, pool)

        h, w, d = current.memory.shape
        cells = current.memory.reshape(h * w, d)
        pos = Tensor(self.spatial._pe(h, w).reshape(h * w, d))
        grid = Tensor(cell_reference_grid(h, w))
        ref_memories = [r.memory for r in references]
        for layer in self.tdte:
            cells = layer(cells, pos, grid, (h, w), ref_memories)
        fused = cells.reshape(h, w, d)

        refs = current.refs
        for layer in self.tdtd_stages[0]:
            queries = layer(queries, refs, fused)
        logits, boxes = self.heads(queries)
        idx = np.arange(queries.shape[0])
        return [[StagePrediction(frame_label, logits, boxes, idx)]]

    # -- transvod++ ------------------------------------------------------

    def _forward_pp(self, current: FrameOutput, references: list[FrameOutput],
                    frame_label: int) -> list[list[StagePrediction]]:
        cur_q = current.queries
        cur_refs = current.refs
        cur_boxes = current.boxes[-1]
        ref_pools = [(r.queries, r.boxes[-1], r.memory) for r in references]

        stages: list[list[StagePrediction]] = []
        for j, k in enumerate(self.schedule):
            scorer = self._scorer(j)
            kept, idx = qfh_select(cur_q, min(k, cur_q.shape[0]), scorer)
            cur_refs = take_rows(cur_refs, idx)
            cur_boxes = take_rows(cur_boxes, idx)
            roi = roi_extract(current.memory, cur_boxes)
            cur_q = self.qrf(kept, roi)

            fused_refs = []
            next_pools = []
            for rq, rb, rm in ref_pools:
                r_kept, r_idx = qfh_select(rq, min(k, rq.shape[0]), scorer)
                r_boxes = take_rows(rb, r_idx)
                r_fused = self.qrf(r_kept, roi_extract(rm, r_boxes))
                fused_refs.append(r_fused)
                next_pools.append((r_fused, r_boxes, rm))
            ref_pools = next_pools

            pool = concat(fused_refs, axis=0)
            for layer in self.tqe_stages[j]:
                cur_q = layer(cur_q, pool)
            for layer in self.tdtd_stages[j]:
                cur_q = layer(cur_q, cur_refs, current.memory)
            logits, boxes = self.heads(cur_q)
            stages.append([StagePrediction(frame_label, logits, boxes, idx)])
            cur_boxes = boxes
        return stages

    # -- lite --------------------------------------------------------------

    def _forward_lite(self, frames: list[FrameOutput],
                      labels: list[int]) -> list[list[StagePrediction]]:
        # the whole pool lives in one tensor ordered by (frame slot, score);
        # per-frame semantics are kept exact with a block-diagonal self-mask
        # and a padded batch for the per-frame memory cross-attention
        d = self.spatial_cfg.d
        n_q = frames[0].queries.shape[0]
        parts = []
        for slot, f in enumerate(frames):
            q = f.queries
            if self.frame_embed is not None:
                q = q + self.frame_embed[slot:slot + 1, :]
            parts.append(q)
        pool = concat(parts, axis=0) if len(parts) > 1 else parts[0]
        refs = concat([f.refs for f in frames], axis=0) \
            if len(frames) > 1 else frames[0].refs
        owner = np.repeat(np.arange(len(frames)), n_q)
        origin = np.tile(np.arange(n_q), len(frames))

        stages: list[list[StagePrediction]] = []
        for j, k in enumerate(self.schedule):
            _, idx = qfh_select(pool, min(k, pool.shape[0]), self._scorer(j))
            # regroup by owning frame; stable sort keeps score order in-frame
            order = idx[np.argsort(owner[idx], kind="stable")]
            pool = take_rows(pool, order)
            refs = take_rows(refs, order)
            owner, origin = owner[order], origin[order]
            survivors, counts = np.unique(owner, return_counts=True)
            total = int(counts.sum())

            mask = None
            if len(survivors) > 1:
                m = np.full((total, total), -np.inf, dtype=np.float32)
                lo = 0
                for c in counts:
                    m[lo:lo + c, lo:lo + c] = 0.0
                    lo += c
                mask = Tensor(m)
            for layer in self.tqe_stages[j]:
                pool = layer(pool, pool, self_mask=mask)

            if len(survivors) == 1:
                for layer in self.tdtd_stages[j]:
                    pool = layer(pool, refs, frames[survivors[0]].memory)
            else:
                # pad frames to a common row count (deformable attention is
                # row-independent, so padded rows never touch real ones)
                n_max = int(counts.max())
                pad_map = np.full(len(survivors) * n_max, total, dtype=np.int64)
                lo = 0
                for b, c in enumerate(counts):
                    pad_map[b * n_max:b * n_max + c] = np.arange(lo, lo + c)
                    lo += c
                zero_q = Tensor(np.zeros((1, d), dtype=np.float32))
                zero_r = Tensor(np.zeros((1, 2), dtype=np.float32))
                h, w = frames[0].memory.shape[:2]
                padded = take_rows(concat([pool, zero_q], axis=0), pad_map)
                padded = padded.reshape(len(survivors), n_max, d)
                prefs = take_rows(concat([refs, zero_r], axis=0), pad_map)
                prefs = prefs.reshape(len(survivors), n_max, 2)
                memories = concat(
                    [frames[s].memory.reshape(1, h, w, d) for s in survivors],
                    axis=0,
                )
                for layer in self.tdtd_stages[j]:
                    padded = layer(padded, prefs, memories)
                pool = take_rows(padded.reshape(len(survivors) * n_max, d),
                                 np.flatnonzero(pad_map < total))
            logits, boxes = self.heads(pool)

            preds = []
            lo = 0
            for s, c in zip(survivors, counts):
                rows = np.arange(lo, lo + c)
                preds.append(StagePrediction(
                    labels[s], take_rows(logits, rows), take_rows(boxes, rows),
                    origin[lo:lo + c],
                ))
                lo += c
            stages.append(preds)
        return stages

    # -- dispatch ------------------------------------------------------

    def aggregate(self, current: FrameOutput, references: list[FrameOutput],
                  frame_label: int = 0) -> list[list[StagePrediction]]:
        """Temporal aggregation over precomputed per-frame outputs.

        Lets callers reuse cached spatial features (they are fixed once the
        spatial detector is frozen) instead of re-encoding every image.
        """
        if self.cfg.variant == "lite":
            raise ContractError("lite consumes whole windows; use aggregate_window")
        if len(references) != self.cfg.n_ref:
            raise ContractError(
                f"{self.cfg.variant} wants {self.cfg.n_ref} reference frames, "
                f"got {len(references)}"
            )
        if self.cfg.variant == "transvod":
            return self._forward_transvod(current, references, frame_label)
        return self._forward_pp(current, references, frame_label)

    def aggregate_window(self, frames: list[FrameOutput],
                         labels: list[int] | None = None) -> list[list[StagePrediction]]:
        """Lite aggregation over precomputed outputs for one window."""
        if self.cfg.variant != "lite":
            raise ContractError(f"window aggregation is lite-only, not {self.cfg.variant}")
        if len(frames) != self.cfg.window:
            raise ContractError(
                f"lite window holds {self.cfg.window} frames, got {len(frames)}"
            )
        if labels is None:
            labels = list(range(len(frames)))
        return self._forward_lite(frames, labels)

    def forward(self, current_image: Tensor, reference_images: list[Tensor],
                frame_label: int = 0) -> list[list[StagePrediction]]:
        """Aggregated detection for one current frame (transvod variants)."""
        if self.cfg.variant == "lite":
            raise ContractError("lite consumes whole windows; use forward_window")
        if len(reference_images) != self.cfg.n_ref:
            raise ContractError(
                f"{self.cfg.variant} wants {self.cfg.n_ref} reference frames, "
                f"got {len(reference_images)}"
            )
        stacked = Tensor(np.stack(
            [img.data for img in [current_image, *reference_images]]
        ))
        frames = self.spatial.forward_batch(stacked)
        return self.aggregate(frames[0], frames[1:], frame_label)

    def forward_window(self, images: list[Tensor],
                       labels: list[int] | None = None) -> list[list[StagePrediction]]:
        """Aggregated detections for every frame of a lite window."""
        if self.cfg.variant != "lite":
            raise ContractError(f"forward_window is lite-only, not {self.cfg.variant}")
        if len(images) != self.cfg.window:
            raise ContractError(
                f"lite window holds {self.cfg.window} frames, got {len(images)}"
            )
        if len(images) == 1:
            frames = [self.spatial.forward(images[0])]
        else:
            stacked = Tensor(np.stack([img.data for img in images]))
            frames = self.spatial.forward_batch(stacked)
        return self.aggregate_window(frames, labels)
