"""Two-stage optimization and plan-driven inference over clip datasets.

Stage 1 fits the spatial detector alone on single frames.  Stage 2 freezes
every spatial parameter and fits the temporal stack on top of cached (and
therefore fixed) spatial features, drawing reference frames bilaterally
around each current frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import Clip, frame_to_input
from .errors import ContractError
from .matching import detection_loss
from .metrics import Detection, EvalReport, GroundTruth, evaluate
from .optim import AdamW, clip_grad_norm
from .spatial import FrameOutput
from .temporal import StagePrediction, VideoDetector
from .tensor import ParamRegistry, Tensor
from .windows import bilateral_sample, plan_sequential, plan_shuffled, reassemble

__all__ = [
    "TrainResult", "build_model", "train_two_stage", "train_stage1",
    "train_stage2", "spatial_loss", "temporal_loss", "spatial_cache",
    "evaluate_model", "ground_truths", "detections_for_frame",
    "transplant_spatial", "infer_detections", "bench_throughput",
    "occluded_frame_filter",
]

FRAME_KEY_STRIDE = 100_000


def frame_key(clip_index: int, frame_index: int) -> int:
    """Globally unique frame id across a clip list."""
    return clip_index * FRAME_KEY_STRIDE + frame_index


@dataclass
class TrainResult:
    stage1_losses: list[float] = field(default_factory=list)
    stage2_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        if self.stage2_losses:
            return self.stage2_losses[-1]
        return self.stage1_losses[-1] if self.stage1_losses else float("nan")


def build_model(cfg: RunConfig) -> tuple[ParamRegistry, VideoDetector]:
    reg = ParamRegistry(cfg.seed)
    model = VideoDetector(reg, cfg.spatial_config(), cfg.temporal_config())
    return reg, model


def transplant_spatial(src: ParamRegistry, dst: ParamRegistry,
                       prefix: str = "spatial") -> None:
    """Copy spatial weights between registries of possibly different heads."""
    src_named = src.named()
    for name, p in dst.named().items():
        if not name.startswith(prefix):
            continue
        if name not in src_named or src_named[name].data.shape != p.data.shape:
            raise ContractError(f"cannot transplant {name!r}: source mismatch")
        p.data = src_named[name].data.copy()


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------


def frame_targets(clip: Clip, frame_index: int) -> tuple[np.ndarray, np.ndarray]:
    objs = clip.annotations[frame_index].objects
    classes = np.array([o.class_id for o in objs], dtype=np.int64)
    boxes = np.array([o.bbox for o in objs], dtype=np.float64).reshape(-1, 4)
    return classes, boxes


def _stage_frames(stages: list[list[StagePrediction]], targets) -> list:
    """Adapt staged predictions to the loss layout, looking up targets by
    the frame label each prediction carries."""
    out = []
    for stage in stages:
        frames = []
        for sp in stage:
            classes, boxes = targets[sp.frame]
            frames.append((sp.logits, sp.boxes, classes, boxes))
        out.append(frames)
    return out


def spatial_loss(model: VideoDetector, image: Tensor, classes: np.ndarray,
                 boxes: np.ndarray, weights) -> Tensor:
    """Single-frame set loss with every decoder layer supervised."""
    out = model.spatial.forward(image)
    stage_frames = [[(lg, bx, classes, boxes)]
                    for lg, bx in zip(out.logits, out.boxes)]
    return detection_loss(stage_frames, weights)


def temporal_loss(model: VideoDetector, current: FrameOutput,
                  references: list[FrameOutput], classes: np.ndarray,
                  boxes: np.ndarray, weights, frame_label: int = 0) -> Tensor:
    stages = model.aggregate(current, references, frame_label)
    return detection_loss(_stage_frames(stages, {frame_label: (classes, boxes)}),
                          weights)


# ---------------------------------------------------------------------------
# cached spatial features
# ---------------------------------------------------------------------------


def _detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def detach_frame(out: FrameOutput) -> FrameOutput:
    """Copy a frame output with the autodiff history cut off."""
    return FrameOutput(
        _detach(out.memory), _detach(out.queries),
        [_detach(t) for t in out.query_layers], _detach(out.refs),
        [_detach(t) for t in out.logits], [_detach(t) for t in out.boxes],
    )


def spatial_cache(model: VideoDetector, clip: Clip) -> list[FrameOutput]:
    """Run the spatial detector over a whole clip once, detached.

    Only valid while the spatial weights do not change (stage 2, and any
    inference): the temporal stack reads these outputs as constants.
    """
    stacked = Tensor(np.stack([frame_to_input(f) for f in clip.frames]))
    return [detach_frame(o) for o in model.spatial.forward_batch(stacked)]


# ---------------------------------------------------------------------------
# the two training stages
# ---------------------------------------------------------------------------


def _lite_window_items(cfg: RunConfig, clips: list[Clip]) -> list:
    items = []
    for ci, clip in enumerate(clips):
        plan = plan_sequential(len(clip.frames), cfg.window, cfg.interval)
        for slots in plan.windows:
            items.append((ci, tuple(plan.slot_to_frame(s) - 1 for s in slots)))
    return items


def train_stage1(cfg: RunConfig, clips: list[Clip], reg: ParamRegistry,
                 model: VideoDetector, log=None) -> list[float]:
    """Fit the spatial detector alone; temporal parameters stay untouched."""
    params = {n: t for n, t in reg.trainable().items() if n.startswith("spatial")}
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                lr_overrides={"spatial.backbone": cfg.lr_backbone})
    rng = np.random.default_rng(cfg.seed)
    samples = [(ci, fi) for ci, clip in enumerate(clips)
               for fi in range(len(clip.frames))]
    losses: list[float] = []
    for _ in range(cfg.epochs_stage1):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and len(losses) >= cfg.max_steps:
                return losses
            chunk = order[start:start + cfg.batch_size]
            reg.zero_grad()
            total = 0.0
            for si in chunk:
                ci, fi = samples[si]
                clip = clips[ci]
                classes, boxes = frame_targets(clip, fi)
                loss = spatial_loss(
                    model, Tensor(frame_to_input(clip.frames[fi])),
                    classes, boxes, cfg.loss_weights,
                ) * (1.0 / len(chunk))
                loss.backward()
                total += float(loss.data)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            losses.append(total)
            if log:
                log("stage1", len(losses), losses[-1])
    return losses


def train_stage2(cfg: RunConfig, clips: list[Clip], reg: ParamRegistry,
                 model: VideoDetector, log=None) -> list[float]:
    """Freeze spatial weights, then fit the temporal stack."""
    reg.freeze("spatial")
    model.sync_temporal_heads()
    params = reg.trainable()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    caches = [spatial_cache(model, clip) for clip in clips]
    targets = [{fi: frame_targets(clip, fi) for fi in range(len(clip.frames))}
               for ci, clip in enumerate(clips)]

    if cfg.variant == "lite":
        items = _lite_window_items(cfg, clips)
    else:
        items = [(ci, fi) for ci, clip in enumerate(clips)
                 for fi in range(len(clip.frames))]

    losses: list[float] = []
    for _ in range(cfg.epochs_stage2):
        order = rng.permutation(len(items))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and len(losses) >= cfg.max_steps:
                return losses
            chunk = order[start:start + cfg.batch_size]
            reg.zero_grad()
            total = 0.0
            for ii in chunk:
                if cfg.variant == "lite":
                    ci, frame_idx = items[ii]
                    outs = [caches[ci][fi] for fi in frame_idx]
                    stages = model.aggregate_window(outs, labels=list(frame_idx))
                else:
                    ci, fi = items[ii]
                    ref_idx = bilateral_sample(fi, len(clips[ci].frames),
                                               cfg.n_ref, rng)
                    stages = model.aggregate(caches[ci][fi],
                                             [caches[ci][j] for j in ref_idx],
                                             frame_label=fi)
                loss = detection_loss(_stage_frames(stages, targets[ci]),
                                      cfg.loss_weights) * (1.0 / len(chunk))
                loss.backward()
                total += float(loss.data)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            losses.append(total)
            if log:
                log("stage2", len(losses), losses[-1])
    return losses


def train_two_stage(cfg: RunConfig, clips: list[Clip],
                    log=None) -> tuple[ParamRegistry, VideoDetector, TrainResult]:
    """The full schedule: spatial alone, then frozen-spatial temporal."""
    if not clips:
        raise ContractError("training needs at least one clip")
    reg, model = build_model(cfg)
    result = TrainResult()
    result.stage1_losses = train_stage1(cfg, clips, reg, model, log)
    result.stage2_losses = train_stage2(cfg, clips, reg, model, log)
    return reg, model, result


# ---------------------------------------------------------------------------
# detections and evaluation
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def detections_for_frame(logits: Tensor, boxes: Tensor, key: int,
                         max_dets: int = 50) -> list[Detection]:
    """Every (query, class) pair scored by sigmoid, best ``max_dets`` kept."""
    probs = _sigmoid(logits.data)
    n_q, n_cls = probs.shape
    flat = probs.ravel()
    order = np.argsort(-flat, kind="stable")[:max_dets]
    out = []
    for j in order:
        q, c = divmod(int(j), n_cls)
        out.append(Detection(key, c, float(flat[j]), tuple(boxes.data[q])))
    return out


def ground_truths(clips: list[Clip], frame_filter=None) -> list[GroundTruth]:
    gts = []
    for ci, clip in enumerate(clips):
        for ann in clip.annotations:
            if frame_filter and not frame_filter(ci, ann.index):
                continue
            for o in ann.objects:
                gts.append(GroundTruth(frame_key(ci, ann.index), o.class_id,
                                       tuple(o.bbox)))
    return gts


def occluded_frame_filter(clips: list[Clip]):
    """Keep only frames where at least one object is currently occluded."""
    keep = {
        (ci, ann.index)
        for ci, clip in enumerate(clips)
        for ann in clip.annotations
        if any(o.occluded for o in ann.objects)
    }
    return lambda ci, fi: (ci, fi) in keep


def _clip_detections(model: VideoDetector, cfg: RunConfig, ci: int, clip: Clip,
                     mode: str, rng, max_dets: int) -> list[Detection]:
    cache = spatial_cache(model, clip)
    n = len(clip.frames)
    dets: list[Detection] = []
    if mode == "baseline":
        for fi, out in enumerate(cache):
            dets.extend(detections_for_frame(out.logits[-1], out.boxes[-1],
                                             frame_key(ci, fi), max_dets))
        return dets
    if cfg.variant in ("transvod", "transvod_pp"):
        for fi in range(n):
            ref_idx = bilateral_sample(fi, n, cfg.n_ref, rng)
            stages = model.aggregate(cache[fi], [cache[j] for j in ref_idx],
                                     frame_label=fi)
            for sp in stages[-1]:
                dets.extend(detections_for_frame(sp.logits, sp.boxes,
                                                 frame_key(ci, fi), max_dets))
        return dets
    # lite: plan the clip into windows, aggregate each, then reassemble
    if cfg.plan == "shuffled":
        plan = plan_shuffled(n, cfg.window, seed=cfg.seed)
    else:
        plan = plan_sequential(n, cfg.window, cfg.interval)
    window_outputs = []
    for slots in plan.windows:
        outs = [cache[plan.slot_to_frame(s) - 1] for s in slots]
        stages = model.aggregate_window(outs, labels=list(slots))
        by_slot = {sp.frame: sp for sp in stages[-1]}
        window_outputs.append([by_slot.get(s) for s in slots])
    for fi, sp in enumerate(reassemble(plan, window_outputs)):
        if sp is not None:
            dets.extend(detections_for_frame(sp.logits, sp.boxes,
                                             frame_key(ci, fi), max_dets))
    return dets


def infer_detections(model: VideoDetector, cfg: RunConfig, clips: list[Clip],
                     mode: str = "temporal", seed: int = 0,
                     max_dets: int = 50) -> list[Detection]:
    """All frames' detections for a clip list, in clip order."""
    if mode not in ("temporal", "baseline"):
        raise ContractError(f"mode must be temporal or baseline, got {mode!r}")
    rng = np.random.default_rng(seed)
    detections: list[Detection] = []
    for ci, clip in enumerate(clips):
        detections.extend(_clip_detections(model, cfg, ci, clip, mode, rng, max_dets))
    return detections


def bench_throughput(cfg: RunConfig, n_frames: int = 32, repeats: int = 3,
                     warmup: int = 1, seed: int = 0) -> dict:
    """Frames/sec of windowed inference on one synthetic clip.

    Each window runs the spatial detector over its slots and pools the whole
    window through the temporal stack, so larger windows amortize per-window
    costs across more frames.
    """
    from .data import SynthConfig, generate_synthetic
    from .tensor import no_grad
    from .windows import measure_fps

    if cfg.variant != "lite":
        raise ContractError("the throughput benchmark drives the lite variant")
    reg, model = build_model(cfg)
    clip = generate_synthetic(
        SynthConfig(clips=1, frames=n_frames, image_size=64, seed=seed))[0]
    inputs = np.stack([frame_to_input(f) for f in clip.frames])
    plan = plan_sequential(n_frames, cfg.window, cfg.interval)

    def run_window(slots):
        idx = [plan.slot_to_frame(s) - 1 for s in slots]
        with no_grad():
            outs = model.spatial.forward_batch(Tensor(inputs[idx]))
            model.aggregate_window(outs, labels=list(slots))

    stats = measure_fps(run_window, plan, warmup=warmup, repeats=repeats)
    stats["window"] = cfg.window
    return stats


def evaluate_model(model: VideoDetector, cfg: RunConfig, clips: list[Clip],
                   mode: str = "temporal", frame_filter=None, seed: int = 0,
                   max_dets: int = 50) -> EvalReport:
    """Detection quality over a clip list.

    ``mode`` "temporal" runs the configured variant; "baseline" scores the
    frozen spatial detector directly, frame by frame, with the temporal
    stack bypassed.  ``frame_filter(ci, fi)`` restricts evaluation to a
    frame subset (detections and truths alike).
    """
    if mode not in ("temporal", "baseline"):
        raise ContractError(f"mode must be temporal or baseline, got {mode!r}")
    rng = np.random.default_rng(seed)
    detections: list[Detection] = []
    for ci, clip in enumerate(clips):
        clip_dets = _clip_detections(model, cfg, ci, clip, mode, rng, max_dets)
        if frame_filter:
            clip_dets = [d for d in clip_dets
                         if frame_filter(d.frame // FRAME_KEY_STRIDE,
                                         d.frame % FRAME_KEY_STRIDE)]
        detections.extend(clip_dets)
    truths = ground_truths(clips, frame_filter)
    size = clips[0].width if clips else 64
    return evaluate(detections, truths, image_size=size)
