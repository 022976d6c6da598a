"""Command-line surface: dataset synthesis, training, evaluation, inference,
throughput benchmarking, and the numeric self-check suites.

Every subcommand prints a JSON document to stdout unless ``--out`` redirects
it to a file (for ``synth``, ``--out`` names the dataset directory instead).
Exit status: 0 success, 1 contract violation or bad usage, 2 I/O or parse
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_into_registry, save_checkpoint
from .config import (
    RunConfig,
    apply_env_overrides,
    load_run_config,
    override_config,
    parse_run_config,
    serialize_run_config,
)
from .data import SynthConfig, generate_synthetic, load_dataset, save_dataset
from .errors import ContractError, ParseError
from .gradsuite import run_suite
from .train import (
    FRAME_KEY_STRIDE,
    bench_throughput,
    build_model,
    evaluate_model,
    infer_detections,
    occluded_frame_filter,
    train_two_stage,
)

__all__ = ["run_cli", "main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits the process on bad flags; surface them as status 1 instead
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=1)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else parse_run_config("")
    if getattr(args, "set", None):
        cfg = override_config(cfg, args.set)
    if getattr(args, "dataset", None):
        cfg = replace(cfg, dataset=args.dataset)
    return apply_env_overrides(cfg)


def _config_flags(sub) -> None:
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config key (repeatable)")
    sub.add_argument("--dataset", help="dataset directory (beats the config)")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        clips=args.clips, frames=args.frames, image_size=args.size,
        occluder_prob=args.occluders, blur_len=(args.blur, args.blur),
        seed=args.seed,
    )
    clips = generate_synthetic(cfg)
    save_dataset(clips, args.out)
    _emit({
        "dir": args.out, "clips": len(clips),
        "frames_per_clip": args.frames, "seed": args.seed,
    }, None)
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    clips = load_dataset(cfg.dataset)
    reg, model, result = train_two_stage(cfg, clips)
    save_checkpoint(args.checkpoint, reg.named())
    _emit({
        "checkpoint": args.checkpoint,
        "steps_stage1": len(result.stage1_losses),
        "steps_stage2": len(result.stage2_losses),
        "loss_stage1": result.stage1_losses[-1] if result.stage1_losses else None,
        "loss_stage2": result.stage2_losses[-1] if result.stage2_losses else None,
        "config": serialize_run_config(cfg).strip().splitlines(),
    }, args.out)
    return 0


def _load_model(args, cfg: RunConfig):
    reg, model = build_model(cfg)
    load_into_registry(args.checkpoint, reg)
    return reg, model


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    clips = load_dataset(cfg.dataset)
    reg, model = _load_model(args, cfg)
    frame_filter = occluded_frame_filter(clips) if args.occluded_only else None
    report = evaluate_model(model, cfg, clips, mode=args.mode,
                            frame_filter=frame_filter, seed=cfg.seed)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    clips = load_dataset(cfg.dataset)
    reg, model = _load_model(args, cfg)
    dets = infer_detections(model, cfg, clips, mode=args.mode,
                            seed=cfg.seed, max_dets=args.max_dets)
    rows = [{
        "clip": int(d.frame) // FRAME_KEY_STRIDE,
        "frame": int(d.frame) % FRAME_KEY_STRIDE,
        "class_id": int(d.class_id),
        "score": float(d.score),
        "bbox": [float(v) for v in d.bbox],
    } for d in dets]
    _emit({"n_detections": len(rows), "detections": rows}, args.out)
    return 0


def _cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    try:
        windows = [int(part) for part in args.tw.split(",") if part.strip()]
    except ValueError:
        raise ParseError("<args>", "--tw",
                         f"expected comma-separated integers, got {args.tw!r}") from None
    if not windows:
        raise ParseError("<args>", "--tw", "needs at least one window size")
    rows = []
    for tw in windows:
        run = override_config(cfg, ["variant=lite", f"window={tw}"])
        stats = bench_throughput(run, n_frames=args.frames,
                                 repeats=args.repeats, seed=cfg.seed)
        rows.append({
            "window": tw, "fps": stats["fps"], "frames": stats["frames"],
            "pass_seconds": stats["pass_seconds"],
        })
    _emit({"rows": rows}, args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    rows = run_suite(trials=args.trials, seed=args.seed)
    ok = all(r["ok"] for r in rows)
    _emit({"ops": rows, "ok": ok}, args.out)
    return 0 if ok else 1


def _cmd_oracle(args) -> int:
    from . import oracles
    from .matching import hungarian_match
    from .metrics import Detection, GroundTruth, evaluate
    from .attention import MultiHeadAttention
    from .tensor import ParamRegistry, Tensor

    rng = np.random.default_rng(args.seed)
    checks = []

    worst = 0.0
    for _ in range(args.cases):
        n_gt = int(rng.integers(1, 5))
        n_pred = int(rng.integers(n_gt, 7))
        cost = rng.normal(0.0, 2.0, (n_pred, n_gt))
        pairs = hungarian_match(cost)
        got = sum(cost[i, j] for i, j in pairs)
        want, _ = oracles.brute_force_assignment(cost)
        worst = max(worst, abs(got - want))
    checks.append({"name": "assignment_vs_brute_force", "cases": args.cases,
                   "max_err": worst, "ok": worst < 1e-9})

    worst = 0.0
    for case in range(args.cases):
        n_frames = int(rng.integers(1, 4))
        dets, gts = [], []
        for fi in range(n_frames):
            for _ in range(int(rng.integers(0, 5))):
                cx, cy = rng.uniform(0.2, 0.8, 2)
                w, h = rng.uniform(0.1, 0.4, 2)
                gts.append(GroundTruth(fi, int(rng.integers(0, 3)), (cx, cy, w, h)))
            for _ in range(int(rng.integers(0, 6))):
                cx, cy = rng.uniform(0.2, 0.8, 2)
                w, h = rng.uniform(0.1, 0.4, 2)
                dets.append(Detection(fi, int(rng.integers(0, 3)),
                                      float(rng.random()), (cx, cy, w, h)))
        got = evaluate(dets, gts, image_size=64)
        want = oracles.evaluate_reference(
            [(d.frame, d.class_id, d.score, d.bbox) for d in dets],
            [(g.frame, g.class_id, g.bbox, g.ignore) for g in gts],
            image_size=64,
        )
        for key, ours in (("mAP50", got.mAP50), ("mAP50_95", got.mAP50_95)):
            theirs = want[key]
            if ours is None or theirs is None:
                if ours != theirs:
                    worst = max(worst, 1.0)
                continue
            worst = max(worst, abs(ours - theirs))
    checks.append({"name": "metrics_vs_reference", "cases": args.cases,
                   "max_err": worst, "ok": worst < 1e-6})

    worst = 0.0
    for _ in range(args.cases):
        reg = ParamRegistry(int(rng.integers(0, 1 << 31)))
        mha = MultiHeadAttention(reg, "mha", 4, 2)
        for t in reg.named().values():
            t.data[:] = rng.normal(0.0, 0.4, t.data.shape).astype(np.float32)
        z = rng.normal(0.0, 1.0, (3, 4))
        x = rng.normal(0.0, 1.0, (5, 4))
        got = mha(Tensor(z), Tensor(x)).data
        want = oracles.mha_reference(
            z, x,
            mha.q_proj.weight.data, mha.q_proj.bias.data,
            mha.k_proj.weight.data, mha.k_proj.bias.data,
            mha.v_proj.weight.data, mha.v_proj.bias.data,
            mha.out_proj.weight.data, mha.out_proj.bias.data,
            heads=2,
        )
        worst = max(worst, float(np.abs(got - want).max()))
    checks.append({"name": "attention_vs_reference", "cases": args.cases,
                   "max_err": worst, "ok": worst < 1e-5})

    ok = all(c["ok"] for c in checks)
    _emit({"checks": checks, "ok": ok}, args.out)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="stvod", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", metavar="command")

    p = subs.add_parser("synth", help="render a synthetic clip dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occluders", type=float, default=0.0,
                   help="per-object occlusion probability")
    p.add_argument("--blur", type=float, default=0.0, help="motion streak length")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("train", help="two-stage training run")
    _config_flags(p)
    p.add_argument("--checkpoint", default="model.tvod", help="weights file to write")
    p.add_argument("--out", help="write the JSON summary here instead of stdout")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("eval", help="detection metrics on a dataset")
    _config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("temporal", "baseline"), default="temporal")
    p.add_argument("--occluded-only", action="store_true",
                   help="restrict scoring to frames with an occluded object")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("infer", help="per-frame detections as JSON")
    _config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("temporal", "baseline"), default="temporal")
    p.add_argument("--max-dets", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_infer)

    p = subs.add_parser("bench", help="windowed-inference throughput sweep")
    _config_flags(p)
    p.add_argument("--tw", default="1,2,4,8", help="comma list of window sizes")
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bench)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gradcheck)

    p = subs.add_parser("oracle", help="brute-force cross-checks")
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_oracle)

    return parser


def run_cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {exc}\n")
        return 1
    if not getattr(args, "func", None):
        sys.stderr.write(parser.format_usage())
        return 1
    try:
        return args.func(args)
    except ContractError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except ParseError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


def main() -> None:
    raise SystemExit(run_cli())
