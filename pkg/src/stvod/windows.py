"""Video-to-window planning for batched clip inference and training sampling.

A plan partitions the (padded) frame range 1..n_expanded into fixed-size
windows.  Frame slots inside plans are 1-based; ``bilateral_sample`` works on
0-based positions because its results index straight into Python frame lists.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from statistics import mean, median

import numpy as np

from .errors import ContractError


@dataclass
class WindowPlan:
    """An ordered grouping of expanded frame slots into equal windows."""

    n: int
    expanded: int
    window: int
    interval: int
    mode: str
    seed: int | None
    windows: list[tuple[int, ...]] = field(default_factory=list)

    def validate(self) -> None:
        if self.expanded != -(-self.n // self.window) * self.window:
            raise ContractError(
                f"expanded count {self.expanded} is not {self.n} rounded up "
                f"to a multiple of {self.window}"
            )
        seen = sorted(s for w in self.windows for s in w)
        if any(len(w) != self.window for w in self.windows):
            raise ContractError("every window must have exactly the window size")
        if seen != list(range(1, self.expanded + 1)):
            raise ContractError("windows must partition slots 1..expanded")

    def slot_to_frame(self, slot: int) -> int:
        """Map an expanded slot to the real frame it shows (padding repeats the last)."""
        if not 1 <= slot <= self.expanded:
            raise ContractError(f"slot {slot} outside 1..{self.expanded}")
        return min(slot, self.n)

    def to_json(self) -> str:
        return json.dumps({
            "N": self.n, "T_w": self.window, "I_w": self.interval,
            "mode": self.mode, "seed": self.seed,
            "windows": [list(w) for w in self.windows],
        })

    @classmethod
    def from_json(cls, text: str) -> "WindowPlan":
        raw = json.loads(text)
        plan = cls(
            n=raw["N"], expanded=-(-raw["N"] // raw["T_w"]) * raw["T_w"],
            window=raw["T_w"], interval=raw["I_w"], mode=raw["mode"],
            seed=raw["seed"], windows=[tuple(w) for w in raw["windows"]],
        )
        plan.validate()
        return plan


def expand_video(n: int, window: int) -> tuple[int, list[int]]:
    """Round the frame count up to a window multiple.

    Returns (expanded_count, padded_slots) where each padded slot repeats the
    final real frame.
    """
    if n < 1 or window < 1:
        raise ContractError(f"need n >= 1 and window >= 1, got n={n} window={window}")
    expanded = -(-n // window) * window
    return expanded, list(range(n + 1, expanded + 1))


def plan_sequential(n: int, window: int, interval: int = 1) -> WindowPlan:
    """Strided window enumeration over the expanded frame range.

    With interval 1 this is plain chunking.  A larger interval interleaves:
    each block of window*interval slots yields ``interval`` windows whose
    members are ``interval`` apart, then any tail blocks are chunked in order.
    """
    if window < 1 or interval < 1:
        raise ContractError(f"window and interval must be >= 1, got {window}, {interval}")
    expanded, _ = expand_video(n, window)
    block = window * interval
    full_blocks = expanded // block
    windows = []
    for i in range(full_blocks):
        for j in range(1, interval + 1):
            start = block * i + j
            windows.append(tuple(start + t * interval for t in range(window)))
    tail = block * full_blocks
    while tail < expanded:
        windows.append(tuple(range(tail + 1, tail + window + 1)))
        tail += window
    plan = WindowPlan(n, expanded, window, interval, "sequential", None, windows)
    plan.validate()
    return plan


def plan_shuffled(n: int, window: int, seed: int = 0) -> WindowPlan:
    """Seeded random permutation of the expanded slots, chunked into windows."""
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    expanded, _ = expand_video(n, window)
    perm = np.random.default_rng(seed).permutation(expanded) + 1
    windows = [
        tuple(int(s) for s in perm[k:k + window])
        for k in range(0, expanded, window)
    ]
    plan = WindowPlan(n, expanded, window, 1, "shuffled", seed, windows)
    plan.validate()
    return plan


def reassemble(plan: WindowPlan, window_outputs) -> list:
    """Invert a plan: collect per-frame outputs in original order.

    ``window_outputs`` aligns with ``plan.windows``; each entry holds one
    output per slot in that window.  Outputs for padded slots are dropped.
    """
    if len(window_outputs) != len(plan.windows):
        raise ContractError(
            f"{len(plan.windows)} windows planned but {len(window_outputs)} outputs given"
        )
    by_frame: dict[int, object] = {}
    for slots, outputs in zip(plan.windows, window_outputs):
        if len(outputs) != len(slots):
            raise ContractError(
                f"window of {len(slots)} slots got {len(outputs)} outputs"
            )
        for slot, out in zip(slots, outputs):
            if slot <= plan.n:
                by_frame[slot] = out
    return [by_frame[f] for f in range(1, plan.n + 1)]


def bilateral_sample(current: int, n: int, n_ref: int, rng) -> list[int]:
    """Draw reference frame positions around ``current`` (all 0-based).

    Half the references come from before the current frame, half after,
    uniformly without replacement; a short side hands its slack to the other.
    A clip too short to supply enough distinct neighbors repeats the current
    frame to keep the return length fixed.
    """
    if n_ref < 1:
        raise ContractError(f"n_ref must be >= 1, got {n_ref}")
    if not 0 <= current < n:
        raise ContractError(f"frame {current} outside 0..{n - 1}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    before = np.arange(0, current)
    after = np.arange(current + 1, n)
    want_before = (n_ref + 1) // 2
    want_after = n_ref // 2
    take_before = min(want_before, len(before))
    take_after = min(want_after + (want_before - take_before), len(after))
    take_before = min(want_before + (want_after - take_after), len(before))
    picks = []
    if take_before:
        picks.extend(int(v) for v in rng.choice(before, take_before, replace=False))
    if take_after:
        picks.extend(int(v) for v in rng.choice(after, take_after, replace=False))
    picks.extend([current] * (n_ref - len(picks)))
    return picks


def measure_fps(run_window, plan: WindowPlan, warmup: int = 1, repeats: int = 3) -> dict:
    """Time full passes over a plan and report real-frame throughput.

    ``run_window`` is called once per window with the tuple of slot indices.
    Warmup passes are discarded; the reported FPS uses the median pass time
    and counts only the original frames, not padding.
    """
    if warmup < 1 or repeats < 1:
        raise ContractError("warmup and repeats must be >= 1")
    for _ in range(warmup):
        for slots in plan.windows:
            run_window(slots)
    pass_times = []
    window_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for slots in plan.windows:
            w0 = time.perf_counter()
            run_window(slots)
            window_times.append(time.perf_counter() - w0)
        pass_times.append(time.perf_counter() - t0)
    med = median(pass_times)
    return {
        "fps": plan.n / med if med > 0 else float("inf"),
        "frames": plan.n,
        "pass_seconds": pass_times,
        "window_ms": {
            "mean": 1e3 * mean(window_times),
            "median": 1e3 * median(window_times),
            "min": 1e3 * min(window_times),
            "max": 1e3 * max(window_times),
        },
    }
