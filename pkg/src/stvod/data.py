"""Synthetic moving-shape video clips and bit-exact clip storage.

Each clip is a stack of RGB frames plus per-frame box annotations.  Objects
are colored geometric shapes drifting with near-constant velocity; stressors
are motion blur (streaked rendering along the velocity) and occluder events
that cover a shape for a few frames while its ground truth persists.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

SHAPE_NAMES = ("disc", "square", "triangle", "ring")

_SHAPE_COLORS = {
    "disc": (220, 64, 64),
    "square": (64, 200, 84),
    "triangle": (84, 112, 228),
    "ring": (228, 198, 58),
}


@dataclass
class SynthConfig:
    clips: int = 8
    frames: int = 24
    image_size: int = 64
    shapes: tuple[str, ...] = SHAPE_NAMES
    speed: tuple[float, float] = (0.8, 2.0)
    walk: float = 0.3
    occluder_prob: float = 0.0
    blur_len: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size % 32 != 0:
            raise ContractError(f"image size must be a multiple of 32, got {self.image_size}")
        if self.clips < 1 or self.frames < 1:
            raise ContractError("need at least one clip and one frame")
        unknown = [s for s in self.shapes if s not in SHAPE_NAMES]
        if unknown:
            raise ContractError(f"unknown shapes {unknown}; choose from {SHAPE_NAMES}")


@dataclass
class ClipObject:
    class_id: int
    bbox: tuple[float, float, float, float]
    occluded: bool = False


@dataclass
class FrameAnnotation:
    index: int
    objects: list[ClipObject] = field(default_factory=list)


@dataclass
class Clip:
    clip_id: str
    width: int
    height: int
    classes: list[str]
    frames: list[np.ndarray]
    annotations: list[FrameAnnotation]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        half = r * 0.9
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "triangle":
        # apex on top, flat base at cy + 0.8r
        t = (ys - (cy - r)) / (1.8 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ContractError(f"unknown shape {shape!r}")


def _mask_bbox(mask: np.ndarray, size: int) -> tuple[float, float, float, float] | None:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    # half-open pixel extent, normalized by the image side
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    cx = (x0 + x1) / 2 / size
    cy = (y0 + y1) / 2 / size
    return (cx, cy, (x1 - x0) / size, (y1 - y0) / size)


def _paint(frame: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    frame[mask] = color


def generate_synthetic(cfg: SynthConfig) -> list[Clip]:
    """Render deterministic clips of drifting shapes with optional stressors."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    classes = list(cfg.shapes)
    clips = []
    for ci in range(cfg.clips):
        background = rng.integers(24, 52, size=3).astype(np.uint8)
        n_obj = int(rng.integers(1, min(4, len(classes)) + 1))
        order = rng.permutation(len(classes))[:n_obj]

        objs = []
        for class_id in order:
            r = rng.uniform(0.09, 0.16) * size
            pos = rng.uniform(r + 1, size - r - 1, size=2)
            angle = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(*cfg.speed)
            vel = np.array([math.cos(angle), math.sin(angle)]) * speed
            color = np.clip(
                np.array(_SHAPE_COLORS[classes[class_id]], dtype=np.int64)
                + rng.integers(-25, 26, size=3),
                0, 255,
            ).astype(np.uint8)
            # stressor draws happen unconditionally so that configs differing
            # only in stressor settings share trajectories
            blur = rng.uniform(*cfg.blur_len)
            wants_occlusion = rng.random() < cfg.occluder_prob
            length = min(int(rng.integers(2, 6)), max(1, cfg.frames - 1))
            start = int(rng.integers(1, max(2, cfg.frames - length + 1)))
            occlusion = (start, start + length) if wants_occlusion and cfg.frames >= 3 else None
            objs.append({
                "class_id": int(class_id), "shape": classes[class_id],
                "r": r, "pos": pos, "vel": vel, "color": color,
                "blur": blur, "occlusion": occlusion,
                "occ_color": np.clip(rng.integers(105, 150, size=3), 0, 255).astype(np.uint8),
            })

        frames = []
        annos = []
        for t in range(cfg.frames):
            if t > 0:
                for o in objs:
                    v = o["vel"] + rng.uniform(-cfg.walk, cfg.walk, size=2)
                    norm = float(np.hypot(*v))
                    if norm > 1e-9:
                        v = v * np.clip(norm, cfg.speed[0], cfg.speed[1]) / norm
                    o["vel"] = v
                    o["pos"] = o["pos"] + o["vel"]
                    # reflect so the whole shape stays inside the image
                    for ax in range(2):
                        lo, hi = o["r"] + 1, size - o["r"] - 1
                        if o["pos"][ax] < lo:
                            o["pos"][ax] = 2 * lo - o["pos"][ax]
                            o["vel"][ax] = -o["vel"][ax]
                        elif o["pos"][ax] > hi:
                            o["pos"][ax] = 2 * hi - o["pos"][ax]
                            o["vel"][ax] = -o["vel"][ax]

            frame = np.zeros((size, size, 3), dtype=np.float64)
            frame[:] = background
            anno = FrameAnnotation(index=t)
            for o in objs:
                cx, cy = o["pos"]
                sharp = _shape_mask(o["shape"], cx, cy, o["r"], size)
                if o["blur"] > 0.5:
                    # streak: average renders along the velocity direction
                    steps = max(2, int(math.ceil(o["blur"])) + 1)
                    unit = o["vel"] / max(1e-9, float(np.hypot(*o["vel"])))
                    layer = np.zeros((size, size), dtype=np.float64)
                    for s in range(steps):
                        shift = o["blur"] * (s / (steps - 1) - 0.5)
                        m = _shape_mask(o["shape"], cx + unit[0] * shift,
                                        cy + unit[1] * shift, o["r"], size)
                        layer += m
                    layer /= steps
                    frame = frame * (1 - layer[:, :, None]) + \
                        layer[:, :, None] * o["color"].astype(np.float64)
                else:
                    _paint(frame, sharp, o["color"].astype(np.float64))

                occluded = bool(
                    o["occlusion"] and o["occlusion"][0] <= t < o["occlusion"][1]
                )
                bbox = _mask_bbox(sharp, size)
                if bbox is None:
                    continue
                anno.objects.append(ClipObject(o["class_id"], bbox, occluded))

            # occluders are painted last so they really cover their target
            for o in objs:
                if o["occlusion"] and o["occlusion"][0] <= t < o["occlusion"][1]:
                    cx, cy = o["pos"]
                    half = o["r"] * 1.25
                    ys, xs = np.mgrid[0:size, 0:size]
                    cover = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
                    frame[cover] = o["occ_color"].astype(np.float64)

            frames.append(np.clip(np.rint(frame), 0, 255).astype(np.uint8))
            annos.append(anno)

        clips.append(Clip(
            clip_id=f"clip_{cfg.seed:04d}_{ci:03d}", width=size, height=size,
            classes=classes, frames=frames, annotations=annos,
        ))
    return clips


def flip_clip(clip: Clip) -> Clip:
    """Horizontal mirror of frames and box centers; the only augmentation."""
    flipped = [np.ascontiguousarray(f[:, ::-1]) for f in clip.frames]
    annos = [
        FrameAnnotation(a.index, [
            ClipObject(o.class_id,
                       (1.0 - o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
                       o.occluded)
            for o in a.objects
        ])
        for a in clip.annotations
    ]
    return Clip(clip.clip_id + "_flip", clip.width, clip.height,
                list(clip.classes), flipped, annos)


def frame_to_input(frame: np.ndarray) -> np.ndarray:
    """uint8 RGB image to the float32 [H, W, 3] range the models consume."""
    return (frame.astype(np.float32) / 255.0) - 0.5


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def _write_ppm(path: Path, frame: np.ndarray) -> None:
    h, w = frame.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(frame.astype(np.uint8).tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, f"byte {start}", "unexpected end of header")
        return blob[start:pos]

    magic = token()
    if magic != b"P6":
        raise ParseError(path, "byte 0", f"expected P6 magic, found {magic!r}")
    dims = []
    for name in ("width", "height", "maxval"):
        tok = token()
        if not re.fullmatch(rb"\d+", tok):
            raise ParseError(path, f"byte {pos - len(tok)}", f"bad {name} {tok!r}")
        dims.append(int(tok))
    w, h, maxval = dims
    if maxval != 255:
        raise ParseError(path, f"byte {pos}", f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = blob[pos:pos + need]
    if len(payload) < need:
        raise ParseError(
            path, f"byte {pos + len(payload)}",
            f"pixel data truncated: expected {need} bytes, found {len(payload)}",
        )
    if len(blob) > pos + need:
        raise ParseError(path, f"byte {pos + need}", "trailing bytes after pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def save_clip(clip: Clip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        _write_ppm(directory / f"frame_{i:06d}.ppm", frame)
    doc = {
        "clip_id": clip.clip_id,
        "width": clip.width,
        "height": clip.height,
        "classes": clip.classes,
        "frames": [
            {
                "index": a.index,
                "objects": [
                    {
                        "class_id": o.class_id,
                        "bbox": [float(v) for v in o.bbox],
                        "occluded": o.occluded,
                    }
                    for o in a.objects
                ],
            }
            for a in clip.annotations
        ],
    }
    (directory / "annotations.json").write_text(json.dumps(doc, indent=1))


def _require(cond: bool, path, where: str, message: str) -> None:
    if not cond:
        raise ParseError(path, where, message)


def load_clip(directory) -> Clip:
    directory = Path(directory)
    anno_path = directory / "annotations.json"
    if not anno_path.exists():
        raise ParseError(anno_path, "file", "annotations.json not found")
    try:
        doc = json.loads(anno_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(anno_path, f"byte {exc.pos}", exc.msg) from exc

    for key in ("clip_id", "width", "height", "classes", "frames"):
        _require(key in doc, anno_path, "top level", f"missing key {key!r}")
    classes = doc["classes"]
    _require(isinstance(classes, list) and classes, anno_path, "classes",
             "classes must be a non-empty list")

    annotations = []
    for fi, entry in enumerate(doc["frames"]):
        where = f"frames[{fi}]"
        _require(entry.get("index") == fi, anno_path, where,
                 f"frame indices must be 0..N-1 in order, got {entry.get('index')!r}")
        objects = []
        for oi, obj in enumerate(entry.get("objects", [])):
            spot = f"{where}.objects[{oi}]"
            cid = obj.get("class_id")
            _require(isinstance(cid, int) and 0 <= cid < len(classes),
                     anno_path, spot, f"class_id {cid!r} out of range")
            bbox = obj.get("bbox")
            _require(isinstance(bbox, list) and len(bbox) == 4, anno_path, spot,
                     f"bbox must be 4 numbers, got {bbox!r}")
            _require(all(isinstance(v, (int, float)) and 0.0 < v < 1.0 for v in bbox),
                     anno_path, spot, f"bbox values must lie in (0, 1), got {bbox}")
            _require(isinstance(obj.get("occluded"), bool), anno_path, spot,
                     "occluded flag must be a bool")
            objects.append(ClipObject(cid, tuple(float(v) for v in bbox),
                                      obj["occluded"]))
        annotations.append(FrameAnnotation(fi, objects))

    frame_paths = sorted(directory.glob("frame_*.ppm"))
    _require(len(frame_paths) == len(annotations), anno_path, "frames",
             f"{len(annotations)} annotated frames but {len(frame_paths)} image files")
    frames = [_read_ppm(p) for p in frame_paths]
    for p, f in zip(frame_paths, frames):
        _require(f.shape == (doc["height"], doc["width"], 3), p, "dimensions",
                 f"frame is {f.shape[1]}x{f.shape[0]}, annotations say "
                 f"{doc['width']}x{doc['height']}")
    return Clip(doc["clip_id"], doc["width"], doc["height"], list(classes),
                frames, annotations)


def save_dataset(clips: list[Clip], directory) -> None:
    directory = Path(directory)
    for clip in clips:
        save_clip(clip, directory / clip.clip_id)


def load_dataset(directory) -> list[Clip]:
    directory = Path(directory)
    clip_dirs = sorted(d for d in directory.iterdir() if d.is_dir())
    if not clip_dirs:
        raise ParseError(directory, "directory", "no clip directories found")
    return [load_clip(d) for d in clip_dirs]
