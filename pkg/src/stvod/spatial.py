"""Single-frame transformer detector.

Pipeline: a small strided conv backbone produces feature levels at strides
8/16/32 which are summed (after upsampling) into one fused map; an encoder of
deformable self-attention layers turns the fused map into a memory encoding;
a decoder grounds learned object queries into that memory; shared linear and
MLP heads emit class logits and sigmoid-normalized (cx, cy, w, h) boxes.

All transformer layers are pre-norm with zero-initialized output projections,
so a freshly built stack computes the identity on its residual stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import DeformableAttention, MultiHeadAttention
from .errors import ContractError
from .nn import MLP, FeedForward, LayerNorm, Linear
from .tensor import ParamRegistry, Tensor, bilinear_sample, relu, sigmoid


@dataclass
class SpatialConfig:
    d: int = 64
    heads: int = 4
    points: int = 4
    n_ste: int = 2
    n_std: int = 2
    n_queries: int = 60
    n_classes: int = 4
    ffn_dim: int = 128
    fuse_levels: bool = True

    def __post_init__(self) -> None:
        if self.d % 4 != 0:
            raise ContractError(f"model width must be divisible by 4, got {self.d}")
        if self.d % self.heads != 0:
            raise ContractError(f"width {self.d} not divisible by {self.heads} heads")


def sine_positional_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-d sine/cosine position code, y features first then x.

    Channel 2i holds sin(pos / 10000^(2i/half)), channel 2i+1 the matching
    cos, for each axis's half of the width.
    """
    if d % 4 != 0:
        raise ContractError(f"positional encoding width must be divisible by 4, got {d}")
    half = d // 2
    freqs = 10000.0 ** (-(2 * (np.arange(half) // 2)) / half)
    ys = np.arange(h, dtype=np.float64)[:, None] * freqs
    xs = np.arange(w, dtype=np.float64)[:, None] * freqs
    out = np.zeros((h, w, d), dtype=np.float64)
    out[:, :, 0:half:2] = np.sin(ys[:, None, 0::2])
    out[:, :, 1:half:2] = np.cos(ys[:, None, 1::2])
    out[:, :, half::2] = np.sin(xs[None, :, 0::2])
    out[:, :, half + 1::2] = np.cos(xs[None, :, 1::2])
    return out.astype(np.float32)


def cell_reference_grid(h: int, w: int) -> np.ndarray:
    """Normalized (x, y) center of every map cell under align-corners."""
    xs = np.linspace(0.0, 1.0, w) if w > 1 else np.array([0.0])
    ys = np.linspace(0.0, 1.0, h) if h > 1 else np.array([0.0])
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float32)


class ConvStage:
    """Stride-2 conv + relu + layer_norm over channels."""

    def __init__(self, reg: ParamRegistry, prefix: str, c_in: int, c_out: int) -> None:
        self.weight = reg.param(f"{prefix}.conv.weight", (3, 3, c_in, c_out))
        self.bias = reg.param(f"{prefix}.conv.bias", (c_out,), init="zeros")
        self.norm = LayerNorm(reg, f"{prefix}.norm", c_out)
        self.c_out = c_out

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import conv2d

        return self.norm(relu(conv2d(x, self.weight, self.bias, stride=2)))


def upsample_to(fmap: Tensor, h: int, w: int) -> Tensor:
    """Align-corners bilinear resize of a [h', w', c] or [B, h', w', c] map."""
    grid = cell_reference_grid(h, w)
    if fmap.ndim == 4:
        b, c = fmap.shape[0], fmap.shape[3]
        tiled = Tensor(np.broadcast_to(grid, (b, h * w, 2)).copy())
        return bilinear_sample(fmap, tiled).reshape(b, h, w, c)
    return bilinear_sample(fmap, Tensor(grid)).reshape(h, w, fmap.shape[2])


class Backbone:
    """Five stride-2 stages; levels tapped at strides 8, 16 and 32."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int) -> None:
        self.stem1 = ConvStage(reg, f"{prefix}.stem1", 3, d // 2)
        self.stem2 = ConvStage(reg, f"{prefix}.stem2", d // 2, d // 2)
        self.stage8 = ConvStage(reg, f"{prefix}.stage8", d // 2, d)
        self.stage16 = ConvStage(reg, f"{prefix}.stage16", d, d)
        self.stage32 = ConvStage(reg, f"{prefix}.stage32", d, d)

    def levels(self, image: Tensor) -> dict[int, Tensor]:
        if image.ndim not in (3, 4) or image.shape[-1] != 3:
            raise ContractError(f"backbone expects [..., H, W, 3], got {image.shape}")
        if image.shape[-3] % 32 or image.shape[-2] % 32:
            raise ContractError(
                f"image extent must be a multiple of 32, got {image.shape}"
            )
        x = self.stem2(self.stem1(image))
        l8 = self.stage8(x)
        l16 = self.stage16(l8)
        l32 = self.stage32(l16)
        return {8: l8, 16: l16, 32: l32}

    def fused(self, image: Tensor, fuse: bool = True) -> Tensor:
        levels = self.levels(image)
        base = levels[8]
        if not fuse:
            return base
        h, w = base.shape[-3], base.shape[-2]
        return base + upsample_to(levels[16], h, w) + upsample_to(levels[32], h, w)


class EncoderLayer:
    """Deformable self-attention over map cells, then a feed-forward block."""

    def __init__(self, reg: ParamRegistry, prefix: str, cfg: SpatialConfig) -> None:
        self.norm1 = LayerNorm(reg, f"{prefix}.norm1", cfg.d)
        self.attn = DeformableAttention(reg, f"{prefix}.attn", cfg.d, cfg.heads, cfg.points)
        self.norm2 = LayerNorm(reg, f"{prefix}.norm2", cfg.d)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", cfg.d, cfg.ffn_dim)

    def __call__(self, cells: Tensor, pos: Tensor, refs: Tensor,
                 extent: tuple[int, int]) -> Tensor:
        h, w = extent
        d = cells.shape[-1]
        map_shape = (*cells.shape[:-2], h, w, d)
        normed = self.norm1(cells)
        att = self.attn(normed + pos, refs, normed.reshape(*map_shape))
        cells = cells + att
        return cells + self.ffn(self.norm2(cells))


class DecoderLayer:
    """Query self-attention, deformable cross-attention into memory, FFN."""

    def __init__(self, reg: ParamRegistry, prefix: str, cfg: SpatialConfig) -> None:
        self.norm1 = LayerNorm(reg, f"{prefix}.norm1", cfg.d)
        self.self_attn = MultiHeadAttention(reg, f"{prefix}.self", cfg.d, cfg.heads)
        self.norm2 = LayerNorm(reg, f"{prefix}.norm2", cfg.d)
        self.cross_attn = DeformableAttention(
            reg, f"{prefix}.cross", cfg.d, cfg.heads, cfg.points
        )
        self.norm3 = LayerNorm(reg, f"{prefix}.norm3", cfg.d)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", cfg.d, cfg.ffn_dim)

    def __call__(self, queries: Tensor, query_pos: Tensor, refs: Tensor,
                 memory: Tensor) -> Tensor:
        normed = self.norm1(queries)
        tagged = normed + query_pos
        queries = queries + self.self_attn(tagged, tagged, values=normed)
        normed = self.norm2(queries)
        queries = queries + self.cross_attn(normed + query_pos, refs, memory)
        return queries + self.ffn(self.norm3(queries))


class PredictionHeads:
    """Shared classification and box-regression heads.

    The class bias starts negative so every query begins as confident
    background, which keeps the focal loss small at step 0.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, n_classes: int) -> None:
        self.cls = Linear(reg, f"{prefix}.cls", d, n_classes)
        self.cls.bias.data[:] = -4.0
        self.box = MLP(reg, f"{prefix}.box", d, d, 4, squash=True)

    def __call__(self, embeddings: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(embeddings), self.box(embeddings)


@dataclass
class FrameOutput:
    """Everything a later temporal stage needs about one frame."""

    memory: Tensor                # [H', W', d]
    queries: Tensor               # final decoder layer, normalized [n_q, d]
    query_layers: list[Tensor]    # normalized output of every decoder layer
    refs: Tensor                  # [n_q, 2] in [0, 1]
    logits: list[Tensor]          # per decoder layer [n_q, n_cls]
    boxes: list[Tensor]           # per decoder layer [n_q, 4]


class SpatialDetector:
    def __init__(self, reg: ParamRegistry, cfg: SpatialConfig,
                 prefix: str = "spatial") -> None:
        self.cfg = cfg
        self.backbone = Backbone(reg, f"{prefix}.backbone", cfg.d)
        self.query_embed = reg.param(
            f"{prefix}.query_embed", (cfg.n_queries, cfg.d), init="normal", scale=0.5
        )
        self.query_pos = reg.param(
            f"{prefix}.query_pos", (cfg.n_queries, cfg.d), init="normal", scale=0.5
        )
        self.ref_proj = Linear(reg, f"{prefix}.ref_proj", cfg.d, 2)
        self.encoder = [
            EncoderLayer(reg, f"{prefix}.enc{i}", cfg) for i in range(cfg.n_ste)
        ]
        self.decoder = [
            DecoderLayer(reg, f"{prefix}.dec{i}", cfg) for i in range(cfg.n_std)
        ]
        self.dec_norm = LayerNorm(reg, f"{prefix}.dec_norm", cfg.d)
        self.heads = PredictionHeads(reg, f"{prefix}.heads", cfg.d, cfg.n_classes)
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- encoding ------------------------------------------------------

    def _pe(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pe_cache:
            self._pe_cache[key] = sine_positional_encoding(h, w, self.cfg.d)
        return self._pe_cache[key]

    def encode(self, image: Tensor) -> Tensor:
        """Image to memory encoding [H', W', d]."""
        fused = self.backbone.fused(image, fuse=self.cfg.fuse_levels)
        h, w, d = fused.shape
        cells = fused.reshape(h * w, d)
        pos = Tensor(self._pe(h, w).reshape(h * w, d))
        refs = Tensor(cell_reference_grid(h, w))
        for layer in self.encoder:
            cells = layer(cells, pos, refs, (h, w))
        return cells.reshape(h, w, d)

    # -- decoding ------------------------------------------------------

    def reference_points(self) -> Tensor:
        return sigmoid(self.ref_proj(self.query_pos))

    def decode(self, memory: Tensor) -> tuple[list[Tensor], Tensor]:
        """Ground the learned queries; returns per-layer normalized embeddings."""
        refs = self.reference_points()
        queries = self.query_embed
        outputs = []
        for layer in self.decoder:
            queries = layer(queries, self.query_pos, refs, memory)
            outputs.append(self.dec_norm(queries))
        return outputs, refs

    def forward(self, image: Tensor) -> FrameOutput:
        memory = self.encode(image)
        layers, refs = self.decode(memory)
        logits = []
        boxes = []
        for embed in layers:
            cls, box = self.heads(embed)
            logits.append(cls)
            boxes.append(box)
        return FrameOutput(
            memory=memory, queries=layers[-1], query_layers=layers,
            refs=refs, logits=logits, boxes=boxes,
        )

    __call__ = forward

    # -- batched frames --------------------------------------------------

    def forward_batch(self, images: Tensor) -> list[FrameOutput]:
        """Run B frames through shared weights in one batched pass.

        Per-frame results match ``forward`` up to floating-point summation
        order; batching exists so a whole window costs one trip through the
        backbone and transformer instead of B.
        """
        if images.ndim != 4:
            raise ContractError(f"forward_batch expects [B, H, W, 3], got {images.shape}")
        b = images.shape[0]
        fused = self.backbone.fused(images, fuse=self.cfg.fuse_levels)
        _, h, w, d = fused.shape
        cells = fused.reshape(b, h * w, d)
        pos = Tensor(self._pe(h, w).reshape(h * w, d))
        refs_grid = Tensor(np.broadcast_to(cell_reference_grid(h, w),
                                           (b, h * w, 2)).copy())
        for layer in self.encoder:
            cells = layer(cells, pos, refs_grid, (h, w))
        memory = cells.reshape(b, h, w, d)

        tile = Tensor(np.zeros((b, 1, 1), np.float32))
        queries = self.query_embed + tile
        refs = self.reference_points() + tile
        outputs = []
        for layer in self.decoder:
            queries = layer(queries, self.query_pos, refs, memory)
            outputs.append(self.dec_norm(queries))
        per_layer = [self.heads(embed) for embed in outputs]

        frames = []
        for i in range(b):
            frames.append(FrameOutput(
                memory=memory[i],
                queries=outputs[-1][i],
                query_layers=[o[i] for o in outputs],
                refs=refs[i],
                logits=[cls[i] for cls, _ in per_layer],
                boxes=[box[i] for _, box in per_layer],
            ))
        return frames
