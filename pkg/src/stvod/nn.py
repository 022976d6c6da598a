"""Small parameterized building blocks on top of the tensor core."""

from __future__ import annotations

import numpy as np

from .tensor import ParamRegistry, Tensor, layer_norm, linear, relu, sigmoid


class Linear:
    """Affine map with weight [d_in, d_out].

    ``init="zeros"`` zeroes both weight and bias; residual branches start
    that way so a freshly stacked layer is an identity at step 0.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d_in: int, d_out: int,
                 init: str = "xavier") -> None:
        self.weight = reg.param(f"{prefix}.weight", (d_in, d_out), init=init)
        self.bias = reg.param(f"{prefix}.bias", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, reg: ParamRegistry, prefix: str, d: int) -> None:
        self.gain = reg.param(f"{prefix}.gain", (d,), init="ones")
        self.bias = reg.param(f"{prefix}.bias", (d,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class FeedForward:
    """Two-layer MLP used inside every transformer layer.

    The second projection is zero-initialized, making the residual branch
    inert until training moves it.
    """

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, hidden: int) -> None:
        self.fc1 = Linear(reg, f"{prefix}.fc1", d, hidden)
        self.fc2 = Linear(reg, f"{prefix}.fc2", hidden, d, init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class MLP:
    """Three-layer perceptron for box regression; sigmoid squashes the output."""

    def __init__(self, reg: ParamRegistry, prefix: str, d_in: int, d_hidden: int,
                 d_out: int, squash: bool = True) -> None:
        self.fc1 = Linear(reg, f"{prefix}.fc1", d_in, d_hidden)
        self.fc2 = Linear(reg, f"{prefix}.fc2", d_hidden, d_hidden)
        self.fc3 = Linear(reg, f"{prefix}.fc3", d_hidden, d_out)
        self.squash = squash

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.fc2(relu(self.fc1(x))))
        out = self.fc3(h)
        return sigmoid(out) if self.squash else out


def copy_params(src: list[Tensor], dst: list[Tensor]) -> None:
    """Overwrite dst parameter values with src values (shapes must agree)."""
    for s, d in zip(src, dst, strict=True):
        if s.data.shape != d.data.shape:
            raise ValueError(f"copy_params shape mismatch {s.data.shape} vs {d.data.shape}")
        d.data = s.data.copy()
