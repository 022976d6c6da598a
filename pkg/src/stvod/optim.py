"""Adaptive optimization over the named parameter registry."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .tensor import Tensor

__all__ = ["AdamW", "clip_grad_norm"]


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale every gradient so the joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Parameters without gradients are skipped.
    """
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads:
            g *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay.

    The decay term multiplies the weights directly instead of flowing
    through the moment estimates, and it skips rank-0/1 tensors (biases and
    norm gains decay toward harmful fixed points).  Per-parameter learning
    rates resolve through the longest matching name prefix in
    ``lr_overrides``, falling back to ``lr``.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4,
                 lr_overrides: dict[str, float] | None = None) -> None:
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0 <= betas[0] < 1 or not 0 <= betas[1] < 1:
            raise ContractError(f"betas must lie in [0, 1), got {betas}")
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        overrides = lr_overrides or {}
        self.lr: dict[str, float] = {}
        for name in self.params:
            best = ""
            for prefix in overrides:
                if name.startswith(prefix) and len(prefix) > len(best):
                    best = prefix
            self.lr[name] = overrides[best] if best else lr
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Apply one update from the gradients currently on the parameters."""
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self._m[name], self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= self.lr[name] * update
