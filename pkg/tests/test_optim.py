"""Optimizer behavior: reference-formula agreement, decay coupling, clipping."""

import numpy as np
import pytest

from stvod.errors import ContractError
from stvod.optim import AdamW, clip_grad_norm
from stvod.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def reference_adamw(w0, grads, lr, b1, b2, eps, wd):
    """Scalar 64-bit re-derivation of the update rule."""
    w = w0.astype(np.float64).copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        g = g.astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        step = mhat / (np.sqrt(vhat) + eps)
        if w.ndim >= 2:
            step = step + wd * w
        w = w - lr * step
    return w


def test_matches_reference_formula_over_ten_steps(rng):
    w0 = rng.normal(size=(4, 3)).astype(np.float32)
    grads = [rng.normal(size=(4, 3)).astype(np.float32) for _ in range(10)]

    p = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW({"w": p}, lr=1e-2, weight_decay=1e-4)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    expected = reference_adamw(w0, grads, 1e-2, 0.9, 0.999, 1e-8, 1e-4)
    np.testing.assert_allclose(p.data, expected, atol=1e-6)


def test_decay_is_decoupled_from_moments(rng):
    # zero gradients: the adaptive term vanishes, leaving pure decay on
    # matrices and no movement at all on vectors
    w = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=True)
    w0, b0 = w.data.copy(), b.data.copy()
    opt = AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.01)
    for _ in range(3):
        w.grad = np.zeros_like(w.data)
        b.grad = np.zeros_like(b.data)
        opt.step()
    np.testing.assert_allclose(w.data, w0 * (1 - 0.1 * 0.01) ** 3, rtol=1e-5)
    np.testing.assert_array_equal(b.data, b0)


def test_skips_params_without_gradients(rng):
    a = Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)
    b0 = b.data.copy()
    opt = AdamW({"a": a, "b": b}, lr=0.1)
    a.grad = np.ones_like(a.data)
    opt.step()
    np.testing.assert_array_equal(b.data, b0)
    assert not np.array_equal(a.data, a.data * 0 + b0)


def test_lr_overrides_pick_longest_prefix(rng):
    p1 = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    p2 = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    opt = AdamW(
        {"spatial.backbone.w": p1, "spatial.decoder.w": p2},
        lr=1e-2, weight_decay=0.0,
        lr_overrides={"spatial": 1e-3, "spatial.backbone": 1e-4},
    )
    assert opt.lr["spatial.backbone.w"] == 1e-4
    assert opt.lr["spatial.decoder.w"] == 1e-3


def test_converges_on_quadratic(rng):
    target = rng.normal(size=(5, 5)).astype(np.float32)
    p = Tensor(np.zeros((5, 5), np.float32), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.05, weight_decay=0.0)
    for _ in range(400):
        p.grad = 2.0 * (p.data - target)
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-2)


def test_rejects_bad_hyperparameters():
    p = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        AdamW({"w": p}, lr=0.0)
    with pytest.raises(ContractError):
        AdamW({"w": p}, lr=1e-3, betas=(1.0, 0.999))


def test_zero_grad_clears_all(rng):
    p = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    p.grad = np.ones_like(p.data)
    opt = AdamW({"w": p}, lr=1e-3)
    opt.zero_grad()
    assert p.grad is None


def test_clip_grad_norm_scales_jointly(rng):
    a = Tensor(np.ones((2,), np.float32), requires_grad=True)
    b = Tensor(np.ones((2,), np.float32), requires_grad=True)
    a.grad = np.array([3.0, 0.0], np.float32)
    b.grad = np.array([0.0, 4.0], np.float32)
    norm = clip_grad_norm({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    joint = np.concatenate([a.grad, b.grad])
    assert np.linalg.norm(joint) == pytest.approx(1.0, abs=1e-6)
    # direction preserved
    np.testing.assert_allclose(a.grad / np.linalg.norm(joint), a.grad, atol=1e-6)


def test_clip_grad_norm_leaves_small_gradients_alone(rng):
    a = Tensor(np.ones((2,), np.float32), requires_grad=True)
    a.grad = np.array([0.1, 0.2], np.float32)
    before = a.grad.copy()
    clip_grad_norm({"a": a}, max_norm=10.0)
    np.testing.assert_array_equal(a.grad, before)


def test_clip_grad_norm_rejects_nonpositive_limit():
    a = Tensor(np.ones((2,), np.float32), requires_grad=True)
    a.grad = np.ones((2,), np.float32)
    with pytest.raises(ContractError):
        clip_grad_norm({"a": a}, max_norm=0.0)
