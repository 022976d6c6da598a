"""Tensor core: forward oracles, autodiff properties, gradient checks."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvod.errors import ContractError, DimensionError
from stvod import tensor as T
from stvod.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# forward oracles
# ---------------------------------------------------------------------------


def test_linear_identity_passthrough(rng):
    x = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    eye = Tensor(np.eye(4, dtype=np.float32))
    zero = Tensor(np.zeros(4, dtype=np.float32))
    out = T.linear(x, eye, zero)
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_matches_triple_loop_oracle(rng):
    x = rng.normal(size=(3, 4)).astype(np.float32)
    w = rng.normal(size=(4, 2)).astype(np.float32)
    b = rng.normal(size=(2,)).astype(np.float32)
    out = T.linear(Tensor(x), Tensor(w), Tensor(b)).data

    # independent 64-bit scalar-loop reference
    expected = np.zeros((3, 2), dtype=np.float64)
    for i in range(3):
        for j in range(2):
            acc = float(b[j])
            for k in range(4):
                acc += float(x[i, k]) * float(w[k, j])
            expected[i, j] = acc
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_softmax_constant_row_is_uniform():
    out = T.softmax(Tensor(np.full((1, 5), 3.25, dtype=np.float32))).data
    np.testing.assert_allclose(out, np.full((1, 5), 0.2), atol=1e-7)


def test_softmax_shift_invariance():
    a = T.softmax(Tensor(np.array([[1000.0, 1001.0]], dtype=np.float32))).data
    b = T.softmax(Tensor(np.array([[0.0, 1.0]], dtype=np.float32))).data
    np.testing.assert_allclose(a, b, atol=1e-7)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(min_value=-1e4, max_value=1e4, allow_nan=False), min_size=1, max_size=64)
)
def test_softmax_rows_sum_to_one_for_any_finite_input(values):
    x = Tensor(np.array([values], dtype=np.float32))
    out = T.softmax(x).data
    assert np.all(out >= 0.0)
    assert abs(float(out.sum()) - 1.0) <= 1e-6


def test_sigmoid_and_relu_fixed_points():
    assert T.sigmoid(Tensor(np.zeros(3))).data == pytest.approx(0.5)
    assert np.all(T.relu(Tensor(np.array([-2.0, -0.1]))).data == 0.0)
    np.testing.assert_allclose(
        T.relu(Tensor(np.array([0.5, 2.0]))).data, [0.5, 2.0]
    )


def test_sigmoid_saturates_without_overflow():
    out = T.sigmoid(Tensor(np.array([-1e4, 1e4], dtype=np.float32))).data
    assert out[0] == pytest.approx(0.0)
    assert out[1] == pytest.approx(1.0)
    ls = T.log_sigmoid(Tensor(np.array([-1e4, 1e4], dtype=np.float32))).data
    assert np.isfinite(ls).all()


def test_layer_norm_constant_row_zeroes_out():
    x = Tensor(np.full((2, 6), 7.0, dtype=np.float32))
    out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-7)


def test_layer_norm_two_point_row():
    x = Tensor(np.array([[1.0, -1.0]], dtype=np.float32))
    out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_matches_64bit_oracle(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    g = rng.normal(size=8).astype(np.float32)
    b = rng.normal(size=8).astype(np.float32)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data

    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    expected = (x64 - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_bilinear_sample_exact_on_grid_points(rng):
    fmap = rng.normal(size=(5, 7, 3)).astype(np.float32)
    pts = np.array([[2 / 6, 1 / 4], [0.0, 0.0], [1.0, 1.0]], dtype=np.float32)
    out = T.bilinear_sample(Tensor(fmap), Tensor(pts)).data
    np.testing.assert_allclose(out[0], fmap[1, 2], atol=1e-6)
    np.testing.assert_allclose(out[1], fmap[0, 0], atol=1e-6)
    np.testing.assert_allclose(out[2], fmap[4, 6], atol=1e-6)


def test_bilinear_sample_center_of_two_by_two_is_mean(rng):
    fmap = rng.normal(size=(2, 2, 4)).astype(np.float32)
    out = T.bilinear_sample(Tensor(fmap), Tensor(np.array([[0.5, 0.5]], dtype=np.float32))).data
    np.testing.assert_allclose(out[0], fmap.mean(axis=(0, 1)), atol=1e-6)


def test_bilinear_sample_outside_reads_zero(rng):
    fmap = rng.normal(size=(4, 4, 2)).astype(np.float32)
    pts = np.array([[-0.9, 0.5], [0.5, 1.9], [2.0, 2.0]], dtype=np.float32)
    out = T.bilinear_sample(Tensor(fmap), Tensor(pts)).data
    np.testing.assert_array_equal(out, 0.0)


def test_conv2d_matches_loop_oracle(rng):
    x = rng.normal(size=(6, 5, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
    b = rng.normal(size=(4,)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data

    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge").astype(np.float64)
    expected = np.zeros((3, 3, 4))
    for oy in range(3):
        for ox in range(3):
            for co in range(4):
                acc = float(b[co])
                for a in range(3):
                    for c in range(3):
                        for ci in range(2):
                            acc += xp[oy * 2 + a, ox * 2 + c, ci] * float(w[a, c, ci, co])
                expected[oy, ox, co] = acc
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_matmul_batched_matches_numpy(rng):
    a = rng.normal(size=(3, 4, 5)).astype(np.float32)
    b = rng.normal(size=(3, 5, 2)).astype(np.float32)
    out = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, a @ b, rtol=1e-6)


def test_bilinear_sample_batched_matches_per_map_loop(rng):
    fmap = rng.normal(size=(3, 5, 6, 4)).astype(np.float32)
    pts = rng.uniform(-0.2, 1.2, size=(3, 7, 2, 2)).astype(np.float32)
    batched = T.bilinear_sample(Tensor(fmap), Tensor(pts)).data
    for i in range(3):
        single = T.bilinear_sample(Tensor(fmap[i]), Tensor(pts[i])).data
        np.testing.assert_array_equal(batched[i], single)


def test_bilinear_sample_batched_gradients_match_per_map_loop(rng):
    fmap = rng.normal(size=(2, 4, 4, 3)).astype(np.float32)
    pts = rng.uniform(0.1, 0.9, size=(2, 5, 2)).astype(np.float32)

    fb = Tensor(fmap, requires_grad=True)
    pb = Tensor(pts, requires_grad=True)
    (T.bilinear_sample(fb, pb) * T.bilinear_sample(fb, pb)).sum().backward()

    for i in range(2):
        fs = Tensor(fmap[i], requires_grad=True)
        ps = Tensor(pts[i], requires_grad=True)
        (T.bilinear_sample(fs, ps) * T.bilinear_sample(fs, ps)).sum().backward()
        np.testing.assert_allclose(fb.grad[i], fs.grad, atol=1e-6)
        np.testing.assert_allclose(pb.grad[i], ps.grad, atol=1e-6)


def test_conv2d_batched_matches_per_image_loop(rng):
    x = rng.normal(size=(4, 6, 5, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
    b = rng.normal(size=(3,)).astype(np.float32)
    batched = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    for i in range(4):
        single = T.conv2d(Tensor(x[i]), Tensor(w), Tensor(b), stride=2).data
        np.testing.assert_allclose(batched[i], single, atol=1e-5)


def test_conv2d_batched_gradients_match_per_image_loop(rng):
    x = rng.normal(size=(2, 4, 4, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
    b = rng.normal(size=(3,)).astype(np.float32)

    xb = Tensor(x, requires_grad=True)
    wb = Tensor(w, requires_grad=True)
    bb = Tensor(b, requires_grad=True)
    (T.conv2d(xb, wb, bb) * T.conv2d(xb, wb, bb)).sum().backward()

    wg = np.zeros_like(w)
    bg = np.zeros_like(b)
    for i in range(2):
        xs = Tensor(x[i], requires_grad=True)
        ws = Tensor(w, requires_grad=True)
        bs = Tensor(b, requires_grad=True)
        (T.conv2d(xs, ws, bs) * T.conv2d(xs, ws, bs)).sum().backward()
        np.testing.assert_allclose(xb.grad[i], xs.grad, atol=1e-4)
        wg += ws.grad
        bg += bs.grad
    np.testing.assert_allclose(wb.grad, wg, atol=1e-4)
    np.testing.assert_allclose(bb.grad, bg, atol=1e-4)


# ---------------------------------------------------------------------------
# autodiff structure
# ---------------------------------------------------------------------------


def test_fanout_accumulates_both_contributions(rng):
    x0 = rng.normal(size=(3, 3)).astype(np.float32)

    x = Tensor(x0, requires_grad=True)
    y = (T.relu(x).sum() + (x * x).sum())
    y.backward()

    # duplicated-input oracle: feed two independent copies and add their grads
    xa = Tensor(x0.copy(), requires_grad=True)
    xb = Tensor(x0.copy(), requires_grad=True)
    (T.relu(xa).sum() + (xb * xb).sum()).backward()
    np.testing.assert_allclose(x.grad, xa.grad + xb.grad, atol=1e-7)


def test_backward_requires_scalar_without_seed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


def test_broadcast_add_gradient_shapes(rng):
    a = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (4, 3) and b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, 4.0)


def test_take_rows_scatters_and_accumulates(rng):
    x = Tensor(rng.normal(size=(5, 2)).astype(np.float32), requires_grad=True)
    picked = T.take_rows(x, np.array([1, 1, 3]))
    picked.sum().backward()
    np.testing.assert_allclose(x.grad[1], 2.0)
    np.testing.assert_allclose(x.grad[3], 1.0)
    np.testing.assert_allclose(x.grad[0], 0.0)


# ---------------------------------------------------------------------------
# gradient checks (20 random inputs per differentiable op)
# ---------------------------------------------------------------------------

_N_GRAD_TRIALS = 20


def _conditioned(fn, args, floor=0.02):
    # a float32 central difference cannot resolve tiny-but-nonzero gradients,
    # so only accept draws whose coordinates are zero or clearly nonzero
    tensors = [Tensor(a.astype(np.float32), requires_grad=True) for a in args]
    out = fn(*tensors)
    out.backward()
    scale = abs(float(out.data.reshape(()))) + 1.0
    for t in tensors:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        tiny = (np.abs(g) > 0.0) & (np.abs(g) < floor * scale * 0.01)
        if tiny.any():
            return False
    return True


def _check_many(make_case, tol32=1e-3, tol64=1e-5, trials=_N_GRAD_TRIALS):
    rng = np.random.default_rng(99)
    for trial in range(trials):
        for _ in range(50):
            fn, args = make_case(rng)
            if _conditioned(fn, args):
                break
        err32 = T.grad_check(fn, [a.astype(np.float32) for a in args])
        assert err32 < tol32, f"float32 grad error {err32} at trial {trial}"
        err64 = T.grad_check(fn, [a.astype(np.float64) for a in args])
        assert err64 < tol64, f"float64 grad error {err64} at trial {trial}"


# Float32 central differences only resolve gradients that are a reasonable
# fraction of the output's own rounding noise, so the 32-bit cases below use
# inputs/probes bounded away from zero.  The 64-bit pass (1e-5) is the strict
# correctness check and sees no such conditioning problem.


def _pos(rng, shape, lo=0.3, hi=1.3):
    return rng.uniform(lo, hi, size=shape)


def test_grad_linear():
    def case(rng):
        x, w, b = _pos(rng, (2, 3)), _pos(rng, (3, 2)), _pos(rng, (2,))
        probe = _pos(rng, (2, 2), 0.5, 1.5)
        return (lambda x_, w_, b_: (T.linear(x_, w_, b_) * probe).sum()), [x, w, b]

    _check_many(case)


def test_grad_softmax():
    def case(rng):
        base = rng.uniform(0.0, 1.0, size=(3, 1))
        delta = rng.uniform(0.5, 1.5, size=(3, 1))
        x = np.concatenate([base, base + delta], axis=1)
        probe = np.array([[1.0, 2.5]] * 3)
        return (lambda x_: (T.softmax(x_) * probe).sum()), [x]

    _check_many(case)


def test_grad_sigmoid_relu_log_abs():
    def case(rng):
        mag = rng.uniform(0.5, 2.0, size=6)
        sign = np.where(rng.random(6) > 0.5, 1.0, -1.0)
        x = mag * sign
        probe = _pos(rng, (6,), 0.5, 1.5)
        return (
            lambda x_: (T.sigmoid(x_) * probe).sum()
            + (T.relu(x_) * probe).sum()
            + T.log_sigmoid(x_).sum()
            + (T.absolute(x_) * probe).sum(),
            [x],
        )

    _check_many(case)


def test_grad_layer_norm():
    def case(rng):
        spread = np.array([-1.5, -0.5, 0.5, 1.5])
        x = rng.uniform(-1.0, 1.0, size=(3, 1)) + spread + 0.2 * rng.random((3, 4))
        g = _pos(rng, (4,), 0.8, 1.2)
        b = rng.uniform(-0.2, 0.2, size=4)
        probe = np.array([3.0, 1.0, 0.4, 1.7]) * _pos(rng, (3, 4), 0.8, 1.2)

        def fn(x_, g_, b_):
            # curved probe: a plain quadratic is blind to layer_norm's input
            # because the normalized output has fixed row statistics
            out = T.layer_norm(x_, g_, b_)
            return (T.exp(out * 0.4) * probe).sum()

        return fn, [x, g, b]

    _check_many(case)


def test_grad_bilinear_sample():
    def case(rng):
        # ramps in x and y keep the point-gradient away from zero; the sample
        # points sit mid-cell so the finite difference stays on one facet
        H, W = 4, 5
        yy, xx = np.mgrid[0:H, 0:W]
        fmap = np.stack([0.8 * xx + 0.1 * yy, 0.7 * yy - 0.2 * xx], axis=-1)
        fmap = fmap + 0.1 * rng.random((H, W, 2))
        px = rng.integers(0, W - 1, size=6) + 0.35 + 0.3 * rng.random(6)
        py = rng.integers(0, H - 1, size=6) + 0.35 + 0.3 * rng.random(6)
        pts = np.stack([px / (W - 1), py / (H - 1)], axis=1)
        probe = _pos(rng, (6, 2), 0.5, 1.5)
        return (
            lambda f_, p_: (T.bilinear_sample(f_, p_) * probe).sum(),
            [fmap, pts],
        )

    _check_many(case, trials=10)


def test_grad_conv2d():
    def case(rng):
        x = _pos(rng, (5, 4, 2))
        w = _pos(rng, (3, 3, 2, 3), 0.1, 0.5)
        b = _pos(rng, (3,))
        probe = _pos(rng, (3, 2, 3), 0.5, 1.5)
        return (
            lambda x_, w_, b_: (T.conv2d(x_, w_, b_, stride=2) * probe).sum(),
            [x, w, b],
        )

    _check_many(case, trials=6)


def test_grad_matmul_reshape_concat_take():
    def case(rng):
        a, b = _pos(rng, (3, 4)), _pos(rng, (4, 3))
        probe = _pos(rng, (3, 3), 0.5, 1.5)

        def fn(a_, b_):
            prod = T.matmul(a_, b_)
            both = T.concat([prod * probe, T.transpose(prod)], axis=0)
            picked = T.take_rows(both, np.array([0, 2, 5]))
            return picked.sum()

        return fn, [a, b]

    _check_many(case, trials=10)


def test_grad_minmax_div():
    def case(rng):
        a = _pos(rng, (5,), 0.5, 1.5)
        b = _pos(rng, (5,), 1.6, 2.5)

        def fn(a_, b_):
            return (T.maximum(a_, b_) * 2.0).sum() + (T.minimum(a_, b_) / b_).sum()

        return fn, [a, b]

    _check_many(case, trials=10)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------


def test_registry_rejects_duplicate_names():
    reg = T.ParamRegistry(seed=0)
    reg.param("layer.w", (3, 3))
    with pytest.raises(ContractError):
        reg.param("layer.w", (3, 3))


def test_registry_freeze_by_prefix():
    reg = T.ParamRegistry(seed=0)
    w1 = reg.param("spatial.w", (2, 2))
    w2 = reg.param("temporal.w", (2, 2))
    reg.freeze("spatial.")
    assert not w1.requires_grad and w2.requires_grad
    assert set(reg.trainable()) == {"temporal.w"}
