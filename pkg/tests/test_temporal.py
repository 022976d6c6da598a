"""Temporal aggregation: query filtering, fusion layers, and full wirings."""

import numpy as np
import pytest

from stvod.errors import ContractError
from stvod.nn import Linear
from stvod.oracles import roi_reference
from stvod.spatial import SpatialConfig
from stvod.temporal import (
    QRF,
    StagePrediction,
    TDTELayer,
    TemporalConfig,
    TQELayer,
    VideoDetector,
    qfh_select,
    roi_extract,
)
from stvod.tensor import ParamRegistry, Tensor, grad_check, layer_norm


@pytest.fixture
def rng():
    return np.random.default_rng(77)


def make_class_head(reg, scores):
    """Single-class head whose sigmoid scores for eye-row queries are given."""
    head = Linear(reg, "probe", len(scores), 1)
    logits = np.log(np.asarray(scores) / (1.0 - np.asarray(scores)))
    head.weight.data[:] = logits[:, None]
    head.bias.data[:] = 0.0
    return head


def small_model(variant, rng, *, n_ref=2, window=3, k_schedule=None,
                frame_identity=False, **spatial_kw):
    reg = ParamRegistry()
    s_cfg = SpatialConfig(d=16, heads=4, points=2, n_ste=1, n_std=1,
                          n_queries=12, n_classes=4, ffn_dim=32, **spatial_kw)
    t_cfg = TemporalConfig(variant=variant, n_ref=n_ref, window=window,
                           n_tqe=1, k_schedule=k_schedule,
                           frame_identity=frame_identity)
    model = VideoDetector(reg, s_cfg, t_cfg)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.05, p.shape)
    model.spatial.heads.cls.bias.data[:] = -2.0
    return model, reg


def frame(rng, size=32):
    return Tensor(rng.normal(0.0, 0.4, (size, size, 3)).astype(np.float32))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_rejects_unknown_variant():
    with pytest.raises(ContractError):
        TemporalConfig(variant="static")


def test_config_rejects_wrong_stage_count():
    with pytest.raises(ContractError):
        TemporalConfig(variant="transvod", stages=2)
    with pytest.raises(ContractError):
        TemporalConfig(variant="lite", stages=1)


def test_config_rejects_increasing_schedule():
    with pytest.raises(ContractError):
        TemporalConfig(variant="transvod_pp", k_schedule=(20, 50, 80))
    with pytest.raises(ContractError):
        TemporalConfig(variant="transvod_pp", k_schedule=(50, 20))


def test_full_scale_defaults_are_pinned():
    pp = TemporalConfig.paper_defaults("transvod_pp")
    assert pp.k_schedule == (80, 50, 20)
    assert (pp.stages, pp.n_tdte, pp.n_tqe, pp.n_tdtd) == (3, 1, 3, 1)
    assert (pp.n_ref, pp.window) == (14, 12)
    lite = TemporalConfig.paper_defaults("lite")
    assert lite.k_schedule == (80, 50, 30)
    base = TemporalConfig.paper_defaults("transvod")
    assert base.stages == 1 and base.n_tqe == 3


def test_resolved_schedules_fit_the_pool():
    assert TemporalConfig(variant="transvod").resolved_schedule(60) == (60,)
    ks = TemporalConfig(variant="transvod_pp").resolved_schedule(60)
    assert ks == (30, 20, 12)
    lite = TemporalConfig(variant="lite", window=4).resolved_schedule(60)
    assert len(lite) == 3 and all(a >= b for a, b in zip(lite, lite[1:]))
    assert lite[0] <= 60 * 4


# ---------------------------------------------------------------------------
# query filtering
# ---------------------------------------------------------------------------


def test_qfh_keeps_most_confident_queries():
    reg = ParamRegistry()
    head = make_class_head(reg, [0.9, 0.1, 0.5])
    queries = Tensor(np.eye(3, dtype=np.float32))
    kept, idx = qfh_select(queries, 2, head)
    assert idx.tolist() == [0, 2]
    np.testing.assert_array_equal(kept.data, queries.data[[0, 2]])


def test_qfh_matches_full_sort_oracle(rng):
    reg = ParamRegistry()
    head = Linear(reg, "cls", 8, 5)
    head.weight.data[:] = rng.normal(0.0, 1.0, (8, 5))
    head.bias.data[:] = rng.normal(0.0, 1.0, 5)
    for trial in range(1000):
        n = int(rng.integers(1, 40))
        q = rng.normal(0.0, 1.0, (n, 8)).astype(np.float32)
        if trial % 3 == 0 and n > 2:
            q[1] = q[0]  # force exact ties
            q[n // 2] = q[0]
        k = int(rng.integers(1, n + 1))
        logits = q.astype(np.float64) @ head.weight.data + head.bias.data
        scores = (1.0 / (1.0 + np.exp(-logits))).max(axis=1)
        expected = np.argsort(-scores, kind="stable")[:k]
        _, idx = qfh_select(Tensor(q), k, head)
        np.testing.assert_array_equal(idx, expected)


def test_qfh_keep_all_is_identity_up_to_order(rng):
    reg = ParamRegistry()
    head = Linear(reg, "cls", 6, 3)
    head.weight.data[:] = rng.normal(0.0, 1.0, (6, 3))
    q = Tensor(rng.normal(0.0, 1.0, (9, 6)).astype(np.float32))
    kept, idx = qfh_select(q, 9, head)
    assert sorted(idx.tolist()) == list(range(9))
    np.testing.assert_array_equal(np.sort(kept.data, axis=0), np.sort(q.data, axis=0))


def test_qfh_rejects_oversized_k():
    reg = ParamRegistry()
    head = Linear(reg, "cls", 4, 2)
    with pytest.raises(ContractError):
        qfh_select(Tensor(np.zeros((3, 4), np.float32)), 4, head)


def test_qfh_routes_gradient_through_values_only(rng):
    reg = ParamRegistry()
    head = Linear(reg, "cls", 4, 2)
    head.weight.data[:] = rng.normal(0.0, 1.0, (4, 2))
    q = Tensor(rng.normal(0.0, 1.0, (6, 4)).astype(np.float32), requires_grad=True)
    kept, idx = qfh_select(q, 3, head)
    kept.sum().backward()
    expected = np.zeros((6, 4), np.float32)
    expected[idx] = 1.0
    np.testing.assert_array_equal(q.grad, expected)
    assert head.weight.grad is None or not head.weight.grad.any()


# ---------------------------------------------------------------------------
# query aggregation layer
# ---------------------------------------------------------------------------


def test_tqe_fresh_layer_is_identity(rng):
    reg = ParamRegistry()
    layer = TQELayer(reg, "tqe", 8, 2, 16)
    cur = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    refs = Tensor(rng.normal(0.0, 1.0, (7, 8)).astype(np.float32))
    out = layer(cur, refs)
    np.testing.assert_array_equal(out.data, cur.data)


def test_tqe_mixes_reference_content(rng):
    reg = ParamRegistry()
    layer = TQELayer(reg, "tqe", 8, 2, 16)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.2, p.shape)
    cur = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    refs_a = Tensor(rng.normal(0.0, 1.0, (7, 8)).astype(np.float32))
    refs_b = Tensor(rng.normal(0.0, 1.0, (7, 8)).astype(np.float32))
    assert layer(cur, refs_a).shape == (5, 8)
    assert np.abs(layer(cur, refs_a).data - layer(cur, refs_b).data).max() > 1e-6


def test_tqe_rejects_empty_references(rng):
    reg = ParamRegistry()
    layer = TQELayer(reg, "tqe", 8, 2, 16)
    cur = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    with pytest.raises(ContractError):
        layer(cur, Tensor(np.zeros((0, 8), np.float32)))


def test_tqe_grad_check(rng):
    reg = ParamRegistry()
    layer = TQELayer(reg, "tqe", 6, 2, 12)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.3, p.shape)
    cur = Tensor(rng.normal(0.0, 1.0, (3, 6)), dtype=np.float64)
    refs = Tensor(rng.normal(0.0, 1.0, (4, 6)), dtype=np.float64)
    err = grad_check(lambda c, r: (layer(c, r) ** 2).sum(), [cur, refs])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# memory fusion layer
# ---------------------------------------------------------------------------


def test_tdte_fresh_layer_is_identity(rng):
    reg = ParamRegistry()
    layer = TDTELayer(reg, "tdte", 8, 2, 2, frames=3, ffn_dim=16)
    h, w = 4, 5
    cells = Tensor(rng.normal(0.0, 1.0, (h * w, 8)).astype(np.float32))
    pos = Tensor(rng.normal(0.0, 0.3, (h * w, 8)).astype(np.float32))
    from stvod.spatial import cell_reference_grid

    refs = Tensor(cell_reference_grid(h, w))
    mems = [Tensor(rng.normal(0.0, 1.0, (h, w, 8)).astype(np.float32))
            for _ in range(2)]
    out = layer(cells, pos, refs, (h, w), mems)
    np.testing.assert_array_equal(out.data, cells.data)


def test_tdte_references_reach_the_output(rng):
    reg = ParamRegistry()
    layer = TDTELayer(reg, "tdte", 8, 2, 2, frames=2, ffn_dim=16)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.1, p.shape)
    from stvod.spatial import cell_reference_grid

    h, w = 3, 3
    cells = Tensor(rng.normal(0.0, 1.0, (h * w, 8)).astype(np.float32))
    pos = Tensor(np.zeros((h * w, 8), np.float32))
    refs = Tensor(cell_reference_grid(h, w))
    mem_a = Tensor(rng.normal(0.0, 1.0, (h, w, 8)).astype(np.float32))
    mem_b = Tensor(rng.normal(0.0, 1.0, (h, w, 8)).astype(np.float32))
    out_a = layer(cells, pos, refs, (h, w), [mem_a])
    out_b = layer(cells, pos, refs, (h, w), [mem_b])
    assert np.abs(out_a.data - out_b.data).max() > 1e-6


# ---------------------------------------------------------------------------
# pooled region features
# ---------------------------------------------------------------------------


def test_roi_constant_map_returns_the_constant(rng):
    mem = Tensor(np.full((6, 8, 5), 3.25, np.float32))
    boxes = Tensor(rng.uniform(0.2, 0.4, (4, 4)).astype(np.float32))
    out = roi_extract(mem, boxes)
    np.testing.assert_allclose(out.data, 3.25, rtol=1e-6)


def test_roi_matches_scalar_oracle(rng):
    mem64 = rng.normal(0.0, 1.0, (9, 7, 6))
    boxes64 = np.column_stack([
        rng.uniform(0.0, 1.0, 20),
        rng.uniform(0.0, 1.0, 20),
        rng.uniform(0.01, 0.9, 20),
        rng.uniform(0.01, 0.9, 20),
    ])
    boxes64[3, 2] = 5e-5   # degenerate width
    boxes64[7, 3] = 0.0    # degenerate height
    out = roi_extract(Tensor(mem64, dtype=np.float64),
                      Tensor(boxes64, dtype=np.float64))
    np.testing.assert_allclose(out.data, roi_reference(mem64, boxes64), atol=1e-5)


def test_roi_degenerate_box_samples_center_only(rng):
    mem = Tensor(rng.normal(0.0, 1.0, (8, 8, 4)).astype(np.float32))
    box = np.array([[0.5, 0.5, 1e-6, 1e-6]], np.float32)
    out = roi_extract(mem, Tensor(box))
    from stvod.tensor import bilinear_sample

    center = bilinear_sample(mem, Tensor(np.array([[0.5, 0.5]], np.float32)))
    np.testing.assert_allclose(out.data, center.data, rtol=1e-5)


def test_roi_rejects_bad_box_shape(rng):
    mem = Tensor(np.zeros((4, 4, 2), np.float32))
    with pytest.raises(ContractError):
        roi_extract(mem, Tensor(np.zeros((3, 5), np.float32)))


def test_roi_grad_check(rng):
    mem = Tensor(rng.normal(0.0, 1.0, (6, 6, 3)), dtype=np.float64)
    boxes = Tensor(np.column_stack([
        rng.uniform(0.3, 0.7, 3),
        rng.uniform(0.3, 0.7, 3),
        rng.uniform(0.1, 0.3, 3),
        rng.uniform(0.1, 0.3, 3),
    ]), dtype=np.float64)
    err = grad_check(lambda m, b: (roi_extract(m, b) ** 2).sum(), [mem, boxes])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# region-feature fusion
# ---------------------------------------------------------------------------


def test_qrf_zeroed_generator_ignores_regions(rng):
    reg = ParamRegistry()
    qrf = QRF(reg, "qrf", 8, 2, 2)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.2, p.shape)
    qrf.generator.weight.data[:] = 0.0
    qrf.generator.bias.data[:] = 0.0
    q = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    roi_a = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    roi_b = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    np.testing.assert_array_equal(qrf(q, roi_a).data, qrf(q, roi_b).data)


def test_qrf_fresh_normalizes_normed_input(rng):
    # fresh fusion block on an already normalized row leaves it unchanged
    reg = ParamRegistry()
    qrf = QRF(reg, "qrf", 8, 2, 2)
    raw = rng.normal(0.0, 1.0, (5, 8)).astype(np.float32)
    q = Tensor(layer_norm(Tensor(raw), Tensor(np.ones(8, np.float32)),
                          Tensor(np.zeros(8, np.float32))).data)
    roi = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    np.testing.assert_allclose(qrf(q, roi).data, q.data, atol=1e-5)


def test_qrf_dynamic_transform_packing(rng):
    # a bias-only generator applies one known two-layer net to every region
    reg = ParamRegistry()
    d, dh = 6, 2
    qrf = QRF(reg, "qrf", d, 2, dh)
    w1 = rng.normal(0.0, 0.5, (d, dh))
    b1 = rng.normal(0.0, 0.5, dh)
    w2 = rng.normal(0.0, 0.5, (dh, d))
    b2 = rng.normal(0.0, 0.5, d)
    qrf.generator.bias.data[:] = np.concatenate(
        [w1.ravel(), b1, w2.ravel(), b2]
    ).astype(np.float32)
    q = Tensor(rng.normal(0.0, 1.0, (4, d)).astype(np.float32))
    roi = rng.normal(0.0, 1.0, (4, d)).astype(np.float32)
    out = qrf(q, Tensor(roi))
    fused = np.maximum(roi.astype(np.float64) @ w1 + b1, 0.0) @ w2 + b2
    mixed = q.data.astype(np.float64) + fused  # fresh self-attention is silent
    mu = mixed.mean(axis=1, keepdims=True)
    var = mixed.var(axis=1, keepdims=True)
    expected = (mixed - mu) / np.sqrt(var + 1e-5)
    np.testing.assert_allclose(out.data, expected, atol=1e-4)


def test_qrf_rejects_length_mismatch(rng):
    reg = ParamRegistry()
    qrf = QRF(reg, "qrf", 8, 2, 2)
    q = Tensor(rng.normal(0.0, 1.0, (5, 8)).astype(np.float32))
    roi = Tensor(rng.normal(0.0, 1.0, (4, 8)).astype(np.float32))
    with pytest.raises(ContractError):
        qrf(q, roi)


def test_qrf_grad_check(rng):
    reg = ParamRegistry()
    qrf = QRF(reg, "qrf", 6, 2, 2)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.3, p.shape)
    q = Tensor(rng.normal(0.0, 1.0, (3, 6)), dtype=np.float64)
    roi = Tensor(rng.normal(0.0, 1.0, (3, 6)), dtype=np.float64)
    err = grad_check(lambda a, b: (qrf(a, b) ** 2).sum(), [q, roi])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# full wirings
# ---------------------------------------------------------------------------


def test_transvod_emits_one_stage_with_all_queries(rng):
    model, _ = small_model("transvod", rng)
    stages = model.forward(frame(rng), [frame(rng), frame(rng)], frame_label=5)
    assert len(stages) == 1 and len(stages[0]) == 1
    pred = stages[0][0]
    assert pred.frame == 5
    assert pred.logits.shape == (12, 4)
    assert pred.boxes.shape == (12, 4)
    assert (pred.boxes.data >= 0).all() and (pred.boxes.data <= 1).all()


def test_transvod_rejects_wrong_reference_count(rng):
    model, _ = small_model("transvod", rng)
    with pytest.raises(ContractError):
        model.forward(frame(rng), [frame(rng)])


def test_pp_retained_counts_follow_schedule(rng):
    model, _ = small_model("transvod_pp", rng, k_schedule=(8, 5, 3))
    stages = model.forward(frame(rng), [frame(rng), frame(rng)])
    assert [s[0].logits.shape[0] for s in stages] == [8, 5, 3]
    assert [len(s[0].query_indices) for s in stages] == [8, 5, 3]


def test_pp_zeroed_region_fusion_keeps_shapes(rng):
    model, reg = small_model("transvod_pp", rng, k_schedule=(8, 5, 3))
    cur, refs = frame(rng), [frame(rng), frame(rng)]
    before = [s[0].logits.shape for s in model.forward(cur, refs)]
    model.qrf.generator.weight.data[:] = 0.0
    model.qrf.generator.bias.data[:] = 0.0
    after = [s[0].logits.shape for s in model.forward(cur, refs)]
    assert before == after == [(8, 4), (5, 4), (3, 4)]


def test_lite_stage_totals_follow_schedule(rng):
    model, _ = small_model("lite", rng, window=3, k_schedule=(18, 9, 6))
    frames = [frame(rng) for _ in range(3)]
    stages = model.forward_window(frames)
    totals = [sum(p.logits.shape[0] for p in stage) for stage in stages]
    assert totals == [18, 9, 6]
    labels = {p.frame for p in stages[0]}
    assert labels <= {0, 1, 2}


def test_lite_rejects_wrong_window_length(rng):
    model, _ = small_model("lite", rng, window=3)
    with pytest.raises(ContractError):
        model.forward_window([frame(rng)] * 2)
    with pytest.raises(ContractError):
        model.forward(frame(rng), [frame(rng)])


def test_lite_single_frame_window_runs_per_frame(rng):
    model, _ = small_model("lite", rng, window=1, k_schedule=(8, 6, 4))
    stages = model.forward_window([frame(rng)], labels=[3])
    assert [len(s) for s in stages] == [1, 1, 1]
    assert [s[0].logits.shape[0] for s in stages] == [8, 6, 4]
    assert all(s[0].frame == 3 for s in stages)


def test_lite_output_invariant_to_frame_order(rng):
    model, _ = small_model("lite", rng, window=3, k_schedule=(18, 9, 6))
    frames = [frame(rng) for _ in range(3)]
    fwd = model.forward_window(frames, labels=[0, 1, 2])
    perm = model.forward_window([frames[2], frames[0], frames[1]],
                                labels=[2, 0, 1])
    for stage_a, stage_b in zip(fwd, perm):
        by_label_a = {p.frame: p for p in stage_a}
        by_label_b = {p.frame: p for p in stage_b}
        assert by_label_a.keys() == by_label_b.keys()
        for label, pa in by_label_a.items():
            pb = by_label_b[label]
            np.testing.assert_array_equal(pa.query_indices, pb.query_indices)
            np.testing.assert_allclose(pa.logits.data, pb.logits.data, atol=2e-4)
            np.testing.assert_allclose(pa.boxes.data, pb.boxes.data, atol=2e-4)


def test_frame_identity_breaks_order_invariance(rng):
    model, _ = small_model("lite", rng, window=2, k_schedule=(12, 8, 4),
                           frame_identity=True)
    frames = [frame(rng), frame(rng)]
    fwd = model.forward_window(frames, labels=[0, 1])
    perm = model.forward_window(frames[::-1], labels=[1, 0])
    fwd_by = {p.frame: p for p in fwd[0]}
    perm_by = {p.frame: p for p in perm[0]}

    def differs():
        if set(fwd_by) != set(perm_by):
            return True
        for f, pa in fwd_by.items():
            pb = perm_by[f]
            if not np.array_equal(pa.query_indices, pb.query_indices):
                return True
            if np.abs(pa.logits.data - pb.logits.data).max() > 1e-6:
                return True
        return False

    assert differs()


def test_bypassed_temporal_stack_equals_single_frame_baseline(rng):
    reg = ParamRegistry()
    s_cfg = SpatialConfig(d=16, heads=4, points=2, n_ste=1, n_std=1,
                          n_queries=12, n_classes=4, ffn_dim=32)
    t_cfg = TemporalConfig(variant="transvod", n_ref=2, n_tqe=0, n_tdte=0,
                           n_tdtd=0)
    model = VideoDetector(reg, s_cfg, t_cfg)
    for p in reg.trainable().values():
        p.data[:] = rng.normal(0.0, 0.05, p.shape)
    model.sync_temporal_heads()
    cur = frame(rng)
    stages = model.forward(cur, [frame(rng), frame(rng)])
    base = model.baseline(cur)
    # batched and per-frame execution may differ in summation order only
    np.testing.assert_allclose(stages[0][0].logits.data, base.logits[-1].data,
                               atol=1e-5)
    np.testing.assert_allclose(stages[0][0].boxes.data, base.boxes[-1].data,
                               atol=1e-6)


def test_aux_and_final_heads_are_one_parameter_set(rng):
    model, reg = small_model("transvod_pp", rng, k_schedule=(8, 5, 3))
    head_names = [n for n in reg.named() if n.startswith("temporal.heads.")]
    assert sorted(head_names) == sorted([
        "temporal.heads.cls.weight", "temporal.heads.cls.bias",
        "temporal.heads.box.fc1.weight", "temporal.heads.box.fc1.bias",
        "temporal.heads.box.fc2.weight", "temporal.heads.box.fc2.bias",
        "temporal.heads.box.fc3.weight", "temporal.heads.box.fc3.bias",
    ])


def test_head_sync_copies_spatial_heads(rng):
    model, _ = small_model("transvod", rng)
    model.sync_temporal_heads()
    src, dst = model.spatial.heads, model.heads
    np.testing.assert_array_equal(src.cls.weight.data, dst.cls.weight.data)
    np.testing.assert_array_equal(src.box.fc3.bias.data, dst.box.fc3.bias.data)
    assert src.cls.weight is not dst.cls.weight


def test_forward_is_deterministic(rng):
    model, _ = small_model("transvod_pp", rng, k_schedule=(8, 5, 3))
    cur, refs = frame(rng), [frame(rng), frame(rng)]
    a = model.forward(cur, refs)
    b = model.forward(cur, refs)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa[0].logits.data, sb[0].logits.data)
        np.testing.assert_array_equal(sa[0].boxes.data, sb[0].boxes.data)


@pytest.mark.parametrize("variant", ["transvod", "transvod_pp"])
def test_loss_gradient_reaches_temporal_parameters(variant, rng):
    model, reg = small_model(variant, rng,
                             k_schedule=None if variant == "transvod" else (8, 5, 3))
    stages = model.forward(frame(rng), [frame(rng), frame(rng)])
    loss = sum(
        (p.logits ** 2).sum() + (p.boxes ** 2).sum()
        for stage in stages for p in stage
    )
    loss.backward()
    missing = [
        name for name, p in reg.named().items()
        if name.startswith("temporal.")
        and (p.grad is None or not np.abs(p.grad).max() > 0)
    ]
    assert not missing, f"no gradient reached {missing}"


def test_lite_gradient_reaches_temporal_parameters(rng):
    model, reg = small_model("lite", rng, window=2, k_schedule=(12, 8, 4))
    stages = model.forward_window([frame(rng), frame(rng)])
    loss = sum(
        (p.logits ** 2).sum() + (p.boxes ** 2).sum()
        for stage in stages for p in stage
    )
    loss.backward()
    missing = [
        name for name, p in reg.named().items()
        if name.startswith("temporal.")
        and (p.grad is None or not np.abs(p.grad).max() > 0)
    ]
    assert not missing, f"no gradient reached {missing}"
