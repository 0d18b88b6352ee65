import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgepipe import tensor as T
from edgepipe.attention import (
    FUSED,
    PER_HEAD,
    AttentionLayer,
    ExecutionPlan,
    HeadWeights,
    Segment,
    compute_heads,
    fused_forward,
    head_forward,
    per_head_forward,
    run_plan,
    split_forward,
)
from edgepipe.errors import InvalidPlan, ShapeMismatch, UnknownLane
from edgepipe.lanes import LaneSet, ModeCost, SimulatedLane, random_layer
from edgepipe.tensor import Tensor

from oracles import head_reference


def sim_lanes(n, costs=None):
    return LaneSet([SimulatedLane(i, f"sim{i}", costs) for i in range(n)])


def x_for(layer, n=5, batch=None, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    shape = (n, layer.d_model) if batch is None else (batch, n, layer.d_model)
    return Tensor(rng.standard_normal(shape).astype(dtype))


# -- head_forward ------------------------------------------------------------


def test_single_token_output_is_value_projection():
    layer = random_layer(1, 4, seed=1, dtype=np.float64)
    x = x_for(layer, n=1, dtype=np.float64)
    h = layer.heads[0]
    np.testing.assert_allclose(head_forward(h, x).data, x.data @ h.wv.data, atol=1e-12)


def test_zero_query_key_gives_mean_of_values():
    layer = random_layer(1, 4, seed=2, dtype=np.float64)
    h = layer.heads[0]
    zero = Tensor(np.zeros_like(h.wq.data))
    h0 = HeadWeights(zero, zero, h.wv, 0)
    x = x_for(layer, n=6, dtype=np.float64)
    v = x.data @ h.wv.data
    np.testing.assert_allclose(head_forward(h0, x).data, np.tile(v.mean(axis=0), (6, 1)), atol=1e-12)


def test_head_matches_elementwise_reference():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 4))
    wq, wk, wv = (rng.standard_normal((4, 2)) for _ in range(3))
    h = HeadWeights(Tensor(wq), Tensor(wk), Tensor(wv), 0)
    np.testing.assert_allclose(head_forward(h, Tensor(x)).data, head_reference(x, wq, wk, wv), atol=1e-12)
    h_flag = head_forward(h, Tensor(x), scaled=False).data
    np.testing.assert_allclose(h_flag, head_reference(x, wq, wk, wv, scaled=False), atol=1e-12)


def test_head_shape_mismatch():
    layer = random_layer(2, 4)
    with pytest.raises(ShapeMismatch):
        head_forward(layer.heads[0], Tensor(np.ones((3, 5), dtype=np.float32)))


def test_layer_invariants():
    layer = random_layer(2, 4)
    with pytest.raises(ShapeMismatch):
        AttentionLayer(layer.heads, d_model=9, d_head=4)
    with pytest.raises(ShapeMismatch):
        AttentionLayer(layer.heads[::-1], d_model=8, d_head=4)
    with pytest.raises(ShapeMismatch):
        HeadWeights(layer.heads[0].wq, layer.heads[0].wk, Tensor(np.ones((8, 3))), 0)


# -- fused / per-head --------------------------------------------------------


def test_fused_single_head_is_head_forward():
    layer = random_layer(1, 6, seed=4)
    x = x_for(layer, n=7)
    np.testing.assert_allclose(fused_forward(layer, x).data, head_forward(layer.heads[0], x).data, atol=1e-6)


def test_fused_two_heads_is_concat():
    layer = random_layer(2, 4, seed=5, dtype=np.float64)
    x = x_for(layer, dtype=np.float64)
    expected = np.concatenate([head_forward(h, x).data for h in layer.heads], axis=-1)
    np.testing.assert_allclose(fused_forward(layer, x).data, expected, atol=1e-12)
    np.testing.assert_allclose(per_head_forward(layer, x).data, expected, atol=1e-12)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
@pytest.mark.parametrize("batch", [None, 3])
def test_fused_equals_per_head_k12(dtype, tol, batch):
    layer = random_layer(12, 4, seed=6, dtype=dtype)
    x = x_for(layer, n=16, batch=batch, dtype=dtype)
    diff = np.abs(fused_forward(layer, x).data - per_head_forward(layer, x).data).max()
    assert diff <= tol


def test_fused_equals_per_head_on_reference():
    rng = np.random.default_rng(7)
    layer = random_layer(3, 2, seed=7, dtype=np.float64)
    x = rng.standard_normal((4, 6))
    ref = np.concatenate([head_reference(x, h.wq.data, h.wk.data, h.wv.data) for h in layer.heads], axis=-1)
    np.testing.assert_allclose(per_head_forward(layer, Tensor(x)).data, ref, atol=1e-12)
    np.testing.assert_allclose(fused_forward(layer, Tensor(x)).data, ref, atol=1e-12)


def test_gradient_parity_fused_vs_per_head():
    layer32 = random_layer(12, 4, seed=8)
    x = x_for(layer32, n=8, batch=2)
    w = np.random.default_rng(9).standard_normal((2, 8, 48)).astype(np.float32)

    def grads(mode):
        leaves = [Tensor(t.data, requires_grad=True) for t in layer32.weights()]
        heads = [HeadWeights(*leaves[3 * i : 3 * i + 3], i) for i in range(12)]
        layer = AttentionLayer(heads, 48, 4)
        xin = Tensor(x.data, requires_grad=True)
        out = compute_heads(layer, xin, 0, 12, mode)
        T.backward(T.sum(T.mul(out, Tensor(w))))
        return [l.grad for l in leaves] + [xin.grad]

    for a, b in zip(grads(FUSED), grads(PER_HEAD)):
        assert np.abs(a - b).max() <= 1e-5


def test_unscaled_variant_differs():
    layer = random_layer(2, 4, seed=10, dtype=np.float64)
    x = x_for(layer, dtype=np.float64)
    unscaled = AttentionLayer(layer.heads, 8, 4, scaled=False)
    assert not np.allclose(fused_forward(layer, x).data, fused_forward(unscaled, x).data)
    np.testing.assert_allclose(fused_forward(unscaled, x).data, per_head_forward(unscaled, x).data, atol=1e-12)


# -- plans and split_forward -------------------------------------------------


def test_plan_validation():
    ExecutionPlan([Segment(0, 0, 5), Segment(1, 5, 12)]).validate(12)
    bad = [
        [Segment(0, 0, 5), Segment(1, 6, 12)],  # gap
        [Segment(0, 0, 6), Segment(1, 5, 12)],  # overlap
        [Segment(0, 0, 11)],  # short
        [Segment(0, 0, 6), Segment(0, 6, 12)],  # lane twice
        [Segment(0, 0, 12, "sideways")],
        [Segment(0, 3, 3), Segment(1, 0, 12)],  # empty range
    ]
    for segs in bad:
        with pytest.raises(InvalidPlan):
            ExecutionPlan(segs).validate(12)


def test_plan_json_round_trip():
    plan = ExecutionPlan.from_counts([(2, 5, FUSED), (0, 0, FUSED), (1, 7, PER_HEAD)])
    assert plan.segments == [Segment(2, 0, 5, FUSED), Segment(1, 5, 12, PER_HEAD)]
    assert ExecutionPlan.from_json(plan.to_json()) == plan


@pytest.mark.parametrize("mode", [FUSED, PER_HEAD])
def test_single_segment_plan_matches_its_mode(mode):
    layer = random_layer(12, 4, seed=11)
    x = x_for(layer, n=9)
    with sim_lanes(1) as lanes:
        out = split_forward(layer, x, ExecutionPlan.single(12, 0, mode), lanes)
    assert np.array_equal(out.data, compute_heads(layer, x, 0, 12, mode).data)


def test_split_7_5_equals_fused():
    layer = random_layer(12, 4, seed=12)
    x = x_for(layer, n=16, batch=2)
    plan = ExecutionPlan([Segment(0, 0, 7, FUSED), Segment(1, 7, 12, PER_HEAD)])
    with sim_lanes(2) as lanes:
        out = split_forward(layer, x, plan, lanes)
    assert np.abs(out.data - fused_forward(layer, x).data).max() <= 1e-6


def test_split_4_4_4_faster_than_any_single_lane():
    layer = random_layer(12, 4, seed=13)
    x = x_for(layer, n=16)
    cost = {FUSED: ModeCost(2.0, 1.0)}
    plan = ExecutionPlan([Segment(0, 0, 4), Segment(1, 4, 8), Segment(2, 8, 12)])
    with sim_lanes(3, cost) as lanes:
        out, ms = run_plan(layer, x, plan, lanes)
        single = min(lanes[j].cost(12, FUSED) for j in lanes.ids)
    assert np.abs(out.data - fused_forward(layer, x).data).max() <= 1e-6
    assert ms == pytest.approx(6.0)
    assert ms < single


def test_unknown_lane_and_invalid_plan():
    layer = random_layer(4, 2)
    x = x_for(layer, n=3)
    with sim_lanes(1) as lanes:
        with pytest.raises(UnknownLane):
            split_forward(layer, x, ExecutionPlan([Segment(0, 0, 2), Segment(5, 2, 4)]), lanes)
        with pytest.raises(InvalidPlan):
            split_forward(layer, x, ExecutionPlan([Segment(0, 0, 3)]), lanes)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_segment_order_does_not_change_output(data):
    K = 12
    cuts = sorted(data.draw(st.sets(st.integers(1, K - 1), max_size=3)))
    bounds = [0] + cuts + [K]
    modes = data.draw(st.lists(st.sampled_from([FUSED, PER_HEAD]), min_size=len(bounds) - 1, max_size=len(bounds) - 1))
    segs = [Segment(i, lo, hi, m) for i, (lo, hi, m) in enumerate(zip(bounds, bounds[1:], modes))]
    shuffled = data.draw(st.permutations(segs))
    layer = random_layer(K, 4, seed=data.draw(st.integers(0, 1000)))
    x = x_for(layer, n=5)
    with sim_lanes(len(segs)) as lanes:
        a = split_forward(layer, x, ExecutionPlan(segs), lanes)
        b = split_forward(layer, x, ExecutionPlan(list(shuffled)), lanes)
    assert np.array_equal(a.data, b.data)
    assert np.abs(a.data - per_head_forward(layer, x).data).max() <= 1e-6


def test_split_gradients_flow_through_lanes():
    layer = random_layer(4, 2, seed=14, dtype=np.float64)
    leaves = [Tensor(t.data, requires_grad=True) for t in layer.weights()]
    split_layer = AttentionLayer([HeadWeights(*leaves[3 * i : 3 * i + 3], i) for i in range(4)], 8, 2)
    x = x_for(layer, n=4, dtype=np.float64)
    plan = ExecutionPlan([Segment(0, 0, 1), Segment(1, 1, 4, PER_HEAD)])
    with sim_lanes(2) as lanes:
        T.backward(T.sum(T.mul(split_forward(split_layer, x, plan, lanes), split_forward(split_layer, x, plan, lanes))))
    ref_leaves = [Tensor(t.data, requires_grad=True) for t in layer.weights()]
    ref_layer = AttentionLayer([HeadWeights(*ref_leaves[3 * i : 3 * i + 3], i) for i in range(4)], 8, 2)
    out = fused_forward(ref_layer, x)
    T.backward(T.sum(T.mul(out, out)))
    for a, b in zip(leaves, ref_leaves):
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-10)
