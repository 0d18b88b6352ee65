import pytest

from edgepipe.attention import FUSED, PER_HEAD, ExecutionPlan, LaneRunner, LocalRunner, Segment
from edgepipe.config import TrainSettings
from edgepipe.lanes import LaneSet, SimulatedLane
from edgepipe.memory import account_memory, single_device_memory, stage_param_elems
from edgepipe.model import EncoderConfig, SyntheticTask, build_model
from edgepipe.partition import specs_from_sizes

from pipeline_util import run_pipeline

LR = TrainSettings().lr


def test_single_stage_equals_single_device():
    cfg = EncoderConfig()
    (spec,) = specs_from_sizes([cfg.layers])
    a = account_memory(spec, cfg, 16, S=1)
    assert a == single_device_memory(cfg, 16)
    assert a.stash_depth == 1 and a.in_flight == 1
    assert a.params == build_model(cfg).param_count * 4
    assert a.total == a.params * 3 + a.activations


def test_equal_split_param_bytes():
    cfg = EncoderConfig()
    total = build_model(cfg).param_count
    block = stage_param_elems(cfg, specs_from_sizes([1, 5])[1]) - stage_param_elems(cfg, specs_from_sizes([1, 4, 1])[1])
    specs = specs_from_sizes([2, 2, 2])
    per_stage = [stage_param_elems(cfg, s) for s in specs]
    assert sum(per_stage) == total
    for p in per_stage:
        assert abs(p - total / 3) <= block


def test_in_flight_activation_sets():
    cfg = EncoderConfig()
    specs = specs_from_sizes([2, 2, 2])
    m0, m2 = account_memory(specs[0], cfg, 16), account_memory(specs[2], cfg, 16)
    assert (m0.in_flight, m2.in_flight) == (3, 1)
    assert m0.activations == 3 * m0.activation_per_batch
    assert m2.activations == m2.activation_per_batch
    assert m0.stash == 3 * m0.params and m2.stash == m2.params


def test_json_has_breakdown():
    doc = single_device_memory(EncoderConfig(), 8).to_json()
    assert doc["total"] == doc["params"] + doc["stash"] + doc["activations"] + doc["scratch"]


def _tracked_vs_analytic(cfg, sizes, runner, batch=8, n=8):
    batches = list(SyntheticTask(cfg, size=batch * n, seed=1).batches(batch))
    _, stages = run_pipeline(cfg, sizes, batches, LR, runner=runner)
    segments = runner.segments(cfg.heads)
    return [(st.tracker.peak, account_memory(st.spec, cfg, batch, segments=segments).total) for st in stages]


@pytest.mark.parametrize("sizes", [[6], [2, 2, 2], [3, 1, 2], [1, 1, 1, 1, 1, 1]])
def test_tracked_peak_matches_analytic_fused(sizes):
    for tracked, analytic in _tracked_vs_analytic(EncoderConfig(), sizes, LocalRunner(FUSED)):
        assert abs(tracked - analytic) <= 0.05 * analytic


@pytest.mark.parametrize("mode", [FUSED, PER_HEAD])
def test_tracked_peak_matches_analytic_split(mode):
    cfg = EncoderConfig(layers=3)
    plan = ExecutionPlan([Segment(0, 0, 7, mode), Segment(1, 7, 12, PER_HEAD)])
    with LaneSet([SimulatedLane(0), SimulatedLane(1)]) as lanes:
        pairs = _tracked_vs_analytic(cfg, [1, 1, 1], LaneRunner(plan, lanes))
    for tracked, analytic in pairs:
        assert abs(tracked - analytic) <= 0.05 * analytic


def test_float64_doubles_everything():
    a = single_device_memory(EncoderConfig(), 4)
    b = single_device_memory(EncoderConfig(dtype="float64"), 4)
    assert b.total == 2 * a.total


def test_three_way_split_beats_single_device():
    cfg = EncoderConfig()
    single = single_device_memory(cfg, 16).total
    worst = max(account_memory(s, cfg, 16).total for s in specs_from_sizes([2, 2, 2]))
    assert worst < single
