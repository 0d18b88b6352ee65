import math

import numpy as np
import pytest

from edgepipe.attention import FUSED, PER_HEAD, ExecutionPlan, LaneRunner, LocalRunner, Segment
from edgepipe.config import TrainSettings
from edgepipe.errors import InvalidConfig, ShapeMismatch
from edgepipe.lanes import LaneSet, SimulatedLane
from edgepipe.model import (
    Batch,
    EncoderConfig,
    SyntheticTask,
    build_model,
    closed_form_param_count,
    evaluate,
    forward_loss,
    load_checkpoint,
    per_sample_losses,
    save_checkpoint,
    stage_groups,
    train_sequential,
)

LR = TrainSettings().lr


def count_by_hand(L, K, d, f, vocab, n, C):
    dh = d // K
    attn = K * 3 * d * dh
    ln = 2 * (2 * d)
    ffn = d * f + f + f * d + d
    return vocab * d + n * d + L * (attn + ln + ffn) + d * C + C


def test_default_param_count():
    cfg = EncoderConfig()
    model = build_model(cfg)
    expected = count_by_hand(6, 12, 48, 96, 64, 16, 4)
    assert expected == 102820
    assert model.param_count == expected == closed_form_param_count(cfg)


@pytest.mark.parametrize("dims", [(1, 1, 8, 8), (2, 4, 16, 32), (3, 2, 6, 5)])
def test_param_count_other_dims(dims):
    L, K, d, f = dims
    cfg = EncoderConfig(layers=L, heads=K, d_model=d, d_ff=f, vocab=10, seq_len=5, classes=3)
    assert build_model(cfg).param_count == count_by_hand(L, K, d, f, 10, 5, 3)


def test_minimal_model_trains():
    cfg = EncoderConfig(layers=1, heads=1, d_model=8, d_ff=8, vocab=8, seq_len=4, classes=2, seed=1)
    model = build_model(cfg)
    task = SyntheticTask(cfg, size=64, seed=1)
    losses = train_sequential(model, task.stream(8), steps=5, lr=0.05)
    assert len(losses) == 5 and all(np.isfinite(losses))


def test_same_seed_bit_identical():
    a, b = build_model(EncoderConfig(seed=5)), build_model(EncoderConfig(seed=5))
    for name in a.params:
        assert a.params[name].value.data.tobytes() == b.params[name].value.data.tobytes()
    c = build_model(EncoderConfig(seed=6))
    assert not np.array_equal(a.params["layer0.head0.wq"].value.data, c.params["layer0.head0.wq"].value.data)


def test_init_bounds():
    cfg = EncoderConfig()
    model = build_model(cfg)
    bound = 1 / math.sqrt(cfg.d_model)
    for name, p in model.params.items():
        data = p.value.data
        if name.endswith(".gain"):
            assert np.all(data == 1)
        elif data.ndim == 1:
            assert np.all(data == 0)
        else:
            assert np.abs(data).max() <= bound
            assert np.abs(data).max() > 0.5 * (bound if name != "cls.w" else 1 / cfg.d_model)


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        EncoderConfig(heads=5)
    with pytest.raises(InvalidConfig):
        EncoderConfig(layers=0)
    with pytest.raises(InvalidConfig):
        EncoderConfig.from_dict({"layers": 2, "depth": 3})


def test_untrained_loss_near_uniform():
    cfg = EncoderConfig()
    task = SyntheticTask(cfg, size=256)
    loss, _ = forward_loss(build_model(cfg), next(task.batches(64)))
    assert abs(loss.item() - math.log(cfg.classes)) <= 0.2


def test_identical_samples_identical_losses(small_cfg):
    task = SyntheticTask(small_cfg, size=32)
    batch = Batch(np.repeat(task.ids[:1], 5, axis=0), np.repeat(task.labels[:1], 5))
    losses = per_sample_losses(build_model(small_cfg), batch)
    assert np.all(losses == losses[0])
    loss, _ = forward_loss(build_model(small_cfg), batch)
    assert loss.item() == pytest.approx(losses[0], rel=1e-6)


def test_shape_mismatch(small_cfg):
    model = build_model(small_cfg)
    with pytest.raises(ShapeMismatch):
        forward_loss(model, Batch(np.zeros((2, small_cfg.seq_len + 1), dtype=np.int64), np.zeros(2, dtype=np.int64)))


def test_stage_groups():
    cfg = EncoderConfig()
    assert stage_groups(cfg, 0, 2, True, False) == [0, 1, 2]
    assert stage_groups(cfg, 4, 6, False, True) == [5, 6, 7]


def test_checkpoint_round_trip(tmp_path, small_cfg):
    model = build_model(small_cfg)
    task = SyntheticTask(small_cfg, size=32)
    train_sequential(model, task.stream(8), steps=2, lr=0.1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.cfg == model.cfg
    for name, p in model.params.items():
        assert np.array_equal(back.params[name].value.data, p.value.data)
        assert back.params[name].version == p.version == 2
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(InvalidConfig):
        load_checkpoint(tmp_path / "junk")


# -- synthetic task ----------------------------------------------------------


def test_task_deterministic_and_balanced():
    cfg = EncoderConfig()
    a, b = SyntheticTask(cfg, size=1000, seed=4), SyntheticTask(cfg, size=1000, seed=4)
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=cfg.classes)
    assert counts.max() - counts.min() <= 0.05 * counts.mean()
    assert not np.array_equal(a.ids, SyntheticTask(cfg, size=1000, seed=5).ids)


def test_labels_are_majority_bucket():
    cfg = EncoderConfig()
    task = SyntheticTask(cfg, size=300, seed=2)
    bucket = cfg.vocab // cfg.classes
    for seq, y in zip(task.ids, task.labels):
        counts = [int(np.sum((seq >= c * bucket) & (seq < (c + 1) * bucket))) for c in range(cfg.classes)]
        assert counts[y] == max(counts) and counts.count(max(counts)) == 1
        assert task.majority_label(seq) == y


def test_epochs_reshuffle_but_cover_data():
    cfg = EncoderConfig()
    task = SyntheticTask(cfg, size=64)
    e0 = np.concatenate([b.labels for b in task.batches(16, 0)])
    e1 = np.concatenate([b.labels for b in task.batches(16, 1)])
    assert sorted(e0) == sorted(e1) == sorted(task.labels)
    assert task.batches_per_epoch(16) == 4


# -- training ----------------------------------------------------------------


def test_strategies_give_identical_trajectories():
    cfg = EncoderConfig()
    task = SyntheticTask(cfg, size=4096)
    lanes = LaneSet([SimulatedLane(0), SimulatedLane(1), SimulatedLane(2)])
    runners = {
        "fused": LocalRunner(FUSED),
        "per_head": LocalRunner(PER_HEAD),
        "split": LaneRunner(ExecutionPlan([Segment(0, 0, 5, FUSED), Segment(1, 5, 9, PER_HEAD), Segment(2, 9, 12, FUSED)]), lanes),
    }
    curves = {}
    with lanes:
        for name, runner in runners.items():
            curves[name] = train_sequential(build_model(cfg), task.stream(16), steps=51, lr=LR, runner=runner)
    for name in ("per_head", "split"):
        assert abs(curves[name][50] - curves["fused"][50]) <= 1e-5, name


@pytest.mark.slow
def test_task_is_learnable_in_500_steps():
    cfg = EncoderConfig()
    task = SyntheticTask(cfg, size=4096)
    model = build_model(cfg)
    train_sequential(model, task.stream(16), steps=500, lr=LR)
    holdout = list(task.batches(64, epoch=10**6))[:8]
    _, acc = evaluate(model, holdout)
    assert acc >= 0.8
