"""
Training sessions: device setup, capacity calibration and the stage protocol.

Stage 0 is the central node. It holds the full model and the data loader.
Every round of ``epoch_batches`` batches goes like this:

1. central sends START down the chain; capacities are gathered back up
   (the last stage starts the list, each stage prepends its own);
2. central partitions the blocks and sends PARTITION down the chain;
3. central sends one WEIGHTS message per parameter group (batch_id = group
   index, version = parameter version); each stage keeps its own groups and
   forwards the rest;
4. every stage runs its 1F1B schedule;
5. each stage sends its updated groups and an EPOCH_DONE report upstream,
   then relays whatever arrives from further down.

STOP ends the session. The same code runs over loopback links in threads
("all-in-one") or over TCP between processes.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .attention import ExecutionPlan, LaneRunner
from .config import RunConfig
from .errors import InvalidConfig, ProtocolError
from .lanes import LaneSet, LayerDims, ProfileTable, discover_lanes, profile
from .memory import account_memory
from .model import (
    Encoder,
    EncoderConfig,
    SyntheticTask,
    build_model,
    encoder_block,
    group_shapes,
    stage_groups,
)
from .partition import CapacityEstimate, StageSpec, partition, partition_record, specs_from_sizes
from .pipeline import BACKWARD, Stage, StageCost, TraceEvent
from .scheduler import AllocationPlan, allocate
from .tensor import Parameter, Tensor
from .transport import Control, Link, Listener, MsgType, PipeMessage, connect, control_doc, control_message, loopback_pair

logger = logging.getLogger(__name__)

# arm -> (pipelined across devices, attention split across lanes)
ARM_LAYOUT = {
    "single": (False, False),
    "single-mbs": (False, True),
    "pipeline": (True, False),
    "confidant": (True, True),
}


def arm_layout(arm: str) -> tuple[bool, bool]:
    try:
        return ARM_LAYOUT[arm]
    except KeyError:
        raise InvalidConfig(f"unknown arm {arm!r}") from None


def num_stages(run: RunConfig) -> int:
    return len(run.devices) if arm_layout(run.arm)[0] else 1


# ---------------------------------------------------------------------------
# Devices
# ---------------------------------------------------------------------------


@dataclass
class DeviceRuntime:
    name: str
    lanes: LaneSet
    table: ProfileTable
    plan: AllocationPlan
    execution: ExecutionPlan
    runner: LaneRunner

    def close(self) -> None:
        self.lanes.close()

    def summary(self) -> dict:
        return {
            "name": self.name,
            "plan": self.plan.to_json(),
            "segments": self.execution.to_json()["segments"],
            "attention_ms": self.plan.makespan_ms,
        }


def fastest_lane_plan(table: ProfileTable, K: int) -> AllocationPlan:
    """All K heads on the lane with the smallest T[j][K] (lowest id on ties)."""
    best = min(table.lane_ids, key=lambda j: (table.T(j, K), j))
    return AllocationPlan([(j, K if j == best else 0) for j in table.lane_ids], table.T(best, K))


def prepare_device(run: RunConfig, index: int) -> DeviceRuntime:
    """Discover, profile and plan the lanes of device ``index`` for the configured arm."""
    dev = run.devices[index]
    cfg = run.model
    K = cfg.heads
    lanes = discover_lanes(dev.lanes)
    try:
        dims = LayerDims(cfg.d_head, cfg.seq_len, run.train.batch_size)
        table = profile(lanes, K, dims, run.profile.repetitions, run.profile.warmup, seed=run.seed)
        if arm_layout(run.arm)[1]:
            eps = run.scheduler.epsilon_ms
            if eps is None:
                eps = run.scheduler.epsilon_frac * min(table.T(j, K) for j in table.lane_ids)
            plan = allocate(table, K, epsilon=eps, sigma=run.scheduler.sigma_ms)
        else:
            plan = fastest_lane_plan(table, K)
        execution = plan.execution_plan(table)
    except Exception:
        lanes.close()
        raise
    runner = LaneRunner(execution, lanes.subset(s.lane_id for s in execution.segments))
    logger.info("device %s: plan %s (makespan %.3f ms)", dev.name, plan.entries, plan.makespan_ms)
    return DeviceRuntime(dev.name, lanes, table, plan, execution, runner)


def estimate_capacity(runner, cfg: EncoderConfig, cost: StageCost, seed: int = 0, batch: int = 1) -> CapacityEstimate:
    """Blocks per second from one calibration block run through ``runner``.

    Forward time is the reported attention time plus the fixed per-block
    cost; a forward+backward step costs (1 + backward_factor) times that.
    """
    one = EncoderConfig(**{**cfg.to_dict(), "layers": 1, "seed": seed})
    w = build_model(one).leaves()
    x = Tensor(np.random.default_rng(seed).standard_normal((batch, cfg.seq_len, cfg.d_model)).astype(cfg.np_dtype))
    t0 = time.perf_counter()
    _, attn_ms = encoder_block(one, w, 0, x, runner)
    wall_ms = (time.perf_counter() - t0) * 1000
    fwd = attn_ms + cost.other_ms_per_block
    if fwd <= 0:
        fwd = wall_ms
    return CapacityEstimate(1000.0 / ((1 + cost.backward_factor) * fwd))


# ---------------------------------------------------------------------------
# Protocol helpers
# ---------------------------------------------------------------------------


def _groups_of(cfg: EncoderConfig, spec: StageSpec) -> list[int]:
    return stage_groups(cfg, spec.lo, spec.hi, spec.is_first, spec.is_last)


def _weights_message(cfg: EncoderConfig, group: int, params: dict[str, Parameter]) -> PipeMessage:
    names = [n for n, _ in group_shapes(cfg, group)]
    version = params[names[0]].version
    return PipeMessage(MsgType.WEIGHTS, group, version, [params[n].value.data for n in names])


def _unpack_weights(cfg: EncoderConfig, msg: PipeMessage) -> dict[str, Parameter]:
    names = [n for n, _ in group_shapes(cfg, msg.batch_id)]
    if len(names) != len(msg.tensors):
        raise ProtocolError(f"group {msg.batch_id}: expected {len(names)} tensors, got {len(msg.tensors)}")
    return {
        n: Parameter(n, Tensor(np.array(a, dtype=cfg.np_dtype)), msg.version) for n, a in zip(names, msg.tensors)
    }


def _expect(link: Link, kind: MsgType, code: Optional[Control] = None, timeout: Optional[float] = None) -> PipeMessage:
    msg = link.recv(timeout=timeout)
    if msg.msg_type != kind or (code is not None and msg.batch_id != code):
        got = msg.msg_type.name if msg.msg_type != MsgType.CONTROL else f"CONTROL/{Control(msg.batch_id).name}"
        want = kind.name if code is None else f"CONTROL/{code.name}"
        raise ProtocolError(f"expected {want}, got {got}")
    return msg


def _stage_report(stage: Stage, device: DeviceRuntime, batch_size: int) -> dict:
    segments = device.runner.segments(stage.cfg.heads)
    analytic = account_memory(stage.spec, stage.cfg, batch_size, segments=segments)
    return {
        "stage": stage.spec.stage_index,
        "events": [e.to_json() for e in stage.result.events],
        "clock": stage.clock,
        "peak_bytes": stage.tracker.peak,
        "analytic": analytic.to_json(),
        "range": [stage.spec.lo, stage.spec.hi],
        "version": stage.version,
        "device": device.name,
        "attention_ms": device.plan.makespan_ms,
    }


# ---------------------------------------------------------------------------
# Worker side (stages 1..S-1)
# ---------------------------------------------------------------------------


class StageWorker:
    """Follows the central node's control messages for one non-central stage."""

    def __init__(self, index: int, run: RunConfig, device: DeviceRuntime, up: Link, down: Optional[Link], timeout=120.0):
        self.index = index
        self.run_cfg = run
        self.device = device
        self.up = up
        self.down = down
        self.timeout = timeout
        self.capacity: Optional[CapacityEstimate] = None

    def serve(self) -> None:
        cfg = self.run_cfg.model
        while True:
            msg = _expect(self.up, MsgType.CONTROL, timeout=self.timeout)
            code = Control(msg.batch_id)
            if code == Control.STOP:
                if self.down is not None:
                    self.down.send(msg)
                return
            if code == Control.START:
                self._gather_capacity(msg)
            elif code == Control.PARTITION:
                self._run_round(control_doc(msg), msg, cfg)
            else:
                raise ProtocolError(f"stage {self.index}: unexpected control {code.name}")

    def _gather_capacity(self, start: PipeMessage) -> None:
        if self.down is not None:
            self.down.send(start)
        self.capacity = estimate_capacity(
            self.device.runner, self.run_cfg.model, self.run_cfg.cost, self.run_cfg.seed, self.run_cfg.train.batch_size
        )
        caps = [self.capacity.blocks_per_s]
        if self.down is not None:
            caps += control_doc(_expect(self.down, MsgType.CONTROL, Control.CAPACITY, self.timeout))["capacities"]
        self.up.send(control_message(Control.CAPACITY, {"capacities": caps}))

    def _run_round(self, doc: dict, msg: PipeMessage, cfg: EncoderConfig) -> None:
        if self.down is not None:
            self.down.send(msg)
        specs = specs_from_sizes(doc["sizes"])
        spec = specs[self.index]
        mine = set(_groups_of(cfg, spec))
        incoming = sum(len(_groups_of(cfg, s)) for s in specs[self.index :])
        params: dict[str, Parameter] = {}
        for _ in range(incoming):
            w = _expect(self.up, MsgType.WEIGHTS, timeout=self.timeout)
            if w.batch_id in mine:
                params.update(_unpack_weights(cfg, w))
            else:
                self.down.send(w)

        stage = Stage(
            spec,
            cfg,
            params,
            self.device.runner,
            self.run_cfg.train.lr,
            self.run_cfg.cost,
            up=self.up,
            down=self.down,
            clock=doc["clock"],
            epoch=doc["epoch"],
            recv_timeout=self.timeout,
        )
        stage.run(doc["batches"])

        for g in sorted(mine):
            self.up.send(_weights_message(cfg, g, stage.params))
        report = _stage_report(stage, self.device, self.run_cfg.train.batch_size)
        self.up.send(control_message(Control.EPOCH_DONE, report))
        # relay everything from further down the chain
        later = specs[self.index + 1 :]
        for _ in range(sum(len(_groups_of(cfg, s)) for s in later) + len(later)):
            self.up.send(self.down.recv(timeout=self.timeout))


# ---------------------------------------------------------------------------
# Central side (stage 0)
# ---------------------------------------------------------------------------


@dataclass
class RoundReport:
    epoch: int
    capacities: list[float]
    partition: dict
    stages: list[dict]


@dataclass
class TrainingResult:
    model: Encoder
    num_stages: int
    rounds: list[RoundReport] = field(default_factory=list)
    devices: list[dict] = field(default_factory=list)

    @property
    def events(self) -> list[TraceEvent]:
        return [TraceEvent.from_json(e) for r in self.rounds for s in r.stages for e in s["events"]]

    def losses(self) -> list[float]:
        """Per-step training loss in step order (read off the last stage's backward events)."""
        out = []
        last = self.num_stages - 1
        for r in self.rounds:
            evs = sorted((e for e in r.stages[last]["events"] if e["phase"] == BACKWARD), key=lambda e: e["batch"])
            out += [e["loss"] for e in evs]
        return out

    def accuracies(self) -> list[float]:
        out = []
        last = self.num_stages - 1
        for r in self.rounds:
            evs = sorted((e for e in r.stages[last]["events"] if e["phase"] == BACKWARD), key=lambda e: e["batch"])
            out += [e["accuracy"] for e in evs]
        return out


class Coordinator:
    """Stage 0: owns the model, the data and the partitioning decision."""

    def __init__(self, run: RunConfig, device: DeviceRuntime, down: Optional[Link], S: int, timeout=120.0):
        self.run_cfg = run
        self.device = device
        self.down = down
        self.S = S
        self.timeout = timeout
        cfg = run.model
        self.model = build_model(cfg)
        self.task = SyntheticTask(cfg, size=run.train.dataset_size, seed=run.seed)
        self.batches = self.task.stream(run.train.batch_size)
        self.clock = 0.0

    def capacities(self, epoch: int) -> list[float]:
        run = self.run_cfg
        own = estimate_capacity(self.device.runner, run.model, run.cost, run.seed, run.train.batch_size)
        caps = [own.blocks_per_s]
        if self.down is not None:
            self.down.send(control_message(Control.START, {"epoch": epoch}))
            caps += control_doc(_expect(self.down, MsgType.CONTROL, Control.CAPACITY, self.timeout))["capacities"]
        return caps

    def round(self, epoch: int, n_batches: int) -> RoundReport:
        cfg = self.run_cfg.model
        caps = self.capacities(epoch)
        specs = partition(cfg.layers, caps)
        record = partition_record(caps, specs)
        logger.info("epoch %d partition %s", epoch, record)
        sizes = [s.blocks for s in specs]
        doc = {"sizes": sizes, "epoch": epoch, "batches": n_batches, "clock": self.clock}
        if self.down is not None:
            self.down.send(control_message(Control.PARTITION, doc))
            for s in specs[1:]:
                for g in _groups_of(cfg, s):
                    self.down.send(_weights_message(cfg, g, self.model.params))

        stage = Stage(
            specs[0],
            cfg,
            self.model.params,
            self.device.runner,
            self.run_cfg.train.lr,
            self.run_cfg.cost,
            down=self.down,
            clock=self.clock,
            epoch=epoch,
            recv_timeout=self.timeout,
        )
        stage.run(n_batches, self.batches)
        reports = [_stage_report(stage, self.device, self.run_cfg.train.batch_size)]

        if self.down is not None:
            expected = sum(len(_groups_of(cfg, s)) for s in specs[1:]) + len(specs) - 1
            for _ in range(expected):
                msg = self.down.recv(timeout=self.timeout)
                if msg.msg_type == MsgType.WEIGHTS:
                    for name, p in _unpack_weights(cfg, msg).items():
                        self.model.params[name].value = p.value
                        self.model.params[name].version = p.version
                elif msg.msg_type == MsgType.CONTROL and msg.batch_id == Control.EPOCH_DONE:
                    reports.append(control_doc(msg))
                else:
                    raise ProtocolError(f"unexpected {msg!r} while collecting round results")
        reports.sort(key=lambda r: r["stage"])
        self.clock = max(r["clock"] for r in reports)
        return RoundReport(epoch, caps, record, reports)

    def train(self, progress: Optional[Callable[[RoundReport], None]] = None) -> TrainingResult:
        run = self.run_cfg
        result = TrainingResult(self.model, self.S)
        done, epoch = 0, 0
        while done < run.train.steps:
            n = min(run.train.epoch_batches, run.train.steps - done)
            report = self.round(epoch, n)
            result.rounds.append(report)
            if progress is not None:
                progress(report)
            done += n
            epoch += 1
        return result

    def stop(self) -> None:
        if self.down is not None:
            self.down.send(control_message(Control.STOP))


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def train_all_in_one(run: RunConfig, progress=None, timeout: float = 120.0) -> TrainingResult:
    """Every stage in its own thread of this process, chained by loopback links."""
    S = num_stages(run)
    devices = []
    try:
        for i in range(S):
            devices.append(prepare_device(run, i))
        links = [loopback_pair() for _ in range(S - 1)]
        errors: list[BaseException] = []

        def serve(worker: StageWorker):
            try:
                worker.serve()
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)
                worker.up.close()
                if worker.down is not None:
                    worker.down.close()

        threads = []
        for s in range(1, S):
            down = links[s][0] if s < S - 1 else None
            w = StageWorker(s, run, devices[s], links[s - 1][1], down, timeout)
            threads.append(threading.Thread(target=serve, args=(w,), name=f"stage{s}", daemon=True))
        for t in threads:
            t.start()
        central = Coordinator(run, devices[0], links[0][0] if S > 1 else None, S, timeout)
        try:
            result = central.train(progress)
            central.stop()
        except BaseException:
            for a, b in links:
                a.close()
            for t in threads:
                t.join(timeout=5)
            if errors:
                raise errors[0]
            raise
        for t in threads:
            t.join(timeout=timeout)
        if errors:
            raise errors[0]
        result.devices = [d.summary() for d in devices]
        return result
    finally:
        for d in devices:
            d.close()


def train_coordinator(run: RunConfig, progress=None, timeout: float = 120.0) -> TrainingResult:
    """Stage 0 of a multi-process run; connects to stage 1's endpoint."""
    S = num_stages(run)
    device = prepare_device(run, 0)
    down = None
    try:
        if S > 1:
            down = connect(_endpoint(run, 1), timeout=timeout)
        central = Coordinator(run, device, down, S, timeout)
        result = central.train(progress)
        central.stop()
        result.devices = [device.summary()]
        return result
    finally:
        if down is not None:
            down.close()
        device.close()


def serve_worker(run: RunConfig, index: int, timeout: float = 120.0) -> None:
    """Stage ``index`` of a multi-process run: listen for upstream, connect downstream."""
    S = num_stages(run)
    if not 1 <= index < S:
        raise InvalidConfig(f"worker stage must be in [1, {S}), got {index}")
    device = prepare_device(run, index)
    listener = Listener(_endpoint(run, index))
    up = down = None
    try:
        if index < S - 1:
            down = connect(_endpoint(run, index + 1), timeout=timeout)
        up = listener.accept(timeout=timeout)
        StageWorker(index, run, device, up, down, timeout).serve()
    finally:
        for link in (up, down):
            if link is not None:
                link.close()
        listener.close()
        device.close()


def _endpoint(run: RunConfig, index: int) -> str:
    ep = run.devices[index].endpoint
    if not ep:
        raise InvalidConfig(f"device {index} has no endpoint")
    return ep
