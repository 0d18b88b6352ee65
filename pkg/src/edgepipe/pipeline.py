"""
1F1B pipeline-parallel training with weight stashing.

Stage ``s`` of ``S`` admits ``S - s`` forwards before its first backward,
then alternates one backward with one forward, then drains. A forward
uses the newest weights the stage has committed and stashes a copy of
them under that version; the matching backward runs against the stashed
copy and the resulting gradient is applied to the current weights, which
commits version + 1.

Time is tracked on a per-stage clock in milliseconds. Forward time is the
sum over owned blocks of (attention time reported by the lane runner +
``other_ms_per_block``); backward time is ``backward_factor`` times the
forward time of the same batch. Messages carry the sender's clock so the
receiver can start no earlier than arrival + ``link_ms``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ProtocolError, StashMiss
from .model import (
    Batch,
    EncoderConfig,
    Runner,
    accuracy,
    classify,
    embed,
    group_shapes,
    run_blocks,
    stage_groups,
)
from .partition import StageSpec
from .tensor import Parameter, Tensor
from .transport import Link, MsgType, PipeMessage

logger = logging.getLogger(__name__)

FORWARD = "F"
BACKWARD = "B"


def build_schedule(S: int, N: int) -> list[list[tuple[str, int]]]:
    """Per-stage 1F1B event lists: ``schedule[s]`` is a list of ("F"|"B", batch)."""
    if S < 1 or N < 1:
        raise ValueError("need S >= 1 and N >= 1")
    out = []
    for s in range(S):
        warm = min(S - s, N)
        events = [(FORWARD, i) for i in range(warm)]
        for i in range(N - warm):
            events += [(BACKWARD, i), (FORWARD, i + warm)]
        events += [(BACKWARD, i) for i in range(N - warm, N)]
        out.append(events)
    return out


@dataclass(frozen=True)
class StageCost:
    other_ms_per_block: float = 0.0
    backward_factor: float = 2.0
    link_ms: float = 0.0


class MemoryTracker:
    """Logical byte counter with a high-water mark."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, n: int) -> None:
        self.current += int(n)
        self.peak = max(self.peak, self.current)

    def free(self, n: int) -> None:
        self.current -= int(n)


class WeightStash:
    """Snapshots of stage weights keyed by version, kept while any in-flight batch needs them."""

    def __init__(self, capacity: int, tracker: Optional[MemoryTracker] = None):
        self.capacity = capacity
        self.tracker = tracker or MemoryTracker()
        self._entries: dict[int, dict[str, np.ndarray]] = {}
        self._refs: Counter = Counter()
        self.high_water = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, version: int) -> bool:
        return version in self._entries

    @property
    def versions(self) -> list[int]:
        return sorted(self._entries)

    def acquire(self, version: int, params: dict[str, Parameter]) -> dict[str, np.ndarray]:
        if version not in self._entries:
            if len(self._entries) >= self.capacity:
                raise RuntimeError(f"stash full ({self.capacity} versions); admission rule violated")
            snap = {n: p.value.data.copy() for n, p in params.items()}
            self._entries[version] = snap
            self.tracker.alloc(sum(a.nbytes for a in snap.values()))
            self.high_water = max(self.high_water, len(self._entries))
        self._refs[version] += 1
        return self._entries[version]

    def get(self, version: int) -> dict[str, np.ndarray]:
        try:
            return self._entries[version]
        except KeyError:
            raise StashMiss(f"no stashed weights for version {version}") from None

    def release(self, version: int) -> None:
        self._refs[version] -= 1
        if self._refs[version] <= 0:
            del self._refs[version]
            snap = self._entries.pop(version)
            self.tracker.free(sum(a.nbytes for a in snap.values()))


@dataclass
class TraceEvent:
    stage: int
    batch: int
    phase: str
    version: int
    ms: float
    start_ms: float
    end_ms: float
    peak_bytes: int
    stash_versions: int
    in_flight: int
    epoch: int = 0
    loss: Optional[float] = None
    accuracy: Optional[float] = None

    def to_json(self) -> dict:
        doc = asdict(self)
        return {k: v for k, v in doc.items() if v is not None}

    @classmethod
    def from_json(cls, doc: dict) -> TraceEvent:
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


@dataclass
class _Ticket:
    batch: int
    version: int
    weights: dict[str, Tensor]
    inputs: Optional[Tensor]
    output: Tensor
    forward_ms: float
    act_bytes: int
    loss: Optional[float] = None
    accuracy: Optional[float] = None


@dataclass
class StageResult:
    events: list[TraceEvent] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    clock: float = 0.0
    peak_bytes: int = 0


class Stage:
    """One pipeline stage: owns a block range, its weights, stash and clock."""

    def __init__(
        self,
        spec: StageSpec,
        cfg: EncoderConfig,
        params: dict[str, Parameter],
        runner: Runner,
        lr: float,
        cost: StageCost = StageCost(),
        up: Optional[Link] = None,
        down: Optional[Link] = None,
        clock: float = 0.0,
        epoch: int = 0,
        recv_timeout: Optional[float] = 120.0,
    ):
        self.spec = spec
        self.cfg = cfg
        expected = [n for g in stage_groups(cfg, spec.lo, spec.hi, spec.is_first, spec.is_last) for n, _ in group_shapes(cfg, g)]
        missing = [n for n in expected if n not in params]
        if missing:
            raise ValueError(f"stage {spec.stage_index} is missing parameters {missing[:3]}...")
        self.names = expected
        self.params = {n: params[n] for n in expected}
        self.runner = runner
        self.lr = lr
        self.cost = cost
        self.up = up
        self.down = down
        self.clock = clock
        self.epoch = epoch
        self.recv_timeout = recv_timeout
        self.version = max((p.version for p in self.params.values()), default=0)
        self.tracker = MemoryTracker()
        self.param_bytes = sum(p.nbytes for p in self.params.values())
        self.tracker.alloc(self.param_bytes)
        self.stash = WeightStash(spec.stash_depth, self.tracker)
        self._tickets: dict[int, _Ticket] = {}
        self.result = StageResult()

    # -- helpers ---------------------------------------------------------

    def _recv(self, link: Link, kind: MsgType, batch: int) -> PipeMessage:
        msg = link.recv(timeout=self.recv_timeout)
        if msg.msg_type != kind:
            raise ProtocolError(f"stage {self.spec.stage_index}: expected {kind.name}, got {msg.msg_type.name}")
        if kind == MsgType.GRADIENT and msg.batch_id not in self._tickets:
            raise StashMiss(f"stage {self.spec.stage_index}: gradient for unknown batch {msg.batch_id}")
        if msg.batch_id != batch:
            raise ProtocolError(f"stage {self.spec.stage_index}: expected batch {batch}, got {msg.batch_id}")
        return msg

    def _record(self, batch, phase, version, start, ms, loss=None, acc=None) -> None:
        self.clock = start + ms
        self.result.events.append(
            TraceEvent(
                stage=self.spec.stage_index,
                batch=batch,
                phase=phase,
                version=version,
                ms=ms,
                start_ms=start,
                end_ms=self.clock,
                peak_bytes=self.tracker.peak,
                stash_versions=len(self.stash),
                in_flight=len(self._tickets),
                epoch=self.epoch,
                loss=loss,
                accuracy=acc,
            )
        )

    # -- events ----------------------------------------------------------

    def forward(self, i: int, batch: Optional[Batch] = None) -> None:
        spec, cfg = self.spec, self.cfg
        start = self.clock
        if spec.is_first:
            if batch is None:
                raise ValueError("stage 0 needs the batch data")
            labels = batch.labels
            inputs = None
        else:
            msg = self._recv(self.up, MsgType.ACTIVATION, i)
            act, labels_f, sent_at = msg.tensors
            labels = labels_f.astype(np.int64)
            inputs = Tensor(act.astype(cfg.np_dtype, copy=False), requires_grad=True)
            start = max(start, float(sent_at[0]) + self.cost.link_ms)

        v = self.version
        snap = self.stash.acquire(v, self.params)
        w = {n: Tensor(snap[n], requires_grad=True) for n in self.names}
        x = embed(cfg, w, batch.ids) if spec.is_first else inputs
        x, attn_times = run_blocks(cfg, w, x, spec.lo, spec.hi, self.runner)
        fwd_ms = sum(t + self.cost.other_ms_per_block for t in attn_times)

        loss = acc = None
        if spec.is_last:
            logits = classify(cfg, w, x)
            out = T.cross_entropy(logits, labels)
            loss, acc = out.item(), accuracy(logits, labels)
        else:
            out = x
        act_bytes = T.activation_nbytes(out, exclude=w.values())
        self.tracker.alloc(act_bytes)
        self._tickets[i] = _Ticket(i, v, w, inputs, out, fwd_ms, act_bytes, loss, acc)
        self._record(i, FORWARD, v, start, fwd_ms)
        if not spec.is_last:
            self.down.send(
                PipeMessage(
                    MsgType.ACTIVATION,
                    i,
                    v,
                    [out.data, labels.astype(np.float64), np.array([self.clock], dtype=np.float64)],
                )
            )
        if loss is not None:
            self.result.losses.append(loss)
            self.result.accuracies.append(acc)

    def backward(self, i: int) -> None:
        spec = self.spec
        start = self.clock
        if spec.is_last:
            seed = None
        else:
            msg = self._recv(self.down, MsgType.GRADIENT, i)
            seed, sent_at = msg.tensors
            start = max(start, float(sent_at[0]) + self.cost.link_ms)
        ticket = self._tickets.get(i)
        if ticket is None:
            raise StashMiss(f"stage {spec.stage_index}: backward for unknown batch {i}")
        snap = self.stash.get(ticket.version)
        assert all(ticket.weights[n].data is snap[n] for n in self.names), "ticket weights are not the stashed copy"

        T.backward(ticket.output, None if seed is None else seed.astype(self.cfg.np_dtype, copy=False))
        grads = [ticket.weights[n].grad if ticket.weights[n].grad is not None else np.zeros_like(snap[n]) for n in self.names]
        self.tracker.alloc(self.param_bytes)  # gradient buffers
        bwd_ms = self.cost.backward_factor * ticket.forward_ms

        self._record(i, BACKWARD, ticket.version, start, bwd_ms, ticket.loss, ticket.accuracy)
        if not spec.is_first:
            self.up.send(
                PipeMessage(
                    MsgType.GRADIENT,
                    i,
                    ticket.version,
                    [ticket.inputs.grad, np.array([self.clock], dtype=np.float64)],
                )
            )

        del self._tickets[i]
        self.tracker.free(ticket.act_bytes)
        T.sgd_step([self.params[n] for n in self.names], self.lr, grads)
        self.version += 1
        self.tracker.free(self.param_bytes)
        self.stash.release(ticket.version)

    def run(self, n_batches: int, batches: Optional[Iterator[Batch]] = None) -> StageResult:
        """Run one epoch of ``n_batches`` under the 1F1B schedule."""
        for phase, i in build_schedule(self.spec.num_stages, n_batches)[self.spec.stage_index]:
            if phase == FORWARD:
                self.forward(i, next(batches) if self.spec.is_first else None)
            else:
                self.backward(i)
        self.result.clock = self.clock
        self.result.peak_bytes = self.tracker.peak
        return self.result


# ---------------------------------------------------------------------------
# Trace checks
# ---------------------------------------------------------------------------


def check_trace(events: list[TraceEvent], S: int) -> list[str]:
    """Protocol violations in an execution trace (empty list = clean).

    Checks that every backward used its forward's version, that each stage
    strictly alternates F/B between warmup and drain, and that no stage
    held more than ``S - s`` stashed versions or outstanding batches.
    """
    problems = []
    by_stage: dict[tuple[int, int], list[TraceEvent]] = {}
    for e in events:
        by_stage.setdefault((e.epoch, e.stage), []).append(e)
    for (epoch, s), evs in sorted(by_stage.items()):
        fwd = {e.batch: e.version for e in evs if e.phase == FORWARD}
        for e in evs:
            if e.phase == BACKWARD and fwd.get(e.batch) != e.version:
                problems.append(f"epoch {epoch} stage {s} batch {e.batch}: backward v{e.version} != forward v{fwd.get(e.batch)}")
            if e.stash_versions > S - s:
                problems.append(f"epoch {epoch} stage {s}: {e.stash_versions} stashed versions > {S - s}")
        phases = [e.phase for e in evs]
        outstanding = 0
        for p in phases:
            outstanding += 1 if p == FORWARD else -1
            if outstanding > S - s:
                problems.append(f"epoch {epoch} stage {s}: {outstanding} batches outstanding > {S - s}")
                break
        n = len(fwd)
        warm = min(S - s, n)
        steady = phases[warm : len(phases) - warm]
        for a, b in zip(steady, steady[1:]):
            if a == b:
                problems.append(f"epoch {epoch} stage {s}: consecutive {a}{b} after warmup")
                break
        if phases[:warm] != [FORWARD] * warm or phases[len(phases) - warm :] != [BACKWARD] * warm:
            problems.append(f"epoch {epoch} stage {s}: warmup/drain shape wrong")
    return problems
