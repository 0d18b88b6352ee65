"""Multi-head self-attention: fused, per-head and lane-split execution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

from . import tensor as T
from .errors import InvalidPlan, ShapeMismatch, UnknownLane
from .tensor import Tensor

if TYPE_CHECKING:
    from .lanes import LaneSet

FUSED = "fused"
PER_HEAD = "per_head"
MODES = (FUSED, PER_HEAD)


@dataclass
class HeadWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    head_index: int

    def __post_init__(self):
        if not (self.wq.shape == self.wk.shape == self.wv.shape) or self.wq.ndim != 2:
            raise ShapeMismatch("wq, wk, wv must share one [d_model x d_head] shape")


@dataclass
class AttentionLayer:
    heads: list[HeadWeights]
    d_model: int
    d_head: int
    scaled: bool = True  # False gives the unscaled softmax(QK^T) variant

    def __post_init__(self):
        if self.K * self.d_head != self.d_model:
            raise ShapeMismatch(f"{self.K} heads x {self.d_head} != d_model {self.d_model}")
        if [h.head_index for h in self.heads] != list(range(self.K)):
            raise ShapeMismatch("heads must be ordered by head_index 0..K-1")
        for h in self.heads:
            if h.wq.shape != (self.d_model, self.d_head):
                raise ShapeMismatch(f"head {h.head_index} weights have shape {h.wq.shape}")

    @property
    def K(self) -> int:
        return len(self.heads)

    def weights(self) -> list[Tensor]:
        return [w for h in self.heads for w in (h.wq, h.wk, h.wv)]


@dataclass(frozen=True)
class Segment:
    lane_id: int
    lo: int
    hi: int
    mode: str = FUSED

    @property
    def heads(self) -> int:
        return self.hi - self.lo


@dataclass
class ExecutionPlan:
    """Contiguous head ranges assigned to lanes."""

    segments: list[Segment] = field(default_factory=list)

    def validate(self, K: int) -> None:
        ordered = sorted(self.segments, key=lambda s: s.lo)
        cursor = 0
        for seg in ordered:
            if seg.mode not in MODES:
                raise InvalidPlan(f"unknown mode {seg.mode!r}")
            if seg.lo != cursor or seg.hi <= seg.lo:
                raise InvalidPlan(f"segments do not partition [0, {K}): gap or overlap at {seg}")
            cursor = seg.hi
        if cursor != K:
            raise InvalidPlan(f"segments cover [0, {cursor}) but K={K}")
        lanes = [s.lane_id for s in self.segments]
        if len(set(lanes)) != len(lanes):
            raise InvalidPlan("a lane appears in more than one segment")

    @classmethod
    def single(cls, K: int, lane_id: int = 0, mode: str = FUSED) -> ExecutionPlan:
        return cls([Segment(lane_id, 0, K, mode)])

    @classmethod
    def from_counts(cls, counts: Iterable[tuple[int, int, str]]) -> ExecutionPlan:
        """Lay out ``(lane_id, k, mode)`` triples as consecutive head ranges; k=0 lanes are skipped."""
        segments, lo = [], 0
        for lane_id, k, mode in counts:
            if k > 0:
                segments.append(Segment(lane_id, lo, lo + k, mode))
                lo += k
        return cls(segments)

    def to_json(self) -> dict:
        return {"segments": [{"lane": s.lane_id, "lo": s.lo, "hi": s.hi, "mode": s.mode} for s in self.segments]}

    @classmethod
    def from_json(cls, doc: dict) -> ExecutionPlan:
        return cls([Segment(int(s["lane"]), int(s["lo"]), int(s["hi"]), s["mode"]) for s in doc["segments"]])


def _check_input(x: Tensor, d_model: int) -> None:
    if x.ndim not in (2, 3) or x.shape[-1] != d_model:
        raise ShapeMismatch(f"attention input {x.shape} incompatible with d_model={d_model}")


def head_forward(h: HeadWeights, x: Tensor, scaled: bool = True) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V for one head; ``x`` is [n, d] or [B, n, d]."""
    _check_input(x, h.wq.shape[0])
    q = T.matmul(x, h.wq)
    k = T.matmul(x, h.wk)
    v = T.matmul(x, h.wv)
    scores = T.matmul(q, T.transpose(k))
    if scaled:
        scores = T.scale(scores, 1.0 / math.sqrt(h.wq.shape[1]))
    return T.matmul(T.softmax_rows(scores), v)


def _per_head(heads: Sequence[HeadWeights], x: Tensor, scaled: bool) -> Tensor:
    return T.concat([head_forward(h, x, scaled) for h in heads], axis=-1)


def _fused(heads: Sequence[HeadWeights], x: Tensor, scaled: bool) -> Tensor:
    # One wide projection per Q/K/V, then attention per d_head slice.
    k = len(heads)
    d_model, d_head = heads[0].wq.shape
    wq = T.concat([h.wq for h in heads], axis=-1)
    wk = T.concat([h.wk for h in heads], axis=-1)
    wv = T.concat([h.wv for h in heads], axis=-1)
    batched = x.ndim == 3
    lead = x.shape[:-1]  # (B, n) or (n,)
    split = lead + (k, d_head)
    to_heads = (0, 2, 1, 3) if batched else (1, 0, 2)
    to_heads_t = (0, 2, 3, 1) if batched else (1, 2, 0)
    q = T.permute(T.reshape(T.matmul(x, wq), split), to_heads)
    kt = T.permute(T.reshape(T.matmul(x, wk), split), to_heads_t)
    v = T.permute(T.reshape(T.matmul(x, wv), split), to_heads)
    scores = T.matmul(q, kt)
    if scaled:
        scores = T.scale(scores, 1.0 / math.sqrt(d_head))
    z = T.matmul(T.softmax_rows(scores), v)
    return T.reshape(T.permute(z, to_heads), lead + (k * d_head,))


def compute_heads(layer: AttentionLayer, x: Tensor, lo: int, hi: int, mode: str) -> Tensor:
    """Output columns for heads ``[lo, hi)`` computed in the given mode."""
    _check_input(x, layer.d_model)
    if not 0 <= lo < hi <= layer.K:
        raise InvalidPlan(f"head range [{lo}, {hi}) outside [0, {layer.K})")
    heads = layer.heads[lo:hi]
    if mode == FUSED:
        return _fused(heads, x, layer.scaled)
    if mode == PER_HEAD:
        return _per_head(heads, x, layer.scaled)
    raise InvalidPlan(f"unknown mode {mode!r}")


def fused_forward(layer: AttentionLayer, x: Tensor) -> Tensor:
    return compute_heads(layer, x, 0, layer.K, FUSED)


def per_head_forward(layer: AttentionLayer, x: Tensor) -> Tensor:
    return compute_heads(layer, x, 0, layer.K, PER_HEAD)


def run_plan(layer: AttentionLayer, x: Tensor, plan: ExecutionPlan, lanes: LaneSet) -> tuple[Tensor, float]:
    """Run every segment on its lane concurrently.

    Returns the concatenated output (in head order, regardless of which lane
    finished first) and the elapsed time of the slowest segment in ms.
    """
    plan.validate(layer.K)
    for seg in plan.segments:
        if seg.lane_id not in lanes:
            raise UnknownLane(seg.lane_id)
    futures = [(seg, lanes[seg.lane_id].submit(layer, x, seg)) for seg in plan.segments]
    results = [(seg, f.result()) for seg, f in futures]
    results.sort(key=lambda r: r[0].lo)
    out = T.concat([r[1][0] for r in results], axis=-1)
    return out, max(r[1][1] for r in results)


def split_forward(layer: AttentionLayer, x: Tensor, plan: ExecutionPlan, lanes: LaneSet) -> Tensor:
    return run_plan(layer, x, plan, lanes)[0]


class LocalRunner:
    """Runs every head in the calling thread with one mode; reports zero elapsed time."""

    def __init__(self, mode: str = FUSED):
        if mode not in MODES:
            raise InvalidPlan(f"unknown mode {mode!r}")
        self.mode = mode

    def __call__(self, layer: AttentionLayer, x: Tensor) -> tuple[Tensor, float]:
        return compute_heads(layer, x, 0, layer.K, self.mode), 0.0

    def segments(self, K: int) -> list[Segment]:
        return [Segment(0, 0, K, self.mode)]


class LaneRunner:
    """Runs attention through an execution plan on a lane set."""

    def __init__(self, plan: ExecutionPlan, lanes: LaneSet):
        self.plan = plan
        self.lanes = lanes

    def __call__(self, layer: AttentionLayer, x: Tensor) -> tuple[Tensor, float]:
        return run_plan(layer, x, self.plan, self.lanes)

    def segments(self, K: int) -> list[Segment]:
        self.plan.validate(K)
        return list(self.plan.segments)
