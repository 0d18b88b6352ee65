"""
Execution lanes and backend profiling.

A lane stands in for one compute backend on a device (CPU, an OpenCL GPU
queue, a Metal queue...). Two kinds exist:

- ``RealLane`` runs the attention math on a worker thread and reports the
  measured wall time divided by its ``speed`` multiplier.
- ``SimulatedLane`` also runs the math (so outputs are real) but reports
  time from a cost model ``c(k, mode)`` in milliseconds. This keeps timing
  deterministic while numerics stay honest.

Each lane owns a single worker thread, so segments on one lane run
serially while distinct lanes run concurrently.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .attention import FUSED, MODES, PER_HEAD, AttentionLayer, HeadWeights, Segment, compute_heads
from .errors import DuplicateLaneId, EmptyLaneSet, InvalidConfig, LaneFailure, UnknownLane
from .tensor import Tensor

logger = logging.getLogger(__name__)

REAL = "real"
SIMULATED = "simulated"


@dataclass(frozen=True)
class ModeCost:
    """Cost of running k heads in one mode: a table, or ``a + b*k``."""

    a: float = 0.0
    b: float = 1.0
    table: Optional[tuple[float, ...]] = None

    def __call__(self, k: int) -> float:
        if self.table is not None:
            if not 1 <= k <= len(self.table):
                raise ValueError(f"cost table covers k=1..{len(self.table)}, asked for {k}")
            return float(self.table[k - 1])
        return self.a + self.b * k

    def check(self, k_max: int) -> None:
        values = [self(k) for k in range(1, k_max + 1)] if self.table is None else list(self.table)
        if any(v <= 0 for v in values):
            raise InvalidConfig("lane costs must be positive")
        if any(b < a for a, b in zip(values, values[1:])):
            raise InvalidConfig("lane costs must be non-decreasing in k")

    @classmethod
    def parse(cls, doc) -> ModeCost:
        if isinstance(doc, (list, tuple)):
            return cls(table=tuple(float(v) for v in doc))
        return cls(a=float(doc.get("a", 0.0)), b=float(doc.get("b", 0.0)))

    def to_json(self):
        return list(self.table) if self.table is not None else {"a": self.a, "b": self.b}


class Lane:
    kind = ""

    def __init__(self, lane_id: int, name: str = ""):
        self.lane_id = lane_id
        self.name = name or f"lane{lane_id}"
        self._pool: Optional[ThreadPoolExecutor] = None

    def __repr__(self) -> str:
        return f"{type(self).__name__}(id={self.lane_id}, name={self.name!r})"

    def _elapsed(self, heads: int, mode: str, wall_ms: float) -> float:
        raise NotImplementedError

    def _check_health(self) -> None:
        pass

    def run_segment(self, layer: AttentionLayer, x: Tensor, segment: Segment) -> tuple[Tensor, float]:
        """Compute the segment's heads; return the output and the lane's elapsed ms."""
        try:
            self._check_health()
            start = time.perf_counter()
            out = compute_heads(layer, x, segment.lo, segment.hi, segment.mode)
            wall_ms = (time.perf_counter() - start) * 1e3
        except LaneFailure:
            raise
        except Exception as exc:  # any backend error is a lane failure
            raise LaneFailure(f"lane {self.lane_id} ({self.name}) failed: {exc}") from exc
        return out, self._elapsed(segment.heads, segment.mode, wall_ms)

    def submit(self, layer: AttentionLayer, x: Tensor, segment: Segment) -> Future:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"lane-{self.name}")
        return self._pool.submit(self.run_segment, layer, x, segment)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def describe(self) -> dict:
        return {"id": self.lane_id, "name": self.name, "kind": self.kind}


class RealLane(Lane):
    kind = REAL

    def __init__(self, lane_id: int, name: str = "", speed: float = 1.0, delay_ms_per_head: float = 0.0):
        super().__init__(lane_id, name)
        if speed <= 0:
            raise InvalidConfig("lane speed must be positive")
        self.speed = speed
        # Artificial per-head sleep; lets tests build real lanes with known relative speeds.
        self.delay_ms_per_head = delay_ms_per_head

    def run_segment(self, layer, x, segment):
        start = time.perf_counter()
        out, _ = super().run_segment(layer, x, segment)
        if self.delay_ms_per_head > 0:
            time.sleep(self.delay_ms_per_head * segment.heads / 1e3)
        wall_ms = (time.perf_counter() - start) * 1e3
        return out, max(wall_ms / self.speed, 1e-6)

    def _elapsed(self, heads, mode, wall_ms):
        return wall_ms / self.speed

    def describe(self):
        return {**super().describe(), "speed": self.speed, "delay_ms_per_head": self.delay_ms_per_head}


class SimulatedLane(Lane):
    kind = SIMULATED

    def __init__(
        self,
        lane_id: int,
        name: str = "",
        costs: Optional[dict[str, ModeCost]] = None,
        contention: float = 1.0,
        faulty: bool = False,
    ):
        super().__init__(lane_id, name)
        costs = dict(costs or {FUSED: ModeCost(0.0, 1.0)})
        if FUSED not in costs and PER_HEAD not in costs:
            raise InvalidConfig("a simulated lane needs at least one mode cost")
        if PER_HEAD not in costs:
            one = costs[FUSED](1)
            costs[PER_HEAD] = ModeCost(0.0, one)  # k independent single-head runs
        if FUSED not in costs:
            costs[FUSED] = costs[PER_HEAD]
        self.costs = costs
        self.contention = contention
        self.faulty = faulty

    def cost(self, k: int, mode: str) -> float:
        return self.costs[mode](k) * self.contention

    def _check_health(self):
        if self.faulty:
            raise LaneFailure(f"lane {self.lane_id} ({self.name}) is marked faulty")

    def _elapsed(self, heads, mode, wall_ms):
        return self.cost(heads, mode)

    def describe(self):
        return {
            **super().describe(),
            "cost": {m: c.to_json() for m, c in self.costs.items()},
            "contention": self.contention,
        }


class LaneSet:
    """Ordered lanes with unique ids."""

    def __init__(self, lanes: Sequence[Lane]):
        if not lanes:
            raise EmptyLaneSet("no lanes configured")
        ids = [lane.lane_id for lane in lanes]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DuplicateLaneId(f"duplicate lane ids: {dupes}")
        self._lanes = list(lanes)
        self._by_id = {lane.lane_id: lane for lane in lanes}

    def __len__(self) -> int:
        return len(self._lanes)

    def __iter__(self) -> Iterator[Lane]:
        return iter(self._lanes)

    def __contains__(self, lane_id) -> bool:
        return lane_id in self._by_id

    def __getitem__(self, lane_id: int) -> Lane:
        try:
            return self._by_id[lane_id]
        except KeyError:
            raise UnknownLane(lane_id) from None

    @property
    def ids(self) -> list[int]:
        return [lane.lane_id for lane in self._lanes]

    def subset(self, ids: Iterable[int]) -> LaneSet:
        return LaneSet([self[i] for i in ids])

    def close(self) -> None:
        for lane in self._lanes:
            lane.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_lane(desc: dict, lane_id: int) -> Lane:
    kind = desc.get("kind", SIMULATED)
    name = desc.get("name", "")
    if kind == REAL:
        return RealLane(
            lane_id, name, speed=float(desc.get("speed", 1.0)), delay_ms_per_head=float(desc.get("delay_ms_per_head", 0.0))
        )
    if kind == SIMULATED:
        costs = {m: ModeCost.parse(c) for m, c in desc.get("cost", {}).items()}
        unknown = set(costs) - set(MODES)
        if unknown:
            raise InvalidConfig(f"unknown cost modes {sorted(unknown)}")
        return SimulatedLane(
            lane_id,
            name,
            costs=costs or None,
            contention=float(desc.get("contention", 1.0)),
            faulty=bool(desc.get("faulty", False)),
        )
    raise InvalidConfig(f"unknown lane kind {kind!r}")


def discover_lanes(config) -> LaneSet:
    """Build a LaneSet from descriptors (a list, or a dict with a ``lanes`` key).

    Lanes without an explicit ``id`` are numbered by position.
    """
    descs = config.get("lanes", []) if isinstance(config, dict) else list(config)
    if not descs:
        raise EmptyLaneSet("no lanes configured")
    lanes = [make_lane(d, int(d.get("id", i))) for i, d in enumerate(descs)]
    return LaneSet(lanes)


# ---------------------------------------------------------------------------
# Profiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerDims:
    d_head: int = 4
    seq_len: int = 16
    batch: int = 1


def isotonic(values: Sequence[float]) -> list[float]:
    """Running maximum: the smallest non-decreasing sequence dominating ``values``."""
    out: list[float] = []
    for v in values:
        out.append(v if not out else max(v, out[-1]))
    return out


@dataclass
class ProfileTable:
    """Per-lane head timings. ``ms[j][k-1]`` is the cleaned time for k heads on lane j."""

    lanes: list[dict]
    K: int
    R: int
    warmup: int
    ms: dict[int, list[float]]
    modes: dict[int, list[str]]
    raw_ms: dict[int, list[float]] = field(default_factory=dict)
    medians: dict[int, dict[str, list[float]]] = field(default_factory=dict)

    @property
    def lane_ids(self) -> list[int]:
        return [d["id"] for d in self.lanes]

    @property
    def M(self) -> int:
        return len(self.lanes)

    def T(self, lane_id: int, k: int) -> float:
        return self.ms[lane_id][k - 1]

    def mode(self, lane_id: int, k: int) -> str:
        return self.modes[lane_id][k - 1]

    def restrict(self, lane_ids: Iterable[int]) -> ProfileTable:
        keep = list(lane_ids)
        return ProfileTable(
            lanes=[d for d in self.lanes if d["id"] in keep],
            K=self.K,
            R=self.R,
            warmup=self.warmup,
            ms={j: self.ms[j] for j in keep},
            modes={j: self.modes[j] for j in keep},
            raw_ms={j: self.raw_ms[j] for j in keep if j in self.raw_ms},
            medians={j: self.medians[j] for j in keep if j in self.medians},
        )

    @classmethod
    def from_times(cls, times, modes=None, lane_names=None, clean: bool = True) -> ProfileTable:
        """Build a table straight from timings: ``times[j]`` lists ms for k=1..K."""
        rows = list(times.values()) if isinstance(times, dict) else [list(r) for r in times]
        ids = list(times.keys()) if isinstance(times, dict) else list(range(len(rows)))
        K = len(rows[0])
        if any(len(r) != K for r in rows):
            raise ValueError("every lane needs K timings")
        names = lane_names or [f"lane{j}" for j in ids]
        return cls(
            lanes=[{"id": j, "name": n} for j, n in zip(ids, names)],
            K=K,
            R=1,
            warmup=0,
            ms={j: isotonic(r) if clean else [float(v) for v in r] for j, r in zip(ids, rows)},
            modes={j: list(modes[i]) if modes else [FUSED] * K for i, j in enumerate(ids)},
            raw_ms={j: [float(v) for v in r] for j, r in zip(ids, rows)},
        )

    def to_json(self) -> dict:
        entries = []
        for j in self.lane_ids:
            for k in range(1, self.K + 1):
                e = {"lane": j, "k": k, "ms": self.ms[j][k - 1], "mode": self.modes[j][k - 1]}
                if j in self.raw_ms:
                    e["raw_ms"] = self.raw_ms[j][k - 1]
                for m, vals in self.medians.get(j, {}).items():
                    e[f"{m}_ms"] = vals[k - 1]
                entries.append(e)
        return {"lanes": self.lanes, "K": self.K, "R": self.R, "warmup": self.warmup, "entries": entries}

    @classmethod
    def from_json(cls, doc: dict) -> ProfileTable:
        K = int(doc["K"])
        lanes = [dict(d) for d in doc["lanes"]]
        ids = [d["id"] for d in lanes]
        ms = {j: [None] * K for j in ids}
        modes = {j: [None] * K for j in ids}
        raw: dict[int, list] = {}
        medians: dict[int, dict[str, list]] = {}
        for e in doc["entries"]:
            j, k = e["lane"], int(e["k"])
            ms[j][k - 1] = float(e["ms"])
            modes[j][k - 1] = e["mode"]
            if "raw_ms" in e:
                raw.setdefault(j, [None] * K)[k - 1] = float(e["raw_ms"])
            for m in MODES:
                if f"{m}_ms" in e:
                    medians.setdefault(j, {}).setdefault(m, [None] * K)[k - 1] = float(e[f"{m}_ms"])
        return cls(lanes, K, int(doc["R"]), int(doc.get("warmup", 0)), ms, modes, raw, medians)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def loads(cls, text: str) -> ProfileTable:
        return cls.from_json(json.loads(text))


def random_layer(K: int, d_head: int, seed: int = 0, dtype=np.float32) -> AttentionLayer:
    rng = np.random.default_rng(seed)
    d_model = K * d_head
    bound = 1.0 / np.sqrt(d_model)

    def w():
        return Tensor(rng.uniform(-bound, bound, (d_model, d_head)).astype(dtype))

    return AttentionLayer([HeadWeights(w(), w(), w(), i) for i in range(K)], d_model, d_head)


def profile(
    lanes: LaneSet,
    K: int,
    layer_dims: LayerDims = LayerDims(),
    R: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> ProfileTable:
    """Time k = 1..K heads on every lane in both modes and keep the faster median.

    A lane raising LaneFailure is dropped with a warning; the table is
    returned as long as one lane survives.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if R < 3 or R % 2 == 0:
        raise ValueError("R must be odd and >= 3 so the median is a sample")
    layer = random_layer(K, layer_dims.d_head, seed)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((layer_dims.batch, layer_dims.seq_len, layer.d_model)).astype(np.float32))

    described, ms, modes, raw, medians = [], {}, {}, {}, {}
    for lane in lanes:
        try:
            per_mode = {m: [] for m in MODES}
            for k in range(1, K + 1):
                for m in MODES:
                    seg = Segment(lane.lane_id, 0, k, m)
                    for _ in range(warmup):
                        lane.run_segment(layer, x, seg)
                    times = [lane.run_segment(layer, x, seg)[1] for _ in range(R)]
                    per_mode[m].append(statistics.median(times))
        except LaneFailure as exc:
            logger.warning("excluding lane %s from profile: %s", lane.lane_id, exc)
            continue
        j = lane.lane_id
        best = [min(per_mode[FUSED][i], per_mode[PER_HEAD][i]) for i in range(K)]
        # Ties go to the fused layout.
        modes[j] = [FUSED if per_mode[FUSED][i] <= per_mode[PER_HEAD][i] else PER_HEAD for i in range(K)]
        raw[j] = best
        ms[j] = isotonic(best)
        medians[j] = per_mode
        described.append({"id": j, "name": lane.name, "kind": lane.kind})
    if not described:
        raise LaneFailure("every lane failed during profiling")
    return ProfileTable(described, K, R, warmup, ms, modes, raw, medians)
