"""
Allocation of attention heads to lanes.

``allocate`` binary-searches a target completion time ``mid``. For each
lane it picks the head count whose profiled time is closest to ``mid``
(dropping lanes whose closest time is more than ``epsilon`` away), and
calls the target feasible when the picked counts cover all K heads. The
last feasible pick is trimmed back to exactly K heads.

``brute_force_allocate`` enumerates every composition of K and is the
test oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

from .attention import ExecutionPlan
from .errors import IncompleteTable, TooLarge
from .lanes import ProfileTable

DEFAULT_EPSILON_FRACTION = 0.05
MAX_COMPOSITIONS = 10**7


@dataclass
class AllocationPlan:
    entries: list[tuple[int, int]]
    makespan_ms: float
    epsilon_ms: Optional[float] = None
    sigma_ms: Optional[float] = None
    iterations: int = 0
    fallback: bool = False
    trimmed: int = field(default=0, compare=False)

    @property
    def total_heads(self) -> int:
        return sum(k for _, k in self.entries)

    def counts(self) -> dict[int, int]:
        return dict(self.entries)

    def execution_plan(self, table: ProfileTable) -> ExecutionPlan:
        """Contiguous head ranges in lane order, each in the lane's profiled faster mode."""
        return ExecutionPlan.from_counts((j, k, table.mode(j, k) if k else "fused") for j, k in self.entries)

    def to_json(self) -> dict:
        return {
            "epsilon_ms": self.epsilon_ms,
            "sigma_ms": self.sigma_ms,
            "entries": [{"lane": j, "k": k} for j, k in self.entries],
            "makespan_ms": self.makespan_ms,
        }

    @classmethod
    def from_json(cls, doc: dict) -> AllocationPlan:
        return cls(
            entries=[(int(e["lane"]), int(e["k"])) for e in doc["entries"]],
            makespan_ms=float(doc["makespan_ms"]),
            epsilon_ms=doc.get("epsilon_ms"),
            sigma_ms=doc.get("sigma_ms"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def makespan(table: ProfileTable, entries: Sequence[tuple[int, int]]) -> float:
    return max((table.T(j, k) for j, k in entries if k > 0), default=0.0)


def _check_table(table: ProfileTable, K: int) -> None:
    if table.K < K:
        raise IncompleteTable(f"table covers k=1..{table.K}, need K={K}")
    for j in table.lane_ids:
        row = table.ms.get(j)
        if row is None or len(row) < K or any(v is None for v in row[:K]):
            raise IncompleteTable(f"lane {j} is missing timings")


def is_valid(mid: float, K: int, table: ProfileTable, epsilon: float) -> tuple[bool, list[tuple[int, int]]]:
    """Per lane, the k in [1, K] with T closest to ``mid`` (ties to smaller k), or 0 if > epsilon away."""
    picks, total = [], 0
    for j in table.lane_ids:
        row = table.ms[j]
        best_k, best_d = 1, abs(row[0] - mid)
        for k in range(2, K + 1):
            d = abs(row[k - 1] - mid)
            if d < best_d:
                best_k, best_d = k, d
        if best_d > epsilon:
            best_k = 0
        total += best_k
        picks.append((j, best_k))
    return total >= K, picks


def default_epsilon(table: ProfileTable, K: int) -> float:
    return DEFAULT_EPSILON_FRACTION * min(table.T(j, K) for j in table.lane_ids)


def _trim(table: ProfileTable, picks: list[tuple[int, int]], K: int) -> tuple[list[tuple[int, int]], int]:
    counts = [list(p) for p in picks]
    removed = 0
    while sum(k for _, k in counts) > K:
        # Lane currently finishing last; first such lane on ties.
        worst = max((c for c in counts if c[1] > 0), key=lambda c: table.T(c[0], c[1]))
        worst[1] -= 1
        removed += 1
    return [(j, k) for j, k in counts], removed


def allocate(
    table: ProfileTable,
    K: Optional[int] = None,
    M: Optional[int] = None,
    epsilon: Optional[float] = None,
    sigma: Optional[float] = None,
) -> AllocationPlan:
    """Binary search over the target makespan; see module docstring."""
    K = table.K if K is None else K
    if M is not None and M != table.M:
        raise IncompleteTable(f"table has {table.M} lanes, expected {M}")
    _check_table(table, K)
    if epsilon is None:
        epsilon = default_epsilon(table, K)
    if sigma is None:
        sigma = epsilon / 10
    if epsilon <= 0 or sigma <= 0:
        raise ValueError("epsilon and sigma must be positive")

    lo = 0.0
    hi = min(table.T(j, K) for j in table.lane_ids)
    best = None
    iterations = 0
    while lo <= hi:
        iterations += 1
        mid = (lo + hi) / 2
        ok, picks = is_valid(mid, K, table, epsilon)
        if ok:
            best = picks
            hi = mid - sigma
        else:
            lo = mid + sigma

    if best is None:
        fastest = min(table.lane_ids, key=lambda j: table.T(j, K))
        entries = [(j, K if j == fastest else 0) for j in table.lane_ids]
        return AllocationPlan(entries, table.T(fastest, K), epsilon, sigma, iterations, fallback=True)
    entries, removed = _trim(table, best, K)
    return AllocationPlan(entries, makespan(table, entries), epsilon, sigma, iterations, trimmed=removed)


def max_iterations(table: ProfileTable, K: int, sigma: float) -> int:
    r0 = min(table.T(j, K) for j in table.lane_ids)
    return math.ceil(math.log2((r0 + sigma) / sigma)) + 1


def _compositions(K: int, M: int):
    """All (k_1..k_M) with k_j >= 0 summing to K, in lexicographic order."""
    for bars in combinations(range(K + M - 1), M - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(K + M - 2 - prev)
        yield parts


def brute_force_allocate(table: ProfileTable, K: Optional[int] = None, M: Optional[int] = None) -> AllocationPlan:
    """Exact minimum-makespan allocation by enumeration; ties go to the lexicographically smallest vector."""
    K = table.K if K is None else K
    if M is not None and M != table.M:
        raise IncompleteTable(f"table has {table.M} lanes, expected {M}")
    _check_table(table, K)
    ids = table.lane_ids
    if math.comb(K + len(ids) - 1, len(ids) - 1) > MAX_COMPOSITIONS:
        raise TooLarge(f"{len(ids)} lanes x {K} heads is too many compositions to enumerate")
    rows = [table.ms[j] for j in ids]
    best_vec, best_t = None, math.inf
    for vec in _compositions(K, len(ids)):
        t = max(rows[i][k - 1] for i, k in enumerate(vec) if k > 0)
        if t < best_t:
            best_vec, best_t = vec, t
    return AllocationPlan(list(zip(ids, best_vec)), best_t)
