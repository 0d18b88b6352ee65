"""Capacity-aware contiguous partitioning of encoder blocks into pipeline stages."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

from .errors import TooFewBlocks

_TOL = 1e-9


@dataclass(frozen=True)
class StageSpec:
    """Blocks ``[lo, hi)`` owned by stage ``stage_index``.

    Stage 0 also owns the embedding and is the central node; the last stage
    owns the classifier.
    """

    stage_index: int
    lo: int
    hi: int
    num_stages: int

    @property
    def is_central(self) -> bool:
        return self.stage_index == 0

    @property
    def is_first(self) -> bool:
        return self.stage_index == 0

    @property
    def is_last(self) -> bool:
        return self.stage_index == self.num_stages - 1

    @property
    def blocks(self) -> int:
        return self.hi - self.lo

    @property
    def stash_depth(self) -> int:
        return self.num_stages - self.stage_index


@dataclass
class CapacityEstimate:
    """Throughput of one device in encoder blocks per second."""

    blocks_per_s: float
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if not self.blocks_per_s > 0:
            raise ValueError("capacity must be positive")


def specs_from_sizes(sizes: Sequence[int]) -> list[StageSpec]:
    specs, lo = [], 0
    for s, n in enumerate(sizes):
        specs.append(StageSpec(s, lo, lo + n, len(sizes)))
        lo += n
    return specs


def bottleneck(sizes: Sequence[int], capacities: Sequence[float]) -> float:
    return max(n / c for n, c in zip(sizes, capacities))


def _largest_remainder(L: int, capacities: Sequence[float]) -> list[int]:
    total = sum(capacities)
    quotas = [L * c / total for c in capacities]
    sizes = [max(1, math.floor(q)) for q in quotas]
    # Hand out (or claw back) blocks by remainder.
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    i = 0
    while sum(sizes) < L:
        sizes[order[i % len(order)]] += 1
        i += 1
    while sum(sizes) > L:
        j = max((k for k in range(len(sizes)) if sizes[k] > 1), key=lambda k: (sizes[k] - quotas[k], -k))
        sizes[j] -= 1
    return sizes


def partition(L: int, capacities: Sequence[float]) -> list[StageSpec]:
    """Split L blocks into len(capacities) contiguous stages minimising max(blocks/capacity).

    Starts from the largest-remainder proportional split and repairs it
    wherever it exceeds the optimal bottleneck.
    """
    S = len(capacities)
    if S < 1:
        raise ValueError("need at least one stage")
    if L < S:
        raise TooFewBlocks(f"{L} blocks cannot fill {S} stages")
    if any(not c > 0 for c in capacities):
        raise ValueError("capacities must be positive")

    # Smallest bottleneck t such that floor(t * c_s) >= 1 for all s and sums to >= L.
    candidates = sorted({n / c for c in capacities for n in range(1, L + 1)})

    def caps(t):
        return [math.floor(t * c * (1 + _TOL)) for c in capacities]

    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        cs = caps(candidates[mid])
        if min(cs) >= 1 and sum(cs) >= L:
            hi = mid
        else:
            lo = mid + 1
    limit = caps(candidates[lo])

    sizes = [min(n, cap) for n, cap in zip(_largest_remainder(L, capacities), limit)]
    while sum(sizes) < L:
        j = min(
            (k for k in range(S) if sizes[k] < limit[k]),
            key=lambda k: ((sizes[k] + 1) / capacities[k], k),
        )
        sizes[j] += 1
    return specs_from_sizes(sizes)


def brute_force_bottleneck(L: int, capacities: Sequence[float]) -> float:
    """Exhaustive search over every contiguous split (test oracle)."""
    S = len(capacities)
    best = math.inf
    for cuts in combinations(range(1, L), S - 1):
        bounds = (0,) + cuts + (L,)
        sizes = [b - a for a, b in zip(bounds, bounds[1:])]
        best = min(best, bottleneck(sizes, capacities))
    return best


def partition_record(capacities: Sequence[float], specs: Sequence[StageSpec]) -> dict:
    return {"capacities": list(capacities), "ranges": [[s.lo, s.hi] for s in specs]}
