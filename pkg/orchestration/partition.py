# orchestration/partition.py
"""Number partitioning used by ``balance``.

Partitioners take ``(id, cost)`` items and a bin count and return ``k`` lists
of ids. Ties always resolve toward the lowest index.
"""
import heapq
import itertools
import math
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import BatchShapeError, IntegrityError, InvalidInputError
from core.logs import get_logger

logger = get_logger(__name__)

Item = Tuple[Hashable, float]
Partition = List[List[Hashable]]
Partitioner = Callable[[Sequence[Item], int], Partition]


def _normalize(items: Sequence[Item]) -> List[Item]:
    out = []
    for iid, cost in items:
        c = float(cost)
        if c < 0 or math.isnan(c) or math.isinf(c):
            raise InvalidInputError(f"item {iid!r} has invalid cost {cost!r}")
        out.append((iid, c))
    return out


def bin_loads(partition: Partition, costs: Dict[Hashable, float]) -> List[float]:
    return [math.fsum(costs[i] for i in b) for b in partition]


# -----------------------------
# Greedy (longest processing time first)
# -----------------------------

def greedy_binpack(items: Sequence[Item], k: int, capacity: Optional[int] = None) -> Partition:
    """Sort by cost descending and place each item into the lightest open bin.

    ``capacity`` bounds the item count per bin (fixed batch shapes).
    """
    if k <= 0:
        raise InvalidInputError(f"bin count must be >= 1, got {k}")
    norm = _normalize(items)
    if capacity is not None and len(norm) > k * capacity:
        raise BatchShapeError(f"{len(norm)} items do not fit {k} bins of {capacity}")
    order = sorted(range(len(norm)), key=lambda i: (-norm[i][1], i))
    bins: Partition = [[] for _ in range(k)]
    heap = [(0.0, b) for b in range(k)]
    for i in order:
        load, b = heapq.heappop(heap)
        bins[b].append(norm[i][0])
        if capacity is None or len(bins[b]) < capacity:
            heapq.heappush(heap, (load + norm[i][1], b))
    return bins


# -----------------------------
# Karmarkar-Karp (largest differencing method)
# -----------------------------

def karmarkar_karp(items: Sequence[Item], k: int) -> Partition:
    """Tuple-based multiway LDM; reduces to plain differencing when k == 2.

    Every item starts as a k-tuple with the item alone in one subset. The two
    tuples with the largest spread are merged by pairing the heaviest subset
    of one with the lightest of the other, until one tuple remains.
    """
    if k < 2:
        raise InvalidInputError(f"karmarkar_karp needs k >= 2, got {k}")
    norm = _normalize(items)
    if not norm:
        return [[] for _ in range(k)]
    heap = []
    for idx, (_, c) in enumerate(norm):
        subsets = [(c, [idx])] + [(0.0, []) for _ in range(k - 1)]
        heapq.heappush(heap, (-c, idx, subsets))
    seq = len(norm)
    while len(heap) > 1:
        _, _, a = heapq.heappop(heap)
        _, _, b = heapq.heappop(heap)
        merged = [(la + lb, ia + ib) for (la, ia), (lb, ib) in zip(a, reversed(b))]
        merged.sort(key=lambda s: -s[0])
        spread = merged[0][0] - merged[-1][0]
        heapq.heappush(heap, (-spread, seq, merged))
        seq += 1
    final = heap[0][2]
    return [[norm[i][0] for i in sorted(ids)] for _, ids in final]


# -----------------------------
# Layout without balancing
# -----------------------------

def sequential_layout(items: Sequence[Item], k: int) -> Partition:
    """Contiguous near-equal chunks in input order, the unbalanced baseline."""
    if k <= 0:
        raise InvalidInputError(f"bin count must be >= 1, got {k}")
    ids = [iid for iid, _ in _normalize(items)]
    n = len(ids)
    sizes = [n // k + (1 if b < n % k else 0) for b in range(k)]
    out, start = [], 0
    for size in sizes:
        out.append(ids[start:start + size])
        start += size
    return out


# -----------------------------
# Exhaustive oracles (small n)
# -----------------------------

def optimal_two_way_difference(costs: Sequence[float]) -> float:
    c = np.asarray(costs, dtype=np.float64)
    n = len(c)
    if n == 0:
        return 0.0
    if n > 24:
        raise InvalidInputError("exhaustive search limited to 24 items")
    # the last item sits in the second set, halving the search
    masks = np.arange(1 << (n - 1), dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n - 1, dtype=np.int64)) & 1
    sums = bits @ c[:-1] if n > 1 else np.zeros(1)
    return float(np.min(np.abs(c.sum() - 2.0 * sums)))


def optimal_max_load(costs: Sequence[float], k: int) -> float:
    c = [float(x) for x in costs]
    if not c:
        return 0.0
    if len(c) > 14:
        raise InvalidInputError("exhaustive search limited to 14 items")
    best = math.inf
    for tail in itertools.product(range(k), repeat=len(c) - 1):
        loads = [0.0] * k
        loads[0] = c[0]
        for cost, b in zip(c[1:], tail):
            loads[b] += cost
        best = min(best, max(loads))
    return best


# -----------------------------
# Registry
# -----------------------------

PARTITIONERS: Dict[str, Partitioner] = {
    "greedy": greedy_binpack,
    "karmarkar_karp": karmarkar_karp,
    "sequential": sequential_layout,
}
ALIASES = {"kk": "karmarkar_karp", "karmarkar-karp": "karmarkar_karp", "none": "sequential",
           "greedybinpacking": "greedy"}


def register_partitioner(name: str, fn: Partitioner):
    """Extension point for custom balancers (interleaved, zig-zag, ...)."""
    PARTITIONERS[name] = fn


def resolve_method(method: str) -> str:
    name = ALIASES.get(method, method)
    if name not in PARTITIONERS:
        raise InvalidInputError(f"unknown balance method {method!r}")
    return name


def run_partitioner(method: str, items: Sequence[Item], k: int, capacity: Optional[int] = None) -> Partition:
    """Dispatch with the shared edge cases and a conservation check."""
    name = resolve_method(method)
    if k == 1:
        if capacity is not None and len(items) > capacity:
            raise BatchShapeError(f"{len(items)} items exceed a single bin of {capacity}")
        result = [[iid for iid, _ in _normalize(items)]]
    elif capacity is not None and name != "sequential":
        if name != "greedy":
            logger.debug("fixed batch shape requested; %s falls back to capacity-bounded greedy", name)
        result = greedy_binpack(items, k, capacity)
    else:
        result = PARTITIONERS[name](items, k)
    if len(result) != k:
        raise IntegrityError(f"partitioner {name} returned {len(result)} bins, expected {k}")
    produced = sorted(map(repr, (i for b in result for i in b)))
    expected = sorted(map(repr, (iid for iid, _ in items)))
    if produced != expected:
        raise IntegrityError(f"partitioner {name} lost or duplicated items")
    return result
