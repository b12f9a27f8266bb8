# planner/autoscale.py
"""Resource partitioning across sources and mixture-driven autoscaling."""
import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import CapacityError, InvalidConfigError, InvalidInputError
from core.logs import get_logger
from core.model import MIB, SourceSpec
from planner.plan import ScalingAction, ScalingPlan

logger = get_logger(__name__)

DEFAULT_WORKER_CTX_BYTES = 256 * MIB


@dataclass(frozen=True)
class ResourceEnvelope:
    cpu_blocks: int
    memory_bytes: int
    reserved_blocks: int = 0
    reserved_memory: int = 0
    w_src: int = 16
    w_actor: int = 8
    clusters: int = 4
    actor_memory_bytes: Optional[int] = None
    worker_ctx_bytes: int = DEFAULT_WORKER_CTX_BYTES
    buffer_bytes: int = 0

    def __post_init__(self):
        if self.reserved_blocks > self.cpu_blocks or self.reserved_memory > self.memory_bytes:
            raise InvalidConfigError("reservations exceed the envelope totals")
        if min(self.w_src, self.w_actor, self.clusters) < 1:
            raise InvalidConfigError("w_src, w_actor and clusters must be >= 1")

    @property
    def available_blocks(self) -> int:
        return self.cpu_blocks - self.reserved_blocks

    @property
    def available_memory(self) -> int:
        return self.memory_bytes - self.reserved_memory


@dataclass(frozen=True)
class SourceAllocation:
    source_id: int
    actors: int
    workers_per_actor: int
    cluster: int = 0

    @property
    def workers(self) -> int:
        return self.actors * self.workers_per_actor


def actor_memory(spec: SourceSpec, workers_per_actor: int, env: ResourceEnvelope) -> int:
    """Access state once per actor plus per-worker contexts plus the read buffer."""
    return spec.access_state_bytes + workers_per_actor * env.worker_ctx_bytes + env.buffer_bytes


# -----------------------------
# auto_partition
# -----------------------------

def cluster_sources(sources: Sequence[SourceSpec], clusters: int) -> List[List[SourceSpec]]:
    """Sort by transformation cost (heaviest first) and cut into equal-count groups."""
    ordered = sorted(sources, key=lambda s: (-s.transform_cost_per_sample, s.source_id))
    g = min(clusters, len(ordered))
    return [[ordered[i] for i in idx] for idx in np.array_split(np.arange(len(ordered)), g)]


def water_fill(costs: Sequence[float], caps: Sequence[int], budget: int) -> List[int]:
    """Integer worker counts maximizing min(workers_i / cost_i), one block at a time."""
    n = len(costs)
    if budget < n:
        raise CapacityError(f"{budget} worker blocks cannot give {n} sources one worker each",
                            source_id=None)
    workers = [1] * n
    heap = [(1.0 / costs[i], i) for i in range(n) if caps[i] > 1]
    heapq.heapify(heap)
    left = budget - n
    while left > 0 and heap:
        _, i = heapq.heappop(heap)
        workers[i] += 1
        left -= 1
        if workers[i] < caps[i]:
            heapq.heappush(heap, (workers[i] / costs[i], i))
    return workers


def cluster_levels(clusters: List[List[SourceSpec]], w_actor: int) -> List[int]:
    """Workers-per-actor level per cluster.

    The heaviest cluster runs at ``w_actor``; the lightest at ``w_actor`` over
    the ratio of their mean costs. Clusters between are interpolated linearly.
    """
    if len(clusters) == 1:
        return [w_actor]
    heavy = float(np.mean([s.transform_cost_per_sample for s in clusters[0]]))
    light = float(np.mean([s.transform_cost_per_sample for s in clusters[-1]]))
    low = max(1, round(w_actor / (heavy / light)))
    steps = len(clusters) - 1
    return [max(1, round(w_actor + (low - w_actor) * c / steps)) for c in range(len(clusters))]


def _split(workers: int, level: int) -> Tuple[int, int]:
    actors = max(1, math.ceil(workers / level))
    return actors, max(1, workers // actors)


def auto_partition(sources: Sequence[SourceSpec], env: ResourceEnvelope) -> List[SourceAllocation]:
    """Per-source actor count and workers per actor.

    Stage one clusters sources by cost, stage two water-fills worker blocks
    under the per-source cap and derives actor counts from the cluster level,
    stage three adds actors (fewer workers each) until every actor fits its
    memory cap, then sheds workers if the envelope total is exceeded.
    """
    if not sources:
        raise InvalidInputError("auto_partition needs at least one source")
    by_id = {s.source_id: s for s in sources}
    clusters = cluster_sources(sources, env.clusters)
    levels = cluster_levels(clusters, env.w_actor)
    cluster_of = {s.source_id: c for c, members in enumerate(clusters) for s in members}

    ordered = [s for members in clusters for s in members]
    caps = [env.w_src for _ in ordered]
    workers = water_fill([s.transform_cost_per_sample for s in ordered], caps, env.available_blocks)

    allocs: Dict[int, SourceAllocation] = {}
    for spec, w in zip(ordered, workers):
        c = cluster_of[spec.source_id]
        actors, wpa = _split(w, levels[c])
        if env.actor_memory_bytes is not None:
            while actor_memory(spec, wpa, env) > env.actor_memory_bytes:
                if wpa == 1:
                    raise CapacityError(
                        f"source {spec.label} needs {actor_memory(spec, 1, env)} bytes per actor, "
                        f"cap is {env.actor_memory_bytes}", source_id=spec.source_id)
                actors += 1
                wpa = max(1, w // actors)
        allocs[spec.source_id] = SourceAllocation(spec.source_id, actors, wpa, c)

    def total_memory() -> int:
        return sum(a.actors * actor_memory(by_id[s], a.workers_per_actor, env) for s, a in allocs.items())

    while total_memory() > env.available_memory:
        # shed one worker from the allocation holding the most
        sid = min(allocs, key=lambda s: (-allocs[s].workers, -allocs[s].workers_per_actor, s))
        a = allocs[sid]
        if a.workers_per_actor > 1:
            allocs[sid] = replace(a, workers_per_actor=a.workers_per_actor - 1)
        elif a.actors > 1:
            allocs[sid] = replace(a, actors=a.actors - 1)
        else:
            worst = max(allocs, key=lambda s: (actor_memory(by_id[s], 1, env), -s))
            raise CapacityError(f"memory envelope {env.available_memory} cannot host every source at "
                                f"minimum allocation; largest is {by_id[worst].label}", source_id=worst)

    result = [allocs[s.source_id] for s in sources]
    logger.info("auto_partition: %d sources, %d workers of %d blocks", len(result),
                sum(a.workers for a in result), env.available_blocks)
    return result


# -----------------------------
# Mixture-driven scaling
# -----------------------------

@dataclass(frozen=True)
class ScalingParams:
    threshold: float = 0.4
    window: int = 3
    alpha: float = 0.3
    low_threshold: Optional[float] = None
    factor: int = 2

    def __post_init__(self):
        if not 0 < self.alpha <= 1 or self.window < 1 or self.factor < 2:
            raise InvalidConfigError("alpha in (0, 1], window >= 1 and factor >= 2 required")

    @property
    def low(self) -> float:
        return self.threshold / 2 if self.low_threshold is None else self.low_threshold


@dataclass
class MixtureScaler:
    """EMA of each source's sampling weight with a W-check hysteresis."""

    params: ScalingParams
    base: Dict[int, Tuple[int, int]]
    available_blocks: Optional[int] = None
    ema: Dict[int, float] = field(default_factory=dict)
    above: Dict[int, int] = field(default_factory=dict)
    below: Dict[int, int] = field(default_factory=dict)
    current: Dict[int, Tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.current:
            self.current = dict(self.base)

    def _used_blocks(self) -> int:
        return sum(a * w for a, w in self.current.values())

    def observe(self, weights: Sequence[float]) -> Optional[ScalingPlan]:
        p = self.params
        actions: List[ScalingAction] = []
        for s, w in enumerate(weights):
            prev = self.ema.get(s)
            ema = w if prev is None else p.alpha * w + (1 - p.alpha) * prev
            self.ema[s] = ema
            self.above[s] = self.above.get(s, 0) + 1 if ema > p.threshold else 0
            self.below[s] = self.below.get(s, 0) + 1 if ema < p.low else 0
            if s not in self.base:
                continue
            base_actors, wpa = self.base[s]
            actors, _ = self.current[s]
            if self.above[s] >= p.window and actors == base_actors:
                target = base_actors * p.factor
                if self.available_blocks is not None:
                    room = (self.available_blocks - self._used_blocks()) // wpa
                    target = min(target, actors + room)
                if target > actors:
                    self.current[s] = (target, wpa)
                    actions.append(ScalingAction("create", s, target, wpa))
                    actions.append(ScalingAction("reshard", s, target, wpa))
                else:
                    logger.warning("source %d wants to scale out but no worker blocks are free", s)
                self.above[s] = 0
            elif self.below[s] >= p.window and actors > base_actors:
                self.current[s] = (base_actors, wpa)
                actions.append(ScalingAction("reclaim", s, base_actors, wpa))
                actions.append(ScalingAction("reshard", s, base_actors, wpa))
                self.below[s] = 0
        if not actions:
            return None
        targets = tuple((s, a, w) for s, (a, w) in sorted(self.current.items()))
        return ScalingPlan(targets=targets, actions=tuple(actions))

    def state(self) -> Dict:
        return {"ema": dict(self.ema), "above": dict(self.above), "below": dict(self.below),
                "current": {s: list(v) for s, v in self.current.items()}}

    def load_state(self, state: Dict):
        self.ema = {int(k): v for k, v in state["ema"].items()}
        self.above = {int(k): v for k, v in state["above"].items()}
        self.below = {int(k): v for k, v in state["below"].items()}
        self.current = {int(k): tuple(v) for k, v in state["current"].items()}


def mixture_scaling_step(weights_history: Sequence[Sequence[float]], alloc: Sequence[SourceAllocation],
                         params: Optional[ScalingParams] = None) -> Optional[ScalingPlan]:
    """Replay ``weights_history``; the plan emitted by the latest observation, if any."""
    scaler = MixtureScaler(params or ScalingParams(), {a.source_id: (a.actors, a.workers_per_actor) for a in alloc})
    result = None
    for weights in weights_history:
        result = scaler.observe(weights)
    return result
