# planner/planner.py
"""Centralized planner: gathers buffer summaries and turns them into plans."""
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Set, Union

from core.errors import IntegrityError, InvalidInputError
from core.logs import get_logger
from core.model import CostParams, MixSchedule, SampleMeta, mix_weights_at
from dgraph.graph import DGraph
from orchestration.primitives import PlanRequest, Strategy, execute_strategy
from placetree.tree import ClientPlaceTree
from planner.autoscale import MixtureScaler
from planner.plan import BufferSummary, LoadingPlan, parse_loader_key

logger = get_logger(__name__)


class SummarySource(Protocol):
    def summarize_buffer(self) -> BufferSummary:
        ...


def coalesced_latency(loaders: int, fan_in: int, rpc_ticks: int = 1) -> int:
    """Ticks to gather ``loaders`` summaries through a fan-in tree of width ``fan_in``.

    Each aggregator collects its children one after another; ``fan_in`` <= 1
    means the planner calls every loader itself.
    """
    if loaders <= 0:
        return 0
    if fan_in <= 1:
        return loaders * rpc_ticks
    total, width = 0, loaders
    while width > fan_in:
        total += fan_in * rpc_ticks
        width = math.ceil(width / fan_in)
    return total + width * rpc_ticks


@dataclass(frozen=True)
class SummarySet:
    summaries: tuple
    latency: int = 0

    @property
    def population(self) -> List[SampleMeta]:
        return [m for s in self.summaries for m in s.metas]

    @property
    def loader_of(self) -> Dict[int, str]:
        return {m.sample_id: s.loader for s in self.summaries for m in s.metas}

    @property
    def all_eos(self) -> bool:
        return all(s.eos for s in self.summaries)

    def __len__(self) -> int:
        return sum(len(s) for s in self.summaries)


def _ordered(summaries: Sequence[BufferSummary]) -> tuple:
    return tuple(sorted(summaries, key=lambda s: parse_loader_key(s.loader)))


# -----------------------------
# Planner
# -----------------------------

RawPlanFn = Callable[[List[SampleMeta], int, int], LoadingPlan]


class Planner:
    def __init__(self, strategy: Strategy, schedule: MixSchedule, tree: ClientPlaceTree, seed: int = 0,
                 batch_size: Optional[int] = None, cost_params: Optional[CostParams] = None,
                 granularity: str = "dp", fan_in: int = 4, rpc_ticks: int = 1,
                 scaler: Optional[MixtureScaler] = None):
        self.strategy = strategy
        self.schedule = schedule
        self.tree = tree
        self.seed = seed
        self.batch_size = batch_size
        self.cost_params = cost_params
        self.granularity = granularity
        self.fan_in = fan_in
        self.rpc_ticks = rpc_ticks
        self.scaler = scaler
        self.last_plan_id = 0
        self.last_step = -1
        self.popped: Set[int] = set()
        self.graphs: List[DGraph] = []

    # --- summaries ---

    def gather_buffer_summaries(self, loaders: Sequence[SummarySource]) -> SummarySet:
        """Collect every loader's summary; a loader timeout propagates to the runtime."""
        collected = [loader.summarize_buffer() for loader in loaders]
        seen: Set[int] = set()
        for s in collected:
            for sid in s.sample_ids:
                if sid in seen:
                    raise IntegrityError(f"sample {sid} reported by two loaders")
                seen.add(sid)
        return SummarySet(_ordered(collected), coalesced_latency(len(collected), self.fan_in, self.rpc_ticks))

    def summary_buffer(self, loaders: Sequence[SummarySource]) -> List[SampleMeta]:
        return self.gather_buffer_summaries(loaders).population

    # --- plans ---

    def _as_set(self, summaries: Union[SummarySet, Sequence[BufferSummary]]) -> SummarySet:
        return summaries if isinstance(summaries, SummarySet) else SummarySet(_ordered(summaries))

    def _scaling_for(self, step: int):
        if self.scaler is None or step >= self.schedule.total_steps:
            return None
        plan = self.scaler.observe(mix_weights_at(self.schedule, self.schedule.index_for(step)))
        if plan is not None:
            for a in plan.actions:
                logger.info("scaling step %d: %s source %d -> %d actors x %d workers", step, a.kind,
                            a.source_id, a.actors, a.workers_per_actor)
        return plan

    def _register(self, plan: LoadingPlan, known: Optional[Set[int]] = None):
        if plan.plan_id <= self.last_plan_id:
            raise IntegrityError(f"plan id {plan.plan_id} does not follow {self.last_plan_id}")
        pops = plan.popped_ids()
        if known is not None:
            stray = [sid for sid in pops if sid not in known]
            if stray:
                raise IntegrityError(f"plan {plan.plan_id} pops unsummarized samples {stray[:8]}")
        repeated = [sid for sid in pops if sid in self.popped]
        if repeated:
            raise IntegrityError(f"plan {plan.plan_id} pops samples already planned: {repeated[:8]}")
        self.popped.update(pops)
        self.last_plan_id = plan.plan_id
        self.last_step = plan.step

    def generate_plan(self, summaries: Union[SummarySet, Sequence[BufferSummary]], step: int,
                      strategy: Optional[Strategy] = None, substep: int = 0) -> LoadingPlan:
        s = self._as_set(summaries)
        plan_id = self.last_plan_id + 1
        scaling = self._scaling_for(step)
        population = s.population
        if not population:
            logger.warning("step %d: every buffer is empty, emitting an empty plan", step)
            self.graphs = []
            plan = LoadingPlan(plan_id=plan_id, step=step, scaling=scaling)
        else:
            request = PlanRequest(
                summaries=population, schedule=self.schedule, tree=self.tree, step=step, plan_id=plan_id,
                seed=self.seed, batch_size=self.batch_size, cost_params=self.cost_params,
                loader_of=s.loader_of, granularity=self.granularity, substep=substep, scaling=scaling,
            )
            self.graphs, plan = execute_strategy(strategy or self.strategy, request)
        self._register(plan, {m.sample_id for m in population})
        logger.info("plan %d for step %d: %d samples from %d loaders", plan_id, step,
                    len(plan.owners), len(plan.pop_lists))
        return plan

    def plan_raw(self, summaries: Union[SummarySet, Sequence[BufferSummary]], step: int,
                 fn: RawPlanFn) -> LoadingPlan:
        """Let ``fn(population, plan_id, step)`` emit the plan; the planner only validates it."""
        s = self._as_set(summaries)
        population = s.population
        plan = fn(population, self.last_plan_id + 1, step)
        if not isinstance(plan, LoadingPlan):
            raise InvalidInputError(f"plan_raw hook returned {type(plan).__name__}, not LoadingPlan")
        self._register(plan, {m.sample_id for m in population})
        return plan

    def plan_resident(self, metas: Sequence[SampleMeta], step: int) -> LoadingPlan:
        """Re-plan samples already held by constructors against the current tree; pops nothing."""
        plan_id = self.last_plan_id + 1
        if not metas:
            plan = LoadingPlan(plan_id=plan_id, step=step, resident=True)
        else:
            request = PlanRequest(
                summaries=list(metas), schedule=self.schedule, tree=self.tree, step=step, plan_id=plan_id,
                seed=self.seed, cost_params=self.cost_params, granularity=self.granularity, take_all=True,
            )
            self.graphs, planned = execute_strategy(self.strategy, request)
            plan = replace(planned, pop_lists={}, resident=True)
        self._register(plan)
        logger.info("resident plan %d: %d samples re-placed", plan_id, len(plan.owners))
        return plan

    def set_tree(self, tree: ClientPlaceTree):
        self.tree = tree

    def new_epoch(self):
        self.popped.clear()

    # --- checkpoint ---

    def checkpoint(self) -> Dict[str, Any]:
        return {
            "plan_id": self.last_plan_id,
            "step": self.last_step,
            "seed": self.seed,
            "popped": sorted(self.popped),
            "parallelism": list(self.tree.config.sizes) + [self.tree.config.num_microbatches],
            "scaler": self.scaler.state() if self.scaler else None,
        }

    def restore(self, state: Dict[str, Any]):
        self.last_plan_id = state["plan_id"]
        self.last_step = state["step"]
        self.seed = state["seed"]
        self.popped = set(state["popped"])
        if self.scaler is not None and state.get("scaler"):
            self.scaler.load_state(state["scaler"])

    def observe_plan(self, plan: LoadingPlan):
        """Advance state with a plan read back from the plan log."""
        self._register(plan)
        if self.scaler is not None and plan.step < self.schedule.total_steps and not plan.resident:
            self.scaler.observe(mix_weights_at(self.schedule, self.schedule.index_for(plan.step)))
