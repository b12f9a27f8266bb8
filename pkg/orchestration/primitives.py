# orchestration/primitives.py
"""Orchestration primitives and declarative strategies.

A strategy is an ordered pipeline of primitives per modality graph:

    mix -> distribute -> cost -> balance -> [broadcast_at] -> plan

Each primitive takes a DGraph, mutates it, and returns it. ``plan`` folds
every graph of one step into a single LoadingPlan.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import (BatchShapeError, IncompletePlanError, IntegrityError, InvalidConfigError,
                         InvalidInputError)
from core.logs import get_logger
from core.model import CostParams, MixSchedule, SampleMeta, backbone_cost, encoder_cost, mix_weights_at
from dgraph.graph import DGraph, Selector, State, bind_consumers, init_from_buffer
from orchestration.partition import resolve_method, run_partitioner
from placetree.tree import (BucketSet, ClientPlaceTree, check_bucket_axis, consumers_after_broadcast,
                            constructor_of_rank, fetch_buckets)
from planner.plan import BinAssignment, LoadingPlan, ScalingPlan, loader_key

logger = get_logger(__name__)


# -----------------------------
# mix
# -----------------------------

def largest_remainder(weights: Sequence[float], total: int) -> List[int]:
    """Integer shares of ``total`` proportional to ``weights``; ties go to the lowest index."""
    wsum = math.fsum(weights)
    if total <= 0 or wsum <= 0:
        return [0] * len(weights)
    raw = [w * total / wsum for w in weights]
    shares = [int(math.floor(r)) for r in raw]
    left = total - sum(shares)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - shares[i]), i))
    for i in order[:left]:
        shares[i] += 1
    return shares


def quota_counts(weights: Sequence[float], available: Sequence[int], batch_size: int) -> List[int]:
    """Exact per-source counts for one step.

    Shortfall from under-buffered sources moves to positive-weight sources
    that still have samples.
    """
    quotas = largest_remainder(weights, batch_size)
    quotas = [min(q, a) for q, a in zip(quotas, available)]
    deficit = batch_size - sum(quotas)
    while deficit > 0:
        open_ = [i for i, w in enumerate(weights) if w > 0 and quotas[i] < available[i]]
        if not open_:
            break
        extra = largest_remainder([weights[i] for i in open_], deficit)
        moved = 0
        for i, e in zip(open_, extra):
            take = min(e, available[i] - quotas[i])
            quotas[i] += take
            moved += take
        if moved == 0:
            # shares rounded to zero everywhere; hand one to the heaviest open source
            heaviest = min(open_, key=lambda i: (-weights[i], i))
            quotas[heaviest] += 1
            moved = 1
        deficit -= moved
    return quotas


def bernoulli_draw(seed: int, step: int, source_id: int, sample_id: int) -> float:
    return float(np.random.default_rng([seed, step, source_id, sample_id]).random())


def select_samples(population: Sequence[SampleMeta], weights: Sequence[float], step: int, rng_seed: int,
                   batch_size: Optional[int] = None) -> List[int]:
    """Sample ids chosen for ``step`` out of ``population`` (buffer order).

    With ``batch_size`` the draw is quota based: exact per-source counts, FIFO
    within a source. Without it every sample is an independent Bernoulli
    trial with its source weight, keyed by (seed, step, source, sample).
    """
    for meta in population:
        if meta.source_id >= len(weights):
            raise InvalidInputError(f"sample {meta.sample_id} from source {meta.source_id} "
                                    f"but weights cover {len(weights)} sources")
    if batch_size is None:
        return [m.sample_id for m in population
                if weights[m.source_id] > 0
                and bernoulli_draw(rng_seed, step, m.source_id, m.sample_id) < weights[m.source_id]]
    if batch_size < 0:
        raise InvalidInputError(f"batch_size must be >= 0, got {batch_size}")
    by_source: Dict[int, List[int]] = {}
    for meta in population:
        by_source.setdefault(meta.source_id, []).append(meta.sample_id)
    available = [len(by_source.get(s, ())) for s in range(len(weights))]
    counts = quota_counts(weights, available, batch_size)
    if sum(counts) < batch_size:
        logger.warning("step %d: buffers hold %d eligible samples for a batch of %d",
                       step, sum(counts), batch_size)
    chosen = set()
    for s, n in enumerate(counts):
        chosen.update(by_source.get(s, [])[:n])
    return [m.sample_id for m in population if m.sample_id in chosen]


def mix(g: DGraph, schedule: MixSchedule, step: int, rng_seed: int, batch_size: Optional[int] = None,
        num_sources: Optional[int] = None, population: Optional[Sequence[SampleMeta]] = None,
        substep: int = 0) -> DGraph:
    """Advance the samples selected for ``step`` to ``sampled``; the rest stay ``buffered``.

    ``population`` is the full buffer the selection is drawn from; passing the
    same population to every modality graph keeps their selections aligned.
    """
    if g.samples_at_least(State.SAMPLED):
        raise IntegrityError(f"mix on graph {g.name!r} expects every node buffered")
    weights = mix_weights_at(schedule, schedule.index_for(step, substep))
    if num_sources is not None and len(weights) != num_sources:
        raise InvalidInputError(f"weight vector has {len(weights)} entries for {num_sources} sources")
    pool = list(population) if population is not None else [g.meta(s) for s in g.sample_ids]
    selected = select_samples(pool, weights, step, rng_seed, batch_size)
    with g.mutation():
        for sid in selected:
            if sid in g.metas:
                g.advance(sid, State.SAMPLED, producer="mix", step_tag=step)
    g.context.update(step=step, weights=tuple(weights))
    logger.debug("mix %s step %d: %d of %d sampled", g.name, step, len(g.samples_in(State.SAMPLED)), len(g))
    return g


def sample_all(g: DGraph, step: int) -> DGraph:
    """Select every buffered sample; used when re-planning resident data."""
    with g.mutation():
        for sid in g.samples_in(State.BUFFERED):
            g.advance(sid, State.SAMPLED, producer="mix", step_tag=step)
    g.context["step"] = step
    return g


# -----------------------------
# distribute
# -----------------------------

@dataclass(frozen=True)
class ParallelismTransform:
    """Transformations the constructors apply for data distributed along ``axis``."""

    axis: str
    cp_split: bool = False
    tp_replicate: bool = False
    pp_stub: bool = False

    def names(self) -> Tuple[str, ...]:
        out = []
        if self.cp_split:
            out.append("cp_split")
        if self.tp_replicate:
            out.append("tp_replicate")
        if self.pp_stub:
            out.append("pp_stub")
        return tuple(out)


def transform_for_axis(tree: ClientPlaceTree, axis: str) -> ParallelismTransform:
    cfg = tree.config
    return ParallelismTransform(
        axis=axis,
        cp_split=cfg.cp > 1 and axis in ("PP", "DP"),
        tp_replicate=cfg.tp > 1 and axis != "WORLD",
        pp_stub=cfg.pp > 1 and axis not in ("WORLD", "PP"),
    )


def distribute(g: DGraph, tree: ClientPlaceTree, axis: str, group_size: int = 1) -> DGraph:
    key = check_bucket_axis(axis)
    if g.samples_at_least(State.BUCKETED):
        raise IntegrityError(f"graph {g.name!r} was already distributed")
    buckets = fetch_buckets(tree, key, group_size)
    with g.mutation():
        for sid in g.samples_in(State.SAMPLED):
            g.advance(sid, State.BUCKETED, producer="distribute", axis=key)
    g.context.update(tree=tree, axis=key, buckets=buckets, transform=transform_for_axis(tree, key))
    logger.debug("distribute %s along %s: %d buckets", g.name, key, len(buckets))
    return g


# -----------------------------
# cost
# -----------------------------

CostFn = Callable[[SampleMeta], float]
CostFactory = Callable[[Optional[CostParams]], CostFn]


def _backbone(params: Optional[CostParams]) -> CostFn:
    if params is None:
        raise InvalidConfigError("backbone cost needs backbone parameters")
    return lambda m: backbone_cost([m.total_tokens], params.backbone)


def _encoder(params: Optional[CostParams]) -> CostFn:
    if params is None or params.encoder is None:
        raise InvalidConfigError("encoder cost needs encoder parameters")
    return lambda m: encoder_cost([m.image_patches], params.encoder)


COST_FUNCTIONS: Dict[str, CostFactory] = {
    "backbone": _backbone,
    "encoder": _encoder,
    "text_len": lambda p: lambda m: float(m.text_len),
    "tokens": lambda p: lambda m: float(m.total_tokens),
    "quadratic": lambda p: lambda m: float(m.total_tokens) ** 2,
    "const": lambda p: lambda m: 1.0,
}


def register_costfn(name: str, factory: CostFactory):
    COST_FUNCTIONS[name] = factory


def make_costfn(name: str, params: Optional[CostParams] = None) -> CostFn:
    try:
        factory = COST_FUNCTIONS[name]
    except KeyError:
        raise InvalidInputError(f"unknown cost function {name!r}") from None
    return factory(params)


def cost(g: DGraph, costfn: Union[str, CostFn], params: Optional[CostParams] = None) -> DGraph:
    fn = make_costfn(costfn, params) if isinstance(costfn, str) else costfn
    for sid in g.sample_ids:
        value = float(fn(g.meta(sid)))
        if value < 0 or math.isnan(value):
            raise InvalidInputError(f"cost function returned {value} for sample {sid}")
        g.annotate(sid, cost=value)
    g.context["costfn"] = costfn if isinstance(costfn, str) else getattr(costfn, "__name__", "custom")
    return g


# -----------------------------
# balance
# -----------------------------

@dataclass(frozen=True)
class Bin:
    bin_id: int  # microbatch index on its node
    bucket_id: int
    node: int
    members: Tuple[int, ...]
    cost: float

    @property
    def key(self) -> str:
        return f"{self.node}/{self.bin_id}"


def _snake(k: int, n_nodes: int) -> List[Tuple[int, int]]:
    """(node position, microbatch) for the i-th heaviest of ``k`` bins."""
    out = []
    for i in range(k):
        rnd, pos = divmod(i, n_nodes)
        if rnd % 2 == 1:
            pos = n_nodes - 1 - pos
        out.append((pos, rnd))
    return out


def _layout_bins(method: str, items: List[Tuple[int, float]], nodes: Sequence[int], m: int,
                 capacity: Optional[int]) -> Dict[Tuple[int, int], List[int]]:
    k = len(nodes) * m
    part = run_partitioner(method, items, k, capacity)
    if method == "sequential":
        return {(nodes[j // m], j % m): part[j] for j in range(k)}
    costs = dict(items)
    loads = [math.fsum(costs[i] for i in b) for b in part]
    order = sorted(range(k), key=lambda j: (-loads[j], j))
    placed = {}
    for j, (pos, mb) in zip(order, _snake(k, len(nodes))):
        placed[(nodes[pos], mb)] = part[j]
    return placed


def balance(g: DGraph, method: str = "karmarkar_karp", m: Optional[int] = None, intra_reorder: bool = True,
            strict_batch: bool = False) -> DGraph:
    """Split bucketed samples into ``m`` microbatch bins per node.

    Inter-bucket partitioning runs first, then each bucket is split across its
    nodes and microbatches. With ``intra_reorder`` off the original
    microbatches (contiguous in buffer order) are kept whole and only moved
    between nodes.
    """
    buckets: Optional[BucketSet] = g.context.get("buckets")
    if buckets is None:
        raise IncompletePlanError(f"balance on graph {g.name!r} before distribute")
    name = resolve_method(method)
    tree: ClientPlaceTree = g.context["tree"]
    m = m or tree.config.num_microbatches
    if m < 1:
        raise InvalidInputError(f"microbatch count must be >= 1, got {m}")
    sids = g.samples_in(State.BUCKETED)
    position = {sid: i for i, sid in enumerate(g.sample_ids)}
    items = []
    for sid in sids:
        c = g.annotation(sid, "cost")
        if c is None:
            raise IncompletePlanError(f"sample {sid} has no cost; cost() must precede balance()")
        items.append((sid, c))
    n_nodes = len(buckets.nodes)
    node_bucket = {n: b for b, group in enumerate(buckets.bucket_nodes) for n in group}

    if strict_batch and len(items) % (n_nodes * m):
        raise BatchShapeError(f"{len(items)} samples do not split into {n_nodes} nodes x {m} microbatches")
    per_bin = len(items) // (n_nodes * m) if strict_batch else None

    placed: Dict[Tuple[int, int], List[int]] = {}
    if not intra_reorder:
        original = run_partitioner("sequential", items, n_nodes * m)
        costs = dict(items)
        mb_items = [(j, math.fsum(costs[s] for s in b)) for j, b in enumerate(original)]
        mb_method = "sequential" if name == "sequential" else "greedy"
        per_node = run_partitioner(mb_method, mb_items, n_nodes, capacity=m)
        for node, mbs in enumerate(per_node):
            for slot, j in enumerate(sorted(mbs)):
                placed[(node, slot)] = original[j]
    else:
        groups = [list(group) for group in buckets.bucket_nodes]
        sizes = [len(group) for group in groups]
        cap = None
        if strict_batch:
            cap = per_bin * m
        if len(groups) == 1:
            split = [[sid for sid, _ in items]]
        else:
            split = _split_buckets(name, items, sizes, cap)
        costs = dict(items)
        for group, members in zip(groups, split):
            bucket_items = [(sid, costs[sid]) for sid in members]
            placed.update(_layout_bins(name, bucket_items, group, m, per_bin))

    bins = []
    with g.mutation():
        for node in range(n_nodes):
            for mb in range(m):
                members = sorted(placed.get((node, mb), []), key=position.__getitem__)
                b = Bin(bin_id=mb, bucket_id=node_bucket[node], node=node, members=tuple(members),
                        cost=math.fsum(g.annotation(s, "cost") for s in members))
                for sid in members:
                    g.advance(sid, State.BINNED, producer="balance", bin=b.key, bucket=b.bucket_id,
                              node=node, microbatch=mb)
                g.add_group(f"bin:{b.key}", members, producer="balance", cost=b.cost)
                bins.append(b)
    g.context.update(bins=bins, method=name, microbatches=m, intra_reorder=intra_reorder)
    logger.debug("balance %s with %s: %d bins, max %.4g", g.name, name, len(bins),
                 max((b.cost for b in bins), default=0.0))
    return g


def _split_buckets(method: str, items: List[Tuple[int, float]], sizes: Sequence[int],
                   cap_per_node: Optional[int]) -> List[List[int]]:
    """Inter-bucket level: one part per bucket, buckets with more nodes get more parts."""
    slots = [b for b, size in enumerate(sizes) for _ in range(size)]
    part = run_partitioner(method, items, len(slots), cap_per_node)
    out: List[List[int]] = [[] for _ in sizes]
    for b, members in zip(slots, part):
        out[b].extend(members)
    return out


def bins_of(g: DGraph) -> List[Bin]:
    return list(g.context.get("bins", ()))


# -----------------------------
# broadcast_at / plan
# -----------------------------

def broadcast_at(g: DGraph, tree: ClientPlaceTree, target_dim: Union[str, Sequence[str]]) -> DGraph:
    """Exclude non-root ranks along ``target_dim`` from fetching; repeated calls intersect."""
    dims = (target_dim,) if isinstance(target_dim, str) else tuple(target_dim)
    merged = tuple(g.context.get("broadcast_dims", ())) + tuple(d.upper() for d in dims)
    consumers = consumers_after_broadcast(tree, merged)
    g.context.update(broadcast_dims=merged, consumers=consumers)
    return g


def plan(graphs: Union[DGraph, Sequence[DGraph]], plan_id: int, step: int, granularity: str = "dp",
         loader_of: Optional[Mapping[int, str]] = None, scaling: Optional[ScalingPlan] = None,
         primary: Optional[str] = None) -> LoadingPlan:
    """Fold binned graphs into a LoadingPlan and bind every binned sample to its constructor."""
    graphs = [graphs] if isinstance(graphs, DGraph) else list(graphs)
    if not graphs:
        raise InvalidInputError("plan needs at least one graph")
    names = [g.name for g in graphs]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"graph names must be unique: {names}")
    primary = primary or ("sequence" if "sequence" in names else names[0])

    assignments: Dict[int, List[BinAssignment]] = {}
    transforms: Dict[str, Tuple[str, ...]] = {}
    consumers: Dict[str, Tuple[int, ...]] = {}
    owners: Dict[int, int] = {}
    for g in graphs:
        pending = g.samples_in(State.SAMPLED) + g.samples_in(State.BUCKETED)
        if pending:
            raise IncompletePlanError(f"graph {g.name!r} has unbinned samples {pending[:8]}")
        if "bins" not in g.context:
            raise IncompletePlanError(f"graph {g.name!r} was never balanced")
        tree: ClientPlaceTree = g.context["tree"]
        buckets: BucketSet = g.context["buckets"]
        binding: Dict[int, int] = {}
        for b in bins_of(g):
            leaves = buckets.nodes[b.node]
            cons = constructor_of_rank(tree, leaves[0], granularity)
            assignments.setdefault(cons, []).append(BinAssignment(
                graph=g.name, node=b.node, bucket=b.bucket_id, microbatch=b.bin_id, members=b.members,
                cost=b.cost, leaves=tuple(leaves), constructor=cons,
            ))
            for sid in b.members:
                binding[sid] = cons
        bind_consumers(g, binding)
        if g.name == primary:
            owners.update(binding)
        else:
            for sid, cons in binding.items():
                owners.setdefault(sid, cons)
        transforms[g.name] = g.context["transform"].names() + tuple(
            f"broadcast:{d}" for d in g.context.get("broadcast_dims", ()))
        default_consumers = {r for leaves in buckets.nodes for r in leaves}
        consumers[g.name] = tuple(sorted(g.context.get("consumers", default_consumers)))

    primary_graph = graphs[names.index(primary)]

    pop_lists: Dict[str, List[int]] = {}
    seen = set()
    for g in [primary_graph] + [g for g in graphs if g is not primary_graph]:
        for sid in g.sample_ids:
            if sid in owners and sid not in seen:
                seen.add(sid)
                key = loader_of[sid] if loader_of and sid in loader_of else loader_key(g.meta(sid).source_id)
                pop_lists.setdefault(key, []).append(sid)

    result = LoadingPlan(
        plan_id=plan_id,
        step=step,
        pop_lists={k: tuple(v) for k, v in pop_lists.items()},
        assignments={c: tuple(sorted(bins, key=lambda a: (a.graph, a.node, a.microbatch)))
                     for c, bins in assignments.items()},
        transforms=transforms,
        consumers=consumers,
        owners=owners,
        primary=primary,
        scaling=scaling,
    )
    logger.debug("plan %d step %d: %d pops over %d loaders", plan_id, step, len(owners), len(pop_lists))
    return result


# -----------------------------
# Strategies
# -----------------------------

PRIMITIVES = ("mix", "distribute", "cost", "balance", "broadcast_at", "plan")


@dataclass(frozen=True)
class Op:
    name: str
    args: Dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        return self.args.get(key, default)


@dataclass(frozen=True)
class Pipeline:
    modality: str
    selector: Selector
    ops: Tuple[Op, ...]

    def __post_init__(self):
        names = [op.name for op in self.ops]
        unknown = [n for n in names if n not in PRIMITIVES]
        if unknown:
            raise InvalidConfigError(f"pipeline {self.modality!r}: unknown primitives {unknown}")
        if not names or names[-1] != "plan" or names.count("plan") != 1:
            raise InvalidConfigError(f"pipeline {self.modality!r} must end with a single plan()")
        for first, then in (("mix", "distribute"), ("distribute", "balance"), ("cost", "balance")):
            if then in names and (first not in names or names.index(first) > names.index(then)):
                raise InvalidConfigError(f"pipeline {self.modality!r}: {first}() must precede {then}()")


@dataclass(frozen=True)
class Strategy:
    name: str
    pipelines: Tuple[Pipeline, ...]

    def __post_init__(self):
        modalities = [p.modality for p in self.pipelines]
        if len(set(modalities)) != len(modalities):
            raise InvalidConfigError(f"strategy {self.name!r} repeats a modality: {modalities}")

    def compose(self, other: "Strategy", name: Optional[str] = None) -> "Strategy":
        return Strategy(name or f"{self.name}+{other.name}", self.pipelines + other.pipelines)


def backbone_pipeline(method: str = "karmarkar_karp", intra_reorder: bool = True, axis: str = "DP",
                      group_size: int = 1, costfn: str = "backbone") -> Pipeline:
    return Pipeline("sequence", None, (
        Op("mix"),
        Op("distribute", {"axis": axis, "group_size": group_size}),
        Op("cost", {"costfn": costfn}),
        Op("balance", {"method": method, "intra_reorder": intra_reorder}),
        Op("broadcast_at", {"target_dim": "TP"}),
        Op("plan"),
    ))


def encoder_pipeline(method: str = "karmarkar_karp", group_size: int = 1) -> Pipeline:
    return Pipeline("image", "image_patches", (
        Op("mix"),
        Op("distribute", {"axis": "WORLD", "group_size": group_size}),
        Op("cost", {"costfn": "encoder"}),
        Op("balance", {"method": method}),
        Op("plan"),
    ))


def preset_strategy(name: str) -> Strategy:
    backbone = lambda **kw: Strategy("backbone", (backbone_pipeline(**kw),))
    encoder = lambda **kw: Strategy("encoder", (encoder_pipeline(**kw),))
    presets = {
        "vanilla": lambda: backbone(method="sequential"),
        "backbone_balance": lambda: backbone(),
        "encoder_balance": lambda: encoder().compose(backbone(method="sequential")),
        "hybrid_balance": lambda: encoder().compose(backbone()),
        "hybrid_balance_conservative": lambda: encoder().compose(backbone(intra_reorder=False)),
    }
    if name not in presets:
        raise InvalidConfigError(f"unknown strategy {name!r}; presets: {sorted(presets)}")
    return Strategy(name, presets[name]().pipelines)


STRATEGY_PRESETS = ("vanilla", "backbone_balance", "encoder_balance", "hybrid_balance",
                    "hybrid_balance_conservative")


def strategy_from_config(spec: Union[str, Mapping[str, Any]]) -> Strategy:
    """Preset name, or ``{name, pipelines: [{modality, selector, ops: [{op, ...}]}]}``."""
    if isinstance(spec, str):
        return preset_strategy(spec)
    try:
        pipelines = []
        for p in spec["pipelines"]:
            ops = tuple(Op(o["op"], {k: v for k, v in o.items() if k != "op"}) for o in p["ops"])
            pipelines.append(Pipeline(p["modality"], p.get("selector"), ops))
    except (KeyError, TypeError) as exc:
        raise InvalidConfigError(f"malformed strategy: {exc}") from exc
    return Strategy(spec.get("name", "custom"), tuple(pipelines))


@dataclass
class PlanRequest:
    """Inputs of one plan synthesis: the buffer population and the step context."""

    summaries: Sequence[SampleMeta]
    schedule: MixSchedule
    tree: ClientPlaceTree
    step: int
    plan_id: int
    seed: int = 0
    batch_size: Optional[int] = None
    cost_params: Optional[CostParams] = None
    loader_of: Optional[Mapping[int, str]] = None
    granularity: str = "dp"
    substep: int = 0
    scaling: Optional[ScalingPlan] = None
    take_all: bool = False


def run_pipeline(pipeline: Pipeline, request: PlanRequest) -> DGraph:
    g = init_from_buffer(request.summaries, pipeline.selector, name=pipeline.modality)
    for op in pipeline.ops:
        if op.name == "mix" and request.take_all:
            sample_all(g, request.step)
        elif op.name == "mix":
            mix(g, request.schedule, request.step, request.seed,
                batch_size=op.get("batch_size", request.batch_size),
                population=request.summaries, substep=request.substep)
        elif op.name == "distribute":
            distribute(g, request.tree, op.get("axis", "DP"), op.get("group_size", 1))
        elif op.name == "cost":
            cost(g, op.get("costfn", "tokens"), request.cost_params)
        elif op.name == "balance":
            balance(g, op.get("method", "karmarkar_karp"), op.get("m"), op.get("intra_reorder", True),
                    op.get("strict_batch", False))
        elif op.name == "broadcast_at":
            broadcast_at(g, request.tree, op.get("target_dim", "TP"))
    return g


def execute_strategy(strategy: Strategy, request: PlanRequest) -> Tuple[List[DGraph], LoadingPlan]:
    graphs = [run_pipeline(p, request) for p in strategy.pipelines]
    result = plan(graphs, request.plan_id, request.step, request.granularity, request.loader_of,
                  request.scaling)
    return graphs, result
