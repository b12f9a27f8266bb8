# simulation/harness.py
"""Desk-scale simulation: build a runtime from a RunConfig, drive it, measure it.

Everything in MetricsFrame is computed from logical quantities (payload
metadata, ledgers, tick counts), so two runs with the same config and seed
produce identical frames whatever the thread count.
"""
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from constructor.constructor import DataConstructor
from core.config import RunConfig
from core.errors import IntegrityError
from core.logs import get_logger
from core.model import (BackboneParams, CostParams, ParallelismConfig, SampleMeta, SourceSpec, backbone_cost,
                        encoder_cost)
from dgraph.graph import init_from_buffer
from loader.source_loader import SourceLoader, shard_loaders
from loader.storage import MEMORY, InMemoryStorage, open_shard
from orchestration.partition import resolve_method
from orchestration.primitives import balance, bins_of, cost, distribute, sample_all, strategy_from_config
from placetree.tree import build_tree
from planner.autoscale import MixtureScaler, SourceAllocation, auto_partition
from planner.planner import Planner, coalesced_latency
from runtime.checkpoint import CheckpointStore
from runtime.faults import FaultInjector
from runtime.runtime import PHASES, CycleResult, Delivery, Runtime, stream_digest
from simulation.generator import Manifest, gen_sources

logger = get_logger(__name__)

FLOPS_COLUMNS = ["step", "graph", "node", "microbatch", "samples", "tokens", "flops"]
MEMORY_COLUMNS = ["step", "actor", "access_state", "worker_ctx", "buffer", "total"]
LATENCY_COLUMNS = ["step"] + list(PHASES) + ["total"]
ITERATION_COLUMNS = ["step", "backbone_max", "backbone_min", "backbone_mean", "encoder_max", "t_iter",
                     "imbalance_max_min", "imbalance_max_mean"]


# -----------------------------
# Metrics
# -----------------------------

@dataclass
class MetricsFrame:
    flops: pd.DataFrame
    memory: pd.DataFrame
    latency: pd.DataFrame
    iterations: pd.DataFrame
    summary: Dict[str, Any] = field(default_factory=dict)

    def tables(self) -> Dict[str, pd.DataFrame]:
        return {"flops": self.flops, "memory": self.memory, "latency": self.latency,
                "iterations": self.iterations}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, df in self.tables().items():
            h.update(name.encode())
            h.update(df.to_csv(index=False).encode())
        h.update(json.dumps(self.summary, sort_keys=True).encode())
        return h.hexdigest()

    @classmethod
    def empty(cls) -> "MetricsFrame":
        return cls(pd.DataFrame(columns=FLOPS_COLUMNS), pd.DataFrame(columns=MEMORY_COLUMNS),
                   pd.DataFrame(columns=LATENCY_COLUMNS), pd.DataFrame(columns=ITERATION_COLUMNS))


def subsequence_lengths(d: Delivery) -> List[int]:
    """Per-sample lengths recovered from a payload's packed offsets."""
    out = []
    for starts, total in zip(d.payload.offsets, d.payload.seq_lens):
        bounds = list(starts) + [total]
        out.extend(int(b - a) for a, b in zip(bounds, bounds[1:]))
    return out


def flops_rows(deliveries: Sequence[Delivery], params: CostParams) -> List[Dict]:
    """One row per delivered (graph, node, microbatch), costed from payload metadata only."""
    seen = set()
    rows = []
    for d in deliveries:
        if d.kind == "redirect":
            continue
        key = (d.plan_id, d.graph, d.node, d.microbatch)
        if key in seen:
            continue
        if d.graph == "sequence" and d.kind in ("full", "stub") and d.payload.offsets:
            lengths = subsequence_lengths(d)
            flops = backbone_cost(lengths, params.backbone)
        elif d.kind == "manifest" and params.encoder is not None:
            lengths = list(d.payload.patch_counts)
            flops = encoder_cost(lengths, params.encoder)
        else:
            continue
        seen.add(key)
        rows.append({"step": d.step, "graph": d.graph, "node": d.node, "microbatch": d.microbatch,
                     "samples": len(d.sample_ids), "tokens": int(sum(lengths)), "flops": float(flops)})
    return rows


def iteration_row(step: int, flops: pd.DataFrame) -> Dict:
    """Straggler model: slowest DP rank's backbone work plus the slowest encoder rank's work."""
    seq = flops[flops["graph"] == "sequence"]
    enc = flops[flops["graph"] != "sequence"]
    per_node = seq.groupby("node")["flops"].sum() if len(seq) else pd.Series(dtype=float)
    enc_node = enc.groupby("node")["flops"].sum() if len(enc) else pd.Series(dtype=float)
    bins = seq["flops"]
    b_max = float(per_node.max()) if len(per_node) else 0.0
    e_max = float(enc_node.max()) if len(enc_node) else 0.0
    lo = float(bins.min()) if len(bins) else 0.0
    mean = float(bins.mean()) if len(bins) else 0.0
    top = float(bins.max()) if len(bins) else 0.0
    return {
        "step": step,
        "backbone_max": b_max,
        "backbone_min": float(per_node.min()) if len(per_node) else 0.0,
        "backbone_mean": float(per_node.mean()) if len(per_node) else 0.0,
        "encoder_max": e_max,
        "t_iter": b_max + e_max,
        "imbalance_max_min": top / lo if lo > 0 else (1.0 if top == 0 else math.inf),
        "imbalance_max_mean": top / mean if mean > 0 else 1.0,
    }


# -----------------------------
# Memory ledgers
# -----------------------------

def memory_ledger(specs: Sequence[SourceSpec], allocations: Sequence[SourceAllocation],
                  config: ParallelismConfig, worker_ctx_bytes: int, buffer_bytes: int = 0,
                  mode: str = "disaggregated") -> pd.DataFrame:
    """Static per-actor memory.

    ``disaggregated`` hosts each source's actors once; ``naive`` clones every
    source's loader, with all its workers, into every trainer rank.
    """
    by_id = {s.source_id: s for s in specs}
    rows = []
    copies = config.world_size if mode == "naive" else 1
    for rank in range(copies):
        for a in allocations:
            spec = by_id[a.source_id]
            actors, wpa = (1, a.workers) if mode == "naive" else (a.actors, a.workers_per_actor)
            for j in range(actors):
                rows.append({"actor": f"{rank}/{a.source_id}.{j}" if mode == "naive" else f"{a.source_id}.{j}",
                             "access_state": spec.access_state_bytes, "worker_ctx": wpa * worker_ctx_bytes,
                             "buffer": buffer_bytes})
    df = pd.DataFrame(rows, columns=["actor", "access_state", "worker_ctx", "buffer"])
    df["total"] = df["access_state"] + df["worker_ctx"] + df["buffer"]
    return df


def ledger_totals(df: pd.DataFrame) -> Dict[str, int]:
    return {c: int(df[c].sum()) for c in ("access_state", "worker_ctx", "buffer", "total")}


def memory_sweep(source_counts: Sequence[int] = (1, 2, 4, 8), worker_counts: Sequence[int] = (1, 2, 4, 8),
                 access_state_bytes: int = 70 << 20, worker_ctx_bytes: int = 256 << 20,
                 buffer_bytes: int = 0) -> pd.DataFrame:
    """Ledger totals along the source axis (one worker each) and the worker axis (one source)."""
    cfg = ParallelismConfig()
    rows = []
    for n in source_counts:
        specs = [SourceSpec(i, f"mem://sweep-{i}", 1, 1.0, access_state_bytes) for i in range(n)]
        allocs = [SourceAllocation(i, 1, 1) for i in range(n)]
        rows.append({"axis": "sources", "value": n,
                     **ledger_totals(memory_ledger(specs, allocs, cfg, worker_ctx_bytes, buffer_bytes))})
    for w in worker_counts:
        specs = [SourceSpec(0, "mem://sweep-0", 1, 1.0, access_state_bytes)]
        rows.append({"axis": "workers", "value": w,
                     **ledger_totals(memory_ledger(specs, [SourceAllocation(0, 1, w)], cfg, worker_ctx_bytes,
                                                   buffer_bytes))})
    return pd.DataFrame(rows)


# -----------------------------
# Runtime construction
# -----------------------------

def allocations_for(cfg: RunConfig, specs: Sequence[SourceSpec]) -> List[SourceAllocation]:
    if cfg.loader.partition == "auto":
        return auto_partition(specs, cfg.resources.to_envelope())
    return [SourceAllocation(s.source_id, cfg.loader.actors, cfg.loader.workers) for s in specs]


def resolve_specs(cfg: RunConfig, memory: InMemoryStorage) -> List[SourceSpec]:
    """Source specs with their shard uris; generates the in-memory shards a run needs."""
    specs = cfg.source_specs()
    if cfg.data_dir:
        uris = Manifest.read(cfg.data_dir).uris()
        return [SourceSpec(s.source_id, uris.get(s.source_id, s.uri), s.record_count,
                           s.transform_cost_per_sample, s.access_state_bytes, s.modalities, s.name) for s in specs]
    missing = [c for c, s in zip(sorted(cfg.sources, key=lambda c: c.id), specs) if s.uri not in memory]
    if missing:
        gen_sources(missing, cfg.seed, memory=memory)
    return specs


def build_runtime(cfg: RunConfig, memory: Optional[InMemoryStorage] = None,
                  store: Optional[CheckpointStore] = None) -> Runtime:
    memory = memory or MEMORY
    specs = resolve_specs(cfg, memory)
    allocations = allocations_for(cfg, specs)
    worker_ctx = int(cfg.resources.worker_ctx_mib * (1 << 20))
    options = dict(buffer_capacity=cfg.loader.buffer_capacity, worker_ctx_bytes=worker_ctx,
                   strict=cfg.loader.strict, eager=cfg.loader.eager, defer_images=cfg.loader.defer_images,
                   read_retries=cfg.loader.read_retries, realtime=cfg.runtime.clock == "wall")

    def reader_factory(spec: SourceSpec):
        return open_shard(spec.uri, memory)

    by_id = {s.source_id: s for s in specs}
    loaders: List[SourceLoader] = []
    for a in allocations:
        spec = by_id[a.source_id]
        loaders.extend(shard_loaders(spec, lambda spec=spec: reader_factory(spec), a.actors,
                                     a.workers_per_actor, **options))

    tree = build_tree(cfg.parallelism_config())
    scaler = None
    if cfg.autoscale.enabled:
        scaler = MixtureScaler(cfg.autoscale.to_params(),
                               {a.source_id: (a.actors, a.workers_per_actor) for a in allocations},
                               available_blocks=cfg.resources.to_envelope().available_blocks)
    planner = Planner(strategy_from_config(cfg.strategy), cfg.mix_schedule(), tree, seed=cfg.seed,
                      batch_size=cfg.batch_size, cost_params=cfg.cost_params(),
                      granularity=cfg.constructor.granularity, fan_in=cfg.runtime.fan_in,
                      rpc_ticks=cfg.runtime.rpc_ticks, scaler=scaler)
    cc = cfg.constructor

    def constructor_factory(cid, t):
        return DataConstructor(cid, t, cc.max_seq_len, cc.splitter, cc.stub_fields, cc.granularity)

    store = store or CheckpointStore(cfg.runtime.checkpoint_dir)
    runtime = Runtime(planner, specs, loaders, reader_factory, constructor_factory, settings=cfg.runtime,
                      store=store, injector=FaultInjector.from_models(cfg.faults.events, cfg.seed),
                      horizon=cfg.steps, loader_options=options)
    for r in cfg.reshard:
        runtime.notify_reshard(r.parallelism.to_config(), step=r.step)
    runtime.allocations = list(allocations)
    return runtime


# -----------------------------
# Runs
# -----------------------------

@dataclass
class SimResult:
    metrics: MetricsFrame
    runtime: Runtime
    cycles: List[CycleResult]

    @property
    def deliveries(self) -> List[Delivery]:
        return [d for c in self.cycles for d in c.deliveries]

    @property
    def stream_digest(self) -> str:
        return stream_digest(self.deliveries)


def memory_table(cfg: RunConfig, runtime: Runtime, worker_ctx: int) -> pd.DataFrame:
    """Per-step actor memory: live loader ledgers, or per-rank clones when ``memory_mode`` is naive."""
    if cfg.memory_mode == "disaggregated":
        return pd.DataFrame(runtime.memory_rows, columns=MEMORY_COLUMNS)
    ledger = memory_ledger(list(runtime.specs.values()), runtime.allocations, cfg.parallelism_config(),
                           worker_ctx, mode="naive")
    steps = sorted({r["step"] for r in runtime.memory_rows})
    if not steps:
        return pd.DataFrame(columns=MEMORY_COLUMNS)
    return pd.concat([ledger.assign(step=s) for s in steps], ignore_index=True)[MEMORY_COLUMNS]


def collect_metrics(cfg: RunConfig, runtime: Runtime, cycles: Sequence[CycleResult]) -> MetricsFrame:
    params = cfg.cost_params()
    flops_all, iters = [], []
    for c in cycles:
        rows = flops_rows(c.deliveries, params)
        flops_all.extend(rows)
        iters.append(iteration_row(c.step, pd.DataFrame(rows, columns=FLOPS_COLUMNS)))
    latency = pd.DataFrame(runtime.phase_rows, columns=["step"] + list(PHASES))
    latency["total"] = latency[list(PHASES)].sum(axis=1)
    worker_ctx = int(cfg.resources.worker_ctx_mib * (1 << 20))
    metrics = MetricsFrame(
        flops=pd.DataFrame(flops_all, columns=FLOPS_COLUMNS),
        memory=memory_table(cfg, runtime, worker_ctx),
        latency=latency if cfg.runtime.clock == "logical" else latency.iloc[0:0],
        iterations=pd.DataFrame(iters, columns=ITERATION_COLUMNS),
    )
    specs = list(runtime.specs.values())
    allocs = runtime.allocations
    disagg = ledger_totals(memory_ledger(specs, allocs, cfg.parallelism_config(), worker_ctx))
    naive = ledger_totals(memory_ledger(specs, allocs, cfg.parallelism_config(), worker_ctx, mode="naive"))
    it = metrics.iterations
    metrics.summary = {
        "steps": len(cycles),
        "deliveries": sum(len(c.deliveries) for c in cycles),
        "t_iter_mean": float(it["t_iter"].mean()) if len(it) else 0.0,
        "imbalance_max_min": float(it["imbalance_max_min"].max()) if len(it) else 1.0,
        "imbalance_max_mean": float(it["imbalance_max_mean"].max()) if len(it) else 1.0,
        "memory_mode": cfg.memory_mode,
        "memory_disaggregated": disagg["total"],
        "memory_naive": naive["total"],
        "memory_ratio": naive["total"] / disagg["total"] if disagg["total"] else 0.0,
        "failovers": len(runtime.failovers),
        "evidence": len(runtime.evidence),
    }
    return metrics


def run_sim(cfg: RunConfig, memory: Optional[InMemoryStorage] = None,
            store: Optional[CheckpointStore] = None) -> SimResult:
    runtime = build_runtime(cfg, memory, store)
    cycles = runtime.run(cfg.steps)
    problems = runtime.audit_lineage()
    if problems:
        raise IntegrityError(f"lineage audit failed: {problems[:4]}")
    metrics = collect_metrics(cfg, runtime, cycles)
    logger.info("run finished: %d steps, mean T_iter %.4g", len(cycles), metrics.summary["t_iter_mean"])
    return SimResult(metrics, runtime, cycles)


# -----------------------------
# Balance benchmark
# -----------------------------

def _bench_graph(lengths: Sequence[int], dp: int, m: int, params: CostParams, method: str,
                 intra_reorder: bool = True, group_size: int = 1) -> Tuple[List[float], List[float], float, float]:
    tree = build_tree(ParallelismConfig(dp=dp, num_microbatches=m))
    metas = [SampleMeta(i, 0, int(l)) for i, l in enumerate(lengths)]
    g = init_from_buffer(metas, name="sequence")
    sample_all(g, 0)
    distribute(g, tree, "DP", group_size)
    t0 = time.perf_counter()
    cost(g, "backbone", params)
    t1 = time.perf_counter()
    balance(g, method, m, intra_reorder)
    t2 = time.perf_counter()
    bins = bins_of(g)
    node_loads = [0.0] * dp
    for b in bins:
        node_loads[b.node] += b.cost
    return [b.cost for b in bins], node_loads, (t1 - t0) * 1000.0, (t2 - t1) * 1000.0


def bench_balance(sigmas: Sequence[float] = (0.2, 0.4, 0.6), methods: Sequence[str] = ("greedy", "karmarkar_karp"),
                  dp: int = 16, m: int = 4, batch_size: int = 128, median: float = 256.0, trials: int = 20,
                  seed: int = 0, params: Optional[CostParams] = None, group_size: int = 1,
                  max_len: int = 1 << 16) -> pd.DataFrame:
    """Per (sigma, method, trial): bin ratios and T_iter against the unbalanced layout.

    Timing columns are wall-clock and vary run to run.
    """
    params = params or CostParams(BackboneParams(depth=2, hidden=64))
    rows = []
    for sigma in sigmas:
        for trial in range(trials):
            rng = np.random.default_rng([seed, int(round(sigma * 1000)), trial])
            lengths = np.clip(np.rint(rng.lognormal(np.log(median), sigma, batch_size)), 1, max_len)
            _, vanilla_nodes, _, _ = _bench_graph(lengths, dp, m, params, "sequential", group_size=group_size)
            vanilla = max(vanilla_nodes)
            for method in ["sequential"] + [resolve_method(x) for x in methods if resolve_method(x) != "sequential"]:
                bins, nodes, cost_ms, balance_ms = _bench_graph(lengths, dp, m, params, method,
                                                                group_size=group_size)
                mean_bin = float(np.mean(bins))
                rows.append({"sigma": sigma, "method": method, "trial": trial,
                             "max_mean": max(bins) / mean_bin if mean_bin else 1.0,
                             "max_load": max(nodes), "t_iter": max(nodes),
                             "speedup": vanilla / max(nodes) if max(nodes) else 1.0,
                             "cost_ms": cost_ms, "balance_ms": balance_ms})
    return pd.DataFrame(rows)


def summarize_bench(df: pd.DataFrame) -> pd.DataFrame:
    return (df.groupby(["sigma", "method"], as_index=False)
              .agg(max_mean=("max_mean", "mean"), speedup=("speedup", "mean"), speedup_max=("speedup", "max"),
                   cost_ms=("cost_ms", "mean"), balance_ms=("balance_ms", "mean")))


def kk_vs_greedy(df: pd.DataFrame) -> float:
    """Fraction of trials where Karmarkar-Karp's max node load is at most greedy's."""
    pivot = df.pivot_table(index=["sigma", "trial"], columns="method", values="max_load")
    if "karmarkar_karp" not in pivot or "greedy" not in pivot:
        return float("nan")
    return float((pivot["karmarkar_karp"] <= pivot["greedy"] * (1 + 1e-12)).mean())


def bench_context(contexts: Sequence[int] = (4096, 8192, 16384), base_context: int = 4096, sigma: float = 0.6,
                  method: str = "karmarkar_karp", **kwargs) -> pd.DataFrame:
    """Speedup per context length; lengths scale with the context."""
    median = kwargs.pop("median", 256.0)
    rows = []
    for ctx in contexts:
        df = bench_balance(sigmas=(sigma,), methods=(method,), median=median * ctx / base_context,
                           max_len=ctx, **kwargs)
        chosen = df[df["method"] == resolve_method(method)]
        rows.append({"context": ctx, "speedup": float(chosen["speedup"].mean()),
                     "max_mean": float(chosen["max_mean"].mean())})
    return pd.DataFrame(rows)


# -----------------------------
# Summary coalescing and ETTR
# -----------------------------

def summary_latency_fit(loader_counts: Sequence[int] = (2, 4, 8, 16, 32, 64, 128, 256), fan_in: int = 4,
                        rpc_ticks: int = 1) -> Dict[str, float]:
    """Growth exponent of gather latency in the loader count (log-log slope; 1 means linear)."""
    n = np.array(loader_counts, dtype=float)
    lat = np.array([coalesced_latency(int(k), fan_in, rpc_ticks) for k in loader_counts], dtype=float)
    model = LinearRegression().fit(np.log(n).reshape(-1, 1), np.log(lat))
    return {"slope": float(model.coef_[0]), "intercept": float(model.intercept_),
            "r2": float(model.score(np.log(n).reshape(-1, 1), np.log(lat)))}


def estimate_ettr(mtbf_steps: float, steps: int = 10000, shadows: int = 1, hot_ticks: int = 1,
                  cold_ticks: int = 20, replay_ticks: int = 2, step_ticks: float = 10.0, prefetch_depth: int = 2,
                  seed: int = 0) -> Dict[str, float]:
    """Effective training time ratio under a seeded exponential failure process.

    A failure costs its recovery time minus what the prefetched plans hide.
    A promotion consumes a shadow; once none are left recovery is cold.
    """
    rng = np.random.default_rng([seed, int(mtbf_steps * 1000)])
    horizon = steps * step_ticks
    failures = []
    t = rng.exponential(mtbf_steps * step_ticks)
    while t < horizon:
        failures.append(t)
        t += rng.exponential(mtbf_steps * step_ticks)
    masked = prefetch_depth * step_ticks
    out = {"failures": float(len(failures))}
    for name, n_shadows in (("hot", shadows), ("cold", 0)):
        lost, left = 0.0, n_shadows
        for _ in failures:
            if left > 0:
                cost_ticks, left = hot_ticks + replay_ticks, left - 1
            else:
                cost_ticks = cold_ticks + replay_ticks
            lost += max(0.0, cost_ticks - masked)
        out[f"ettr_{name}"] = horizon / (horizon + lost) if horizon else 1.0
    out["ratio"] = out["ettr_hot"] / out["ettr_cold"] if out["ettr_cold"] else float("nan")
    return out


# -----------------------------
# Replay
# -----------------------------

def _state_digest(state: Dict) -> str:
    return hashlib.sha256(json.dumps(state, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def replay(cfg: RunConfig, checkpoint_dir: str, memory: Optional[InMemoryStorage] = None) -> pd.DataFrame:
    """Rebuild planner and loaders from the newest snapshots plus the plan log.

    One row per restored actor with the snapshot it came from, the number of
    log entries replayed and a digest of the recovered state.
    """
    memory = memory or MEMORY
    store = CheckpointStore(checkpoint_dir)
    specs = {s.source_id: s for s in resolve_specs(cfg, memory)}
    rows = []

    runtime = build_runtime(cfg, memory, store=CheckpointStore())
    planner = runtime.planner
    snap = store.latest_planner()
    if snap is not None:
        planner.restore(snap[1])
        plans = store.read_log(snap[0], ("plan",))
        for entry in plans:
            planner.observe_plan(entry.plan)
        rows.append({"actor": "planner", "snapshot_plan": snap[0], "replayed": len(plans),
                     "last_plan_id": planner.last_plan_id, "digest": _state_digest(planner.checkpoint())})

    options = dict(runtime.loader_options)
    for scope in store.scopes():
        if not scope.startswith("loader-"):
            continue
        key = scope[len("loader-"):]
        got = store.latest(scope)
        if got is None:
            continue
        plan_id, state = got
        spec = specs[state["source_id"]]
        loader = SourceLoader.restore(state, spec, open_shard(spec.uri, memory), **options)
        replayed = 0
        for entry in store.read_log(plan_id):
            if entry.kind == "plan":
                loader.execute_plan_slice(entry.plan)
                replayed += 1
            elif entry.kind == "reshard" and entry.body["source_id"] == spec.source_id:
                loader.apply_reshard(entry.body["frontier"], loader.actor, entry.body["actors"])
        rows.append({"actor": f"loader:{key}", "snapshot_plan": plan_id, "replayed": replayed,
                     "last_plan_id": loader.last_plan_id, "digest": _state_digest(loader.checkpoint())})
    return pd.DataFrame(rows, columns=["actor", "snapshot_plan", "replayed", "last_plan_id", "digest"])
