# runtime/runtime.py
"""Actor runtime for the pull workflow.

One ``pull_cycle(step)`` walks the five phases in order: the client ranks
request data, the constructors fetch from the planner, the planner consults
loader buffers, synthesizes a plan, and the loaders ingest it. Plans are
made ``prefetch_depth`` steps ahead. Time is counted in logical ticks unless
the wall clock is selected.
"""
import hashlib
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

from constructor.constructor import DataConstructor, RankPayload
from constructor.wire import decode_payload, encode_payload
from core.config import RuntimeConfig
from core.errors import (DataPlaneError, IntegrityError, InvalidInputError, MalformedPayloadError, NotFoundError,
                         StorageError)
from core.logs import get_logger
from core.model import ParallelismConfig, SampleMeta, SourceSpec
from dgraph.graph import FULL_LINEAGE, DGraph, State
from loader.source_loader import Segment, ShardCursor, SourceLoader, StagedSlice, reshard_frontier
from loader.storage import ShardReader
from placetree.tree import ClientPlaceTree, constructor_of_rank, num_constructors, reshard_tree
from planner.plan import LoadingPlan, loader_key, parse_loader_key
from planner.planner import Planner
from runtime.checkpoint import CheckpointStore
from runtime.faults import FaultEvent, FaultInjector, corrupt_header
from runtime.mailbox import Mailbox

logger = get_logger(__name__)

PHASES = ("request", "fetch", "consult", "synthesis", "ingest")
EVIDENCE_KINDS = ("timeout", "missing-eos", "malformed-header", "storage")

ReaderFactory = Callable[[SourceSpec], ShardReader]
ConstructorFactory = Callable[[int, ClientPlaceTree], DataConstructor]


# -----------------------------
# Results
# -----------------------------

@dataclass(frozen=True)
class FailureEvidence:
    actor: str
    kind: str
    step: int
    detail: str = ""


@dataclass(frozen=True)
class Delivery:
    step: int
    rank: int
    graph: str
    plan_id: int
    kind: str
    node: int
    microbatch: int
    sample_ids: Tuple[int, ...]
    digest: str
    payload: RankPayload = field(compare=False, repr=False)


@dataclass
class CycleResult:
    step: int
    deliveries: List[Delivery]
    phases: Dict[str, float]
    plan_ids: List[int]
    evidence: List[FailureEvidence]


@dataclass(frozen=True)
class FailoverReport:
    loader: str
    path: str  # hot | cold
    snapshot_plan: int
    replayed: int
    ticks: int


@dataclass(frozen=True)
class ReshardAck:
    ok: bool
    noop: bool = False
    reason: str = ""
    replanned: int = 0


def stream_digest(deliveries: Sequence[Delivery]) -> str:
    h = hashlib.sha256()
    for d in deliveries:
        h.update(f"{d.step}|{d.rank}|{d.graph}|{d.digest}\n".encode("utf-8"))
    return h.hexdigest()


def delivered_samples(deliveries: Sequence[Delivery], graph: str = "sequence") -> List[int]:
    """Sample ids of every delivered microbatch of ``graph``, each microbatch counted once."""
    seen = set()
    out: List[int] = []
    for d in deliveries:
        if d.graph != graph or d.kind == "redirect":
            continue
        key = (d.plan_id, d.node, d.microbatch)
        if key not in seen:
            seen.add(key)
            out.extend(d.sample_ids)
    return sorted(out)


# -----------------------------
# Shadows
# -----------------------------

class ShadowRegistry:
    """Hot standbys per source, each mirroring the latest loader snapshots.

    A promotion uses up one standby of the source; standbys are not
    replenished during a run.
    """

    def __init__(self, per_source: int = 1):
        self.per_source = per_source
        self.available: Dict[int, int] = {}
        self.mirrors: Dict[str, Tuple[int, Dict]] = {}

    def register(self, source_id: int):
        self.available.setdefault(source_id, self.per_source)

    def mirror(self, key: str, plan_id: int, state: Dict):
        self.mirrors[key] = (plan_id, state)

    def has_shadow(self, source_id: int) -> bool:
        return self.available.get(source_id, 0) > 0

    def promote(self, key: str) -> Optional[Tuple[int, Dict]]:
        source_id, _ = parse_loader_key(key)
        if not self.has_shadow(source_id) or key not in self.mirrors:
            return None
        self.available[source_id] -= 1
        return self.mirrors[key]


# -----------------------------
# Runtime
# -----------------------------

class Runtime:
    def __init__(self, planner: Planner, specs: Sequence[SourceSpec], loaders: Sequence[SourceLoader],
                 reader_factory: ReaderFactory, constructor_factory: ConstructorFactory,
                 settings: Optional[RuntimeConfig] = None, store: Optional[CheckpointStore] = None,
                 injector: Optional[FaultInjector] = None, horizon: Optional[int] = None,
                 loader_options: Optional[Mapping] = None):
        self.planner = planner
        self.tree: ClientPlaceTree = planner.tree
        self.specs: Dict[int, SourceSpec] = {s.source_id: s for s in specs}
        self.reader_factory = reader_factory
        self.constructor_factory = constructor_factory
        self.settings = settings or RuntimeConfig()
        self.store = store or CheckpointStore()
        self.injector = injector or FaultInjector()
        self.horizon = horizon or planner.schedule.total_steps
        self.loader_options = dict(loader_options or {})
        self.allocations: List = []
        self.granularity = planner.granularity

        self.loaders: Dict[str, SourceLoader] = {}
        self.workers: Dict[str, int] = {}
        self.incarnation: Dict[str, int] = {}
        for loader in loaders:
            self._adopt(loader)
        self.constructors: Dict[int, DataConstructor] = {}
        self.mailboxes: Dict[str, Mailbox] = {"runtime": Mailbox("runtime", self.settings.mailbox_capacity)}
        for cid in range(num_constructors(self.tree.config, self.granularity)):
            self._add_constructor(cid)
        self.shadows = ShadowRegistry(self.settings.shadows)

        self.clock = 0
        self.current_step = -1
        self.next_plan_step = 0
        self.next_serve_step = 0
        self.plans: Dict[int, LoadingPlan] = {}
        self.step_plans: Dict[int, List[int]] = {}
        self.graphs: Dict[int, List[DGraph]] = {}
        self.superseded: Set[int] = set()
        self.dead: Set[str] = set()
        self.evidence: List[FailureEvidence] = []
        self.failovers: List[FailoverReport] = []
        self.acks: List[Tuple[int, ReshardAck]] = []
        self.phase_rows: List[Dict] = []
        self.memory_rows: List[Dict] = []
        self.reshard_at: Dict[int, ParallelismConfig] = {}
        self._suspect: Dict[str, Tuple[str, str]] = {}
        self._pending: Dict[str, List[StagedSlice]] = {}
        self._armed: List[FaultEvent] = []
        self._control = threading.RLock()
        self._recovering = False
        self._booted = False

    # --- actors ---

    def _adopt(self, loader: SourceLoader):
        key = loader.key
        self.loaders[key] = loader
        self.loaders = dict(sorted(self.loaders.items(), key=lambda kv: parse_loader_key(kv[0])))
        self.workers[key] = loader.workers
        self.incarnation.setdefault(key, 0)
        if hasattr(self, "mailboxes"):
            self.mailboxes.setdefault(f"loader:{key}", Mailbox(f"loader:{key}", self.settings.mailbox_capacity))
        if hasattr(self, "shadows"):
            self.shadows.register(loader.spec.source_id)

    def _add_constructor(self, cid: int):
        self.constructors[cid] = self.constructor_factory(cid, self.tree)
        name = f"constructor:{cid}"
        self.mailboxes.setdefault(name, Mailbox(name, self.settings.mailbox_capacity))

    def _sender(self, key: str) -> str:
        return f"loader:{key}#{self.incarnation[key]}"

    def bootstrap(self):
        for key, loader in self.loaders.items():
            self.mailboxes.setdefault(f"loader:{key}", Mailbox(f"loader:{key}", self.settings.mailbox_capacity))
            self.shadows.register(loader.spec.source_id)
            loader.ingest()
            self._snapshot_loader(key, 0)
        self.store.save_planner(0, self.planner.checkpoint())
        self._booted = True
        logger.info("runtime up: %d loaders, %d constructors, %s", len(self.loaders), len(self.constructors),
                    self.tree.config.describe())

    def _ticks(self, logical: float, started: float) -> float:
        if self.settings.clock == "wall":
            return (time.perf_counter() - started) * 1000.0
        return float(logical)

    # --- faults ---

    def _arm(self, step: int):
        self._armed = self.injector.at(step)
        for e in self._armed:
            self.injector.record(step, e)
        for e in [e for e in self._armed if e.kind == "kill"]:
            self.dead.add("planner" if e.actor_kind == "planner" else e.actor_id)
            self._armed.remove(e)

    def _take_fault(self, kind: str, actor_kind: str, actor_id: str) -> Optional[FaultEvent]:
        for e in self._armed:
            if e.kind == kind and e.actor_kind == actor_kind and e.actor_id == actor_id:
                self._armed.remove(e)
                return e
        return None

    def detect_failure(self, actor: str) -> Optional[FailureEvidence]:
        """Evidence that ``actor`` failed, or None when it looks healthy. Never raises."""
        try:
            kind, _, ident = actor.partition(":")
            found = None
            if actor in self._suspect:
                what, detail = self._suspect.pop(actor)
                found = FailureEvidence(actor, what, self.current_step, detail)
            elif (kind == "loader" and ident in self.dead) or (kind == "planner" and "planner" in self.dead):
                found = FailureEvidence(actor, "timeout", self.current_step,
                                        f"no reply within {self.settings.timeout_ticks} ticks")
            if found is not None:
                self.evidence.append(found)
                logger.warning("step %d: %s failed (%s) %s", found.step, actor, found.kind, found.detail)
            return found
        except Exception as exc:
            logger.error("failure detection on %s broke: %s", actor, exc)
            return None

    # --- checkpoints ---

    def _snapshot_loader(self, key: str, plan_id: int):
        state = self.loaders[key].checkpoint()
        self.store.save_loader(key, plan_id, state)
        self.shadows.mirror(key, plan_id, state)

    def _cadence(self, plan_id: int):
        if plan_id % self.settings.planner_ckpt_every == 0:
            self.store.save_planner(plan_id, self.planner.checkpoint())
        if plan_id % self.settings.loader_ckpt_every == 0:
            for key in self.loaders:
                self._snapshot_loader(key, plan_id)

    # --- failover ---

    def failover(self, key: str) -> FailoverReport:
        """Replace loader ``key`` by a shadow (or a cold restart) brought up to the last logged plan."""
        with self._control:
            self._recovering = True
            try:
                return self._failover(key)
            finally:
                self._recovering = False

    def _failover(self, key: str) -> FailoverReport:
        source_id, _ = parse_loader_key(key)
        spec = self.specs[source_id]
        snap = self.shadows.promote(key)
        if snap is not None:
            path, ticks = "hot", self.settings.failover_ticks
        else:
            snap = self.store.latest_loader(key)
            if snap is None:
                raise IntegrityError(f"loader {key} has no snapshot to restart from")
            path, ticks = "cold", self.settings.cold_restart_ticks
        snap_plan, state = snap
        options = dict(self.loader_options, workers=self.workers[key])
        loader = SourceLoader.restore(state, spec, self.reader_factory(spec), **options)
        replayed = 0
        for entry in self.store.read_log(snap_plan):
            if entry.kind == "plan":
                loader.execute_plan_slice(entry.plan)
                replayed += 1
            elif entry.kind == "reshard" and entry.body["source_id"] == source_id:
                loader.apply_reshard(entry.body["frontier"], loader.actor, entry.body["actors"])
        old = self._sender(key)
        for name, box in self.mailboxes.items():
            if name.startswith("constructor:"):
                box.discard(old)
        self.mailboxes[f"loader:{key}"].reopen()
        self.incarnation[key] += 1
        self.loaders[key] = loader
        self.dead.discard(key)
        report = FailoverReport(key, path, snap_plan, replayed, ticks + replayed * self.settings.rpc_ticks)
        self.failovers.append(report)
        logger.info("failover %s: %s path from plan %d, %d plans replayed", key, path, snap_plan, replayed)
        return report

    def recover_planner(self) -> int:
        """Restore the planner from its snapshot and the plan log; returns recovery ticks."""
        with self._control:
            snap = self.store.latest_planner()
            if snap is None:
                raise IntegrityError("planner has no snapshot to restart from")
            plan_id, state = snap
            self.planner.restore(state)
            replayed = 0
            for entry in self.store.read_log(plan_id, ("plan",)):
                self.planner.observe_plan(entry.plan)
                replayed += 1
            self.planner.set_tree(self.tree)
            self.dead.discard("planner")
            logger.info("planner restored from plan %d, %d plans replayed", plan_id, replayed)
            return self.settings.cold_restart_ticks + replayed * self.settings.rpc_ticks

    # --- plan cycle ---

    def _record_plan(self, plan: LoadingPlan, step: int, graphs: Sequence[DGraph]):
        self.plans[plan.plan_id] = plan
        self.step_plans.setdefault(step, []).append(plan.plan_id)
        self.graphs[plan.plan_id] = list(graphs)

    def _run_loader(self, key: str) -> List[StagedSlice]:
        loader = self.loaders[key]
        return [loader.execute_plan_slice(self.plans[env.body]) for env in self.mailboxes[f"loader:{key}"].drain()]

    def _try_loader(self, key: str) -> Tuple[List[StagedSlice], Optional[StorageError]]:
        try:
            return self._run_loader(key), None
        except StorageError as exc:
            return [], exc

    def _storage_failed(self, key: str, exc: StorageError):
        self._suspect[f"loader:{key}"] = ("storage", str(exc))
        logger.warning("loader %s: storage read failed after retries: %s", key, exc)

    def _dispatch(self, plan: LoadingPlan):
        for key in self.loaders:
            box = self.mailboxes[f"loader:{key}"]
            if not box.put("planner", "plan", plan.plan_id):
                # full mailbox: let the loader catch up first
                if key not in self.dead:
                    done, exc = self._try_loader(key)
                    self._pending.setdefault(key, []).extend(done)
                    if exc is not None:
                        self._storage_failed(key, exc)
                box.put("planner", "plan", plan.plan_id)

    def _execute(self, keys: List[str]) -> Dict[str, Tuple[List[StagedSlice], Optional[StorageError]]]:
        if self.settings.threads > 1 and len(keys) > 1:
            with ThreadPoolExecutor(max_workers=self.settings.threads) as pool:
                results = list(pool.map(self._try_loader, keys))
        else:
            results = [self._try_loader(k) for k in keys]
        return dict(zip(keys, results))

    def _send(self, key: str, staged: StagedSlice, faults: bool = True) -> Tuple[Set[int], int]:
        """Post ``staged`` to its owning constructors, applying any armed message fault."""
        dests = {s.owner for s in staged.samples}
        if not faults:
            for cid in sorted(dests):
                self.mailboxes[f"constructor:{cid}"].put(self._sender(key), "slice", staged, deliver_at=self.clock)
            return dests, 0
        if self._take_fault("drop", "loader", key):
            return dests, 0
        delay = 0
        fault = self._take_fault("delay", "loader", key)
        if fault:
            delay = fault.ticks
        if self._take_fault("drop_eos", "loader", key):
            staged = replace(staged, eos=False)
        for cid in sorted(dests):
            self.mailboxes[f"constructor:{cid}"].put(self._sender(key), "slice", staged,
                                                     deliver_at=self.clock + delay)
        return dests, delay

    def _collect(self, deadline: int) -> Dict[str, Set[int]]:
        arrived: Dict[str, Set[int]] = {}
        for cid in sorted(self.constructors):
            c = self.constructors[cid]
            for env in self.mailboxes[f"constructor:{cid}"].drain(now=deadline):
                key = env.sender.split(":", 1)[1].split("#")[0]
                if env.sender != self._sender(key):
                    logger.debug("dropping stale slice from %s", env.sender)
                    continue
                try:
                    c.receive(env.body)
                except MalformedPayloadError as exc:
                    self._suspect[f"loader:{key}"] = ("missing-eos", str(exc))
                    continue
                arrived.setdefault(key, set()).add(cid)
        return arrived

    def _ingest(self, plan: LoadingPlan) -> int:
        self._dispatch(plan)
        for key in list(self.loaders):
            if self._take_fault("kill_mid_plan", "loader", key):
                self.dead.add(key)
        broken = {k for k in self.loaders if self._suspect.get(f"loader:{k}", ("",))[0] == "storage"}
        healthy = [k for k in self.loaders if k not in self.dead and k not in broken]
        results = self._execute(healthy)
        expected: Dict[str, Set[int]] = {}
        worst_ms, worst_delay = 0.0, 0
        for key in healthy:
            done, exc = results[key]
            pending = self._pending.pop(key, [])
            if exc is not None:
                self._storage_failed(key, exc)
                broken.add(key)
                continue
            for staged in pending:
                self._send(key, staged, faults=False)
            for staged in done:
                worst_ms = max(worst_ms, staged.transform_ms)
                if staged.plan_id != plan.plan_id:
                    self._send(key, staged, faults=False)
                    continue
                dests, delay = self._send(key, staged)
                expected[key] = dests
                if delay <= self.settings.timeout_ticks:
                    worst_delay = max(worst_delay, delay)
        arrived = self._collect(self.clock + self.settings.timeout_ticks)

        ticks = self.settings.rpc_ticks + math.ceil(worst_ms / self.settings.tick_ms) + worst_delay
        failed = sorted((set(self.dead) | broken) & set(self.loaders))
        failed += [k for k, dests in expected.items() if dests - arrived.get(k, set()) and k not in failed]
        if failed:
            ticks += self.settings.timeout_ticks
        for key in sorted(failed, key=parse_loader_key):
            self._pending.pop(key, None)
            if key not in self.dead and f"loader:{key}" not in self._suspect:
                self._suspect[f"loader:{key}"] = ("timeout", f"slice of plan {plan.plan_id} never arrived")
            self.detect_failure(f"loader:{key}")
            report = self.failover(key)
            ticks += report.ticks
            staged = self.loaders[key].execute_plan_slice(plan)
            missing = {s.owner for s in staged.samples} - arrived.get(key, set())
            for cid in sorted(missing):
                self.constructors[cid].receive(staged)
        return ticks

    def _construct(self, plan: LoadingPlan, metas: Mapping[int, SampleMeta]):
        for cid in sorted(self.constructors):
            self.constructors[cid].do_plan(plan, metas)
        self._apply_events()

    def _apply_events(self):
        for cid in sorted(self.constructors):
            for what, graph, plan_id, members in self.constructors[cid].drain_events():
                graphs = {g.name: g for g in self.graphs.get(plan_id, ())}
                g = graphs.get(graph)
                if g is None:
                    continue
                state = State.ASSEMBLED if what == "assembled" else State.DELIVERED
                with g.mutation():
                    for sid in members:
                        g.advance(sid, state, producer=f"constructor:{cid}")

    def _plan_cycle(self, step: int) -> Dict[str, float]:
        lat: Dict[str, float] = {}
        started = time.perf_counter()
        lat["fetch"] = self._ticks(self.settings.rpc_ticks, started)

        started = time.perf_counter()
        extra = 0
        if self.detect_failure("planner"):
            extra += self.settings.timeout_ticks + self.recover_planner()
        for key in list(self.loaders):
            if key in self.dead and self.detect_failure(f"loader:{key}"):
                extra += self.settings.timeout_ticks + self.failover(key).ticks
        summaries = self.planner.gather_buffer_summaries(list(self.loaders.values()))
        lat["consult"] = self._ticks(summaries.latency + extra, started)

        started = time.perf_counter()
        plan = self.planner.generate_plan(summaries, step)
        self.store.log_plan(plan)
        self._record_plan(plan, step, self.planner.graphs)
        lat["synthesis"] = self._ticks(1 + len(summaries) // 1024, started)

        started = time.perf_counter()
        ticks = self._ingest(plan)
        self._construct(plan, {m.sample_id: m for m in summaries.population})
        self._apply_scaling(plan)
        self._cadence(plan.plan_id)
        self._retire_drained()
        lat["ingest"] = self._ticks(ticks, started)
        return lat

    # --- source resharding ---

    def _apply_scaling(self, plan: LoadingPlan):
        if plan.scaling is None:
            return
        for action in plan.scaling.actions:
            if action.kind == "reshard":
                self.reshard_source(action.source_id, action.actors, action.workers_per_actor, plan.plan_id)

    def reshard_source(self, source_id: int, actors: int, workers_per_actor: int, plan_id: int):
        """Spread the unread records of a source over ``actors`` loaders from a common frontier."""
        spec = self.specs[source_id]
        active = sorted((l for l in self.loaders.values() if l.spec.source_id == source_id and not l.draining),
                        key=lambda l: l.actor)
        if len(active) == actors:
            return
        frontier = reshard_frontier(active)
        self.store.append("reshard", plan_id, {"source_id": source_id, "frontier": frontier, "actors": actors,
                                               "workers_per_actor": workers_per_actor})
        for l in self.loaders.values():
            if l.spec.source_id == source_id:
                l.apply_reshard(frontier, l.actor, actors)
        for j in range(actors):
            key = loader_key(source_id, j)
            if key in self.loaders:
                continue
            reader = self.reader_factory(spec)
            count = min(spec.record_count, reader.record_count)
            loader = SourceLoader(spec, reader, actor=j, actors=actors, workers=workers_per_actor,
                                  cursor=ShardCursor([Segment(frontier + j, count, actors)]), **self.loader_options)
            loader.ingest()
            self._adopt(loader)
            self._snapshot_loader(key, plan_id)
        logger.info("source %d resharded to %d actors at record %d", source_id, actors, frontier)

    def _retire_drained(self):
        for key in [k for k, l in self.loaders.items() if l.draining and l.eos and not l.buffer]:
            del self.loaders[key]
            logger.info("loader %s drained and retired", key)

    # --- trainer resharding ---

    def notify_reshard(self, config: ParallelismConfig, step: Optional[int] = None):
        """Queue a topology change; it takes effect at the start of ``step`` (default: the next one)."""
        at = self.next_serve_step if step is None else step
        self.reshard_at[at] = config

    def handle_reshard(self, config: ParallelismConfig) -> ReshardAck:
        """Move to ``config`` between steps; unserved microbatches are re-planned on the new tree."""
        with self._control:
            try:
                new_tree, remap = reshard_tree(self.tree, config)
            except DataPlaneError as exc:
                logger.warning("reshard to %s rejected: %s", config.describe(), exc)
                return ReshardAck(ok=False, reason=str(exc))
            if remap.is_identity:
                return ReshardAck(ok=True, noop=True)
            n_new = num_constructors(config, self.granularity)
            busy = [cid for cid, c in self.constructors.items()
                    if cid >= n_new and any(c.served.values())]
            if busy:
                reason = f"constructors {busy} are mid-microbatch"
                logger.warning("reshard to %s rejected: %s", config.describe(), reason)
                return ReshardAck(ok=False, reason=reason)

            released = {}
            for cid in sorted(self.constructors):
                c = self.constructors[cid]
                for s in c.take(c.reshard_resident(new_tree, remap)):
                    released[s.meta.sample_id] = s
            self.tree = new_tree
            self.planner.set_tree(new_tree)
            self.store.append("tree", self.planner.last_plan_id,
                              {"parallelism": list(config.sizes) + [config.num_microbatches]})
            for cid in [c for c in self.constructors if c >= n_new]:
                del self.constructors[cid]
            for cid in range(n_new):
                if cid not in self.constructors:
                    self._add_constructor(cid)

            replanned = 0
            for step in sorted(self.step_plans):
                pids = self.step_plans[step]
                sids = sorted({sid for pid in pids for sid in self.plans[pid].owners if sid in released})
                self.superseded.update(pids)
                self.step_plans[step] = []
                metas = [released[sid].meta for sid in sids]
                resident = self.planner.plan_resident(metas, step)
                self.store.log_plan(resident)
                self._record_plan(resident, step, self.planner.graphs)
                self._dispatch(resident)
                for key, (slices, exc) in self._execute([k for k in self.loaders if k not in self.dead]).items():
                    if exc is not None:
                        self._storage_failed(key, exc)
                    else:
                        self._pending.setdefault(key, []).extend(slices)
                for sid, cid in resident.owners.items():
                    self.constructors[cid].accept([released[sid]])
                self._construct(resident, {m.sample_id: m for m in metas})
                self._cadence(resident.plan_id)
                replanned += 1
            logger.info("reshard to %s done, %d steps re-planned", config.describe(), replanned)
            return ReshardAck(ok=True, replanned=replanned)

    # --- serving ---

    def _transmit(self, step: int, cid: int, payload: RankPayload) -> Delivery:
        data = encode_payload(payload)
        if self._take_fault("corrupt_header", "constructor", str(cid)):
            try:
                decode_payload(corrupt_header(data))
            except MalformedPayloadError as exc:
                self._suspect[f"constructor:{cid}"] = ("malformed-header", str(exc))
                self.detect_failure(f"constructor:{cid}")
            # the constructor still holds the payload; resend it intact
        if self.settings.wire_check:
            payload = decode_payload(data)
        return Delivery(step, payload.rank, payload.graph, payload.plan_id, payload.kind, payload.node,
                        payload.microbatch, payload.sample_ids, hashlib.sha256(data).hexdigest(), payload)

    def _serve(self, step: int) -> Tuple[List[Delivery], List[int]]:
        pids = self.step_plans.pop(step, [])
        want = set(pids)
        graphs = sorted({g for pid in pids for g in self.plans[pid].transforms})
        out = []
        for rank in range(self.tree.world_size):
            cid = constructor_of_rank(self.tree, rank, self.granularity)
            c = self.constructors[cid]
            for graph in graphs:
                while True:
                    head = c.peek(rank, graph)
                    if head is None or head.plan_id not in want:
                        break
                    out.append(self._transmit(step, cid, c.serve(rank, graph)))
        self._apply_events()
        return out, pids

    def pull_cycle(self, step: int) -> CycleResult:
        """Serve ``step`` to every client rank, planning ahead as far as the prefetch depth allows."""
        if step != self.next_serve_step:
            raise InvalidInputError(f"pull_cycle expects step {self.next_serve_step}, got {step}")
        if step >= self.horizon:
            raise InvalidInputError(f"step {step} is past the run horizon {self.horizon}")
        if not self._booted:
            self.bootstrap()
        self.current_step = step
        if step in self.reshard_at:
            self.acks.append((step, self.handle_reshard(self.reshard_at.pop(step))))
        self._arm(step)
        mark = len(self.evidence)

        phases = {p: 0.0 for p in PHASES}
        started = time.perf_counter()
        phases["request"] = self._ticks(self.settings.rpc_ticks, started)
        last = min(step + self.settings.prefetch_depth - 1, self.horizon - 1)
        while self.next_plan_step <= last:
            for name, value in self._plan_cycle(self.next_plan_step).items():
                phases[name] += value
            self.next_plan_step += 1
        deliveries, pids = self._serve(step)

        if self.settings.clock == "logical":
            self.clock += int(sum(phases.values()))
        self._armed = []
        self.next_serve_step += 1
        self.phase_rows.append({"step": step, **phases})
        for key, loader in self.loaders.items():
            m = loader.memory()
            self.memory_rows.append({"step": step, "actor": key, "access_state": m.access_state,
                                     "worker_ctx": m.worker_ctx, "buffer": m.buffer, "total": m.total})
        return CycleResult(step, deliveries, phases, pids, self.evidence[mark:])

    def run(self, steps: Optional[int] = None) -> List[CycleResult]:
        n = self.horizon if steps is None else min(steps, self.horizon)
        return [self.pull_cycle(s) for s in range(self.next_serve_step, n)]

    # --- audit ---

    def audit_lineage(self) -> List[str]:
        """Problems found in the lifecycle graphs of served plans; empty when every sample is accounted for."""
        problems = []
        for plan_id, graphs in sorted(self.graphs.items()):
            if plan_id in self.superseded:
                continue
            for g in graphs:
                g.check_acyclic()
                for sid in g.sample_ids:
                    path = g.lineage(sid)
                    if path != FULL_LINEAGE and path != ["buffered"]:
                        problems.append(f"plan {plan_id} {g.name} sample {sid}: {'->'.join(path)}")
        return problems

    def constructor_of(self, rank: int) -> DataConstructor:
        try:
            return self.constructors[constructor_of_rank(self.tree, rank, self.granularity)]
        except KeyError:
            raise NotFoundError(f"no constructor serves rank {rank}") from None
