# loader/source_loader.py
"""Source Loader actor: one per (source, shard).

Owns the file-access state for its shard, a worker pool for sample
transformations and a FIFO read buffer. Samples leave the buffer only
through plan pop lists.
"""
import heapq
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import (IntegrityError, InvalidConfigError, MalformedRecordError, MissingSampleError,
                         StorageError)
from core.logs import get_logger
from core.model import SampleMeta, SourceSpec
from loader.storage import Record, ShardReader
from planner.plan import BufferSummary, LoadingPlan, loader_key

logger = get_logger(__name__)

VOCAB_SIZE = 32000
PATCH_VOCAB = 1 << 16
STAGED_CACHE = 8


# -----------------------------
# Shard cursor
# -----------------------------

@dataclass
class Segment:
    start: int
    stop: int
    stride: int

    def indices(self) -> range:
        return range(self.start, self.stop, self.stride)


@dataclass
class ShardCursor:
    """Strided read position over one source's records.

    Actor ``j`` of ``n`` starts on ``Segment(j, N, n)``. A reshard at frontier
    ``T`` clips every segment at ``T`` and appends ``Segment(T + j, N, n')``,
    so the union over actors stays a disjoint cover of ``[0, N)``.
    """

    segments: List[Segment]
    seg: int = 0
    next: Optional[int] = None

    def __post_init__(self):
        if self.next is None:
            self.next = self.segments[0].start if self.segments else 0

    @classmethod
    def initial(cls, actor: int, actors: int, record_count: int) -> "ShardCursor":
        return cls([Segment(actor, record_count, actors)])

    def peek(self) -> Optional[int]:
        while self.seg < len(self.segments):
            s = self.segments[self.seg]
            if self.next < s.stop:
                return self.next
            self.seg += 1
            if self.seg < len(self.segments):
                self.next = self.segments[self.seg].start
        return None

    def advance(self) -> Optional[int]:
        idx = self.peek()
        if idx is not None:
            self.next = idx + self.segments[self.seg].stride
        return idx

    @property
    def exhausted(self) -> bool:
        return self.peek() is None

    def clip(self, frontier: int):
        for s in self.segments:
            s.stop = min(s.stop, frontier)
        self.peek()

    def extend(self, segment: Segment):
        was_done = self.exhausted
        self.segments.append(segment)
        if was_done:
            self.seg = len(self.segments) - 1
            self.next = segment.start

    def remaining(self) -> List[int]:
        out = []
        for i in range(self.seg, len(self.segments)):
            s = self.segments[i]
            first = self.next if i == self.seg else s.start
            out.extend(range(first, s.stop, s.stride))
        return out

    def state(self) -> Dict[str, Any]:
        return {"segments": [[s.start, s.stop, s.stride] for s in self.segments], "seg": self.seg,
                "next": self.next}

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "ShardCursor":
        return cls([Segment(*s) for s in state["segments"]], state["seg"], state["next"])


# -----------------------------
# Samples and slices
# -----------------------------

@dataclass(frozen=True)
class PreparedSample:
    meta: SampleMeta
    tokens: np.ndarray
    patches: np.ndarray
    transform_ms: float
    deferred_ms: float = 0.0


@dataclass
class BufferedSample:
    meta: SampleMeta
    record: Record
    prepared: Optional[PreparedSample] = None


@dataclass(frozen=True)
class StagedSample:
    prepared: PreparedSample
    owner: int

    @property
    def sample_id(self) -> int:
        return self.prepared.meta.sample_id


@dataclass(frozen=True)
class StagedSlice:
    plan_id: int
    loader: str
    samples: Tuple[StagedSample, ...]
    eos: bool = True
    transform_ms: float = 0.0

    @property
    def sample_ids(self) -> List[int]:
        return [s.sample_id for s in self.samples]


@dataclass(frozen=True)
class MemoryLedger:
    access_state: int
    worker_ctx: int
    buffer: int

    @property
    def total(self) -> int:
        return self.access_state + self.worker_ctx + self.buffer

    def __add__(self, other: "MemoryLedger") -> "MemoryLedger":
        return MemoryLedger(self.access_state + other.access_state, self.worker_ctx + other.worker_ctx,
                            self.buffer + other.buffer)


def prepare_record(spec: SourceSpec, record: Record, defer_images: bool = False) -> PreparedSample:
    """Deterministic stand-in for tokenization and image decoding.

    With ``defer_images`` the image share of the cost is left for the
    constructor to charge; the payload is the same either way.
    """
    rng = np.random.default_rng([spec.source_id, record.index])
    tokens = rng.integers(0, VOCAB_SIZE, size=record.text_len, dtype=np.int32)
    patches = rng.integers(0, PATCH_VOCAB, size=record.image_patches, dtype=np.int32)
    meta = SampleMeta(sample_id=spec.id_base + record.index, source_id=spec.source_id,
                      text_len=record.text_len, image_patches=record.image_patches,
                      payload_bytes=record.payload_bytes)
    total_ms = spec.transform_cost_per_sample * record.cost_scale
    deferred = 0.0
    if defer_images and meta.total_tokens:
        deferred = total_ms * meta.image_patches / meta.total_tokens
    return PreparedSample(meta, tokens, patches, total_ms - deferred, deferred)


def list_schedule_makespan(costs: Sequence[float], workers: int) -> float:
    """Finish time of ``costs`` taken in order by ``workers`` identical workers."""
    if not costs:
        return 0.0
    free = [0.0] * max(1, workers)
    for c in costs:
        t = heapq.heappop(free)
        heapq.heappush(free, t + c)
    return max(free)


# -----------------------------
# Loader actor
# -----------------------------

class SourceLoader:
    def __init__(self, spec: SourceSpec, reader: ShardReader, actor: int = 0, actors: int = 1,
                 workers: int = 1, buffer_capacity: int = 64, worker_ctx_bytes: int = 0,
                 strict: bool = False, eager: bool = False, realtime: bool = False,
                 defer_images: bool = False, read_retries: int = 2, cursor: Optional[ShardCursor] = None):
        if workers < 1 or buffer_capacity < 1:
            raise InvalidConfigError("workers and buffer_capacity must be >= 1")
        self.spec = spec
        self.reader = reader
        self.actor = actor
        self.actors = actors
        self.workers = workers
        self.buffer_capacity = buffer_capacity
        self.worker_ctx_bytes = worker_ctx_bytes
        self.strict = strict
        self.eager = eager
        self.realtime = realtime
        self.defer_images = defer_images
        self.read_retries = read_retries
        self.record_count = min(spec.record_count, reader.record_count)
        self.cursor = cursor or ShardCursor.initial(actor, actors, self.record_count)
        self.buffer: "OrderedDict[int, BufferedSample]" = OrderedDict()
        self.last_plan_id = 0
        self.ingested = 0
        self.skipped = 0
        self.busy_ms = 0.0
        self._staged: "OrderedDict[int, StagedSlice]" = OrderedDict()

    @property
    def key(self) -> str:
        return loader_key(self.spec.source_id, self.actor)

    @property
    def eos(self) -> bool:
        return self.cursor.exhausted

    @property
    def draining(self) -> bool:
        return self.actor >= self.actors

    # --- ingest ---

    def _read(self, index: int) -> Record:
        for attempt in range(self.read_retries + 1):
            try:
                return self.reader.read(index)
            except StorageError:
                if attempt == self.read_retries:
                    raise
                logger.warning("%s: read of record %d failed, retrying", self.key, index)

    def ingest(self, n: Optional[int] = None) -> List[int]:
        """Append up to ``n`` records (default: fill to capacity); returns the new sample ids."""
        room = self.buffer_capacity - len(self.buffer)
        want = room if n is None else min(n, room)
        added = []
        while len(added) < want:
            index = self.cursor.peek()
            if index is None:
                break
            try:
                record = self._read(index)
            except MalformedRecordError:
                if self.strict:
                    raise
                self.cursor.advance()
                self.skipped += 1
                logger.warning("%s: skipping malformed record %d", self.key, index)
                continue
            self.cursor.advance()
            meta = SampleMeta(sample_id=self.spec.id_base + record.index, source_id=self.spec.source_id,
                              text_len=record.text_len, image_patches=record.image_patches,
                              payload_bytes=record.payload_bytes)
            entry = BufferedSample(meta, record)
            if self.eager:
                entry.prepared = prepare_record(self.spec, record, self.defer_images)
            self.buffer[meta.sample_id] = entry
            self.ingested += 1
            added.append(meta.sample_id)
        return added

    refill = ingest

    # --- transformation ---

    def transform_sample(self, record: Record) -> PreparedSample:
        prepared = prepare_record(self.spec, record, self.defer_images)
        if self.realtime:
            time.sleep(prepared.transform_ms / 1000.0)
        return prepared

    def transform_batch(self, records: Sequence[Record]) -> Tuple[List[PreparedSample], float]:
        """Prepared samples in input order and the makespan on this actor's workers (ms)."""
        if self.realtime and len(records) > 1:
            start = time.perf_counter()
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                out = list(pool.map(self.transform_sample, records))
            return out, (time.perf_counter() - start) * 1000.0
        out = [self.transform_sample(r) for r in records]
        return out, list_schedule_makespan([p.transform_ms for p in out], self.workers)

    # --- planner-facing ---

    def summarize_buffer(self) -> BufferSummary:
        return BufferSummary(self.key, self.spec.source_id, tuple(e.meta for e in self.buffer.values()),
                             eos=self.eos)

    def execute_plan_slice(self, plan: LoadingPlan) -> StagedSlice:
        """Pop this loader's share of ``plan``, prepare it, stage it and refill the buffer."""
        if plan.plan_id in self._staged:
            return self._staged[plan.plan_id]
        if plan.plan_id <= self.last_plan_id:
            raise IntegrityError(f"{self.key}: plan {plan.plan_id} already applied (at {self.last_plan_id})")
        pops = plan.pops_for(self.key)
        missing = [sid for sid in pops if sid not in self.buffer]
        if missing:
            raise MissingSampleError(f"{self.key}: plan {plan.plan_id} pops samples not buffered {missing[:8]}")
        todo = [self.buffer[sid].record for sid in pops if self.buffer[sid].prepared is None]
        fresh, makespan = self.transform_batch(todo)
        fresh_by_id = {p.meta.sample_id: p for p in fresh}
        staged = []
        for sid in pops:
            entry = self.buffer.pop(sid)
            prepared = entry.prepared or fresh_by_id[sid]
            staged.append(StagedSample(prepared, plan.owners.get(sid, 0)))
        self.busy_ms += makespan
        self.last_plan_id = plan.plan_id
        out = StagedSlice(plan.plan_id, self.key, tuple(staged), eos=True, transform_ms=makespan)
        self._staged[plan.plan_id] = out
        while len(self._staged) > STAGED_CACHE:
            self._staged.popitem(last=False)
        # a failed refill leaves the slice staged and the unread record at the cursor
        self.ingest()
        return out

    do_plan = execute_plan_slice

    # --- resharding ---

    def next_index(self) -> int:
        idx = self.cursor.peek()
        return self.record_count if idx is None else idx

    def apply_reshard(self, frontier: int, actor: int, actors: int):
        """Clip at ``frontier`` and, unless this actor retires, take its stride beyond it."""
        self.cursor.clip(frontier)
        self.actor, self.actors = actor, actors
        if actor < actors and frontier + actor < self.record_count:
            self.cursor.extend(Segment(frontier + actor, self.record_count, actors))
        logger.info("%s resharded at %d as %d of %d", self.key, frontier, actor, actors)

    # --- memory ---

    def memory(self) -> MemoryLedger:
        return MemoryLedger(
            access_state=self.spec.access_state_bytes,
            worker_ctx=self.workers * self.worker_ctx_bytes,
            buffer=sum(e.meta.payload_bytes for e in self.buffer.values()),
        )

    # --- checkpoint ---

    def checkpoint(self) -> Dict[str, Any]:
        return {
            "key": self.key,
            "source_id": self.spec.source_id,
            "actor": self.actor,
            "actors": self.actors,
            "cursor": self.cursor.state(),
            "buffer": list(self.buffer),
            "last_plan_id": self.last_plan_id,
            "ingested": self.ingested,
            "skipped": self.skipped,
        }

    @classmethod
    def restore(cls, state: Dict[str, Any], spec: SourceSpec, reader: ShardReader, **kwargs) -> "SourceLoader":
        """Rebuild a loader from a snapshot; buffered records are re-read from storage."""
        loader = cls(spec, reader, actor=state["actor"], actors=state["actors"],
                     cursor=ShardCursor.from_state(state["cursor"]), **kwargs)
        for sid in state["buffer"]:
            record = loader._read(sid - spec.id_base)
            meta = SampleMeta(sample_id=sid, source_id=spec.source_id, text_len=record.text_len,
                              image_patches=record.image_patches, payload_bytes=record.payload_bytes)
            entry = BufferedSample(meta, record)
            if loader.eager:
                entry.prepared = prepare_record(spec, record, loader.defer_images)
            loader.buffer[sid] = entry
        loader.last_plan_id = state["last_plan_id"]
        loader.ingested = state["ingested"]
        loader.skipped = state["skipped"]
        return loader


def shard_loaders(spec: SourceSpec, reader_factory, actors: int, workers_per_actor: int,
                  **kwargs) -> List[SourceLoader]:
    """``actors`` loaders sharding ``spec``; each opens its own reader (its own access state)."""
    return [SourceLoader(spec, reader_factory(), actor=j, actors=actors, workers=workers_per_actor, **kwargs)
            for j in range(actors)]


def reshard_frontier(loaders: Sequence[SourceLoader]) -> int:
    return max(l.next_index() for l in loaders)
