# constructor/constructor.py
"""Data Constructor: assembles microbatches for its rank group and serves them."""
import math
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Any, Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from core.errors import (InvalidInputError, MalformedPayloadError, MissingSampleError, NotFoundError,
                         QueueStarvedError, SequenceTooLongError)
from core.logs import get_logger
from core.model import SampleMeta
from loader.source_loader import PreparedSample, StagedSlice
from placetree.tree import ClientPlaceTree, RemapTable, broadcast_root, constructor_ranks
from planner.plan import BinAssignment, LoadingPlan

logger = get_logger(__name__)

SPLITTERS = ("contiguous", "zigzag")
STUB_FIELDS = ("seq_lens", "offsets", "segment_ids")
DEFAULT_STUB_FIELDS = ("seq_lens", "offsets")

MicrobatchKey = Tuple[int, str, int, int]


# -----------------------------
# Microbatch assembly
# -----------------------------

@dataclass(frozen=True)
class Microbatch:
    plan_id: int
    graph: str
    node: int
    microbatch: int
    sample_ids: Tuple[int, ...]
    tokens: np.ndarray
    segment_ids: np.ndarray
    seq_lens: Tuple[int, ...]
    offsets: Tuple[Tuple[int, ...], ...]
    pad_count: int

    @property
    def key(self) -> MicrobatchKey:
        return (self.plan_id, self.graph, self.node, self.microbatch)

    @property
    def length(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def token_count(self) -> int:
        return sum(self.seq_lens)


def sample_sequence(sample: PreparedSample) -> np.ndarray:
    return np.concatenate([sample.tokens, sample.patches]).astype(np.int32, copy=False)


def pack_first_fit(lengths: Sequence[Tuple[int, int]], max_seq_len: int) -> List[List[int]]:
    """First-fit decreasing: ``(sample_id, length)`` pairs into sequences of at most ``max_seq_len``."""
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i][1], i))
    used: List[int] = []
    seqs: List[List[int]] = []
    for i in order:
        sid, n = lengths[i]
        if n > max_seq_len:
            raise SequenceTooLongError(f"sample {sid} has {n} tokens, max_seq_len is {max_seq_len}")
        for j, u in enumerate(used):
            if u + n <= max_seq_len:
                used[j] += n
                seqs[j].append(sid)
                break
        else:
            used.append(n)
            seqs.append([sid])
    return seqs


def assemble(samples: Sequence[PreparedSample], max_seq_len: int, pad_multiple: int = 1, plan_id: int = 0,
             graph: str = "sequence", node: int = 0, microbatch: int = 0) -> Microbatch:
    """Pack one bin's samples, then pad every sequence to the bin max.

    The width is rounded up to ``pad_multiple`` but never past ``max_seq_len``.
    """
    by_id = {s.meta.sample_id: s for s in samples}
    seqs = pack_first_fit([(s.meta.sample_id, s.meta.total_tokens) for s in samples], max_seq_len)
    rows, segs, lens, offsets = [], [], [], []
    for members in seqs:
        parts = [sample_sequence(by_id[sid]) for sid in members]
        starts = tuple(int(x) for x in np.cumsum([0] + [len(p) for p in parts[:-1]]))
        rows.append(np.concatenate(parts) if parts else np.zeros(0, np.int32))
        segs.append(np.concatenate([np.full(len(p), k + 1, np.int32) for k, p in enumerate(parts)]))
        lens.append(int(sum(len(p) for p in parts)))
        offsets.append(starts)
    width = max(lens, default=0)
    width = min(int(math.ceil(width / pad_multiple) * pad_multiple), max_seq_len) if width else 0
    tokens = np.zeros((len(rows), width), dtype=np.int32)
    segment_ids = np.zeros((len(rows), width), dtype=np.int32)
    for i, (row, seg) in enumerate(zip(rows, segs)):
        tokens[i, :len(row)] = row
        segment_ids[i, :len(seg)] = seg
    return Microbatch(
        plan_id=plan_id, graph=graph, node=node, microbatch=microbatch,
        sample_ids=tuple(sid for members in seqs for sid in members),
        tokens=tokens, segment_ids=segment_ids, seq_lens=tuple(lens), offsets=tuple(offsets),
        pad_count=sum(width - n for n in lens),
    )


# -----------------------------
# Context parallel split
# -----------------------------

@dataclass(frozen=True)
class CPShard:
    cp_rank: int
    tokens: np.ndarray
    segment_ids: np.ndarray
    spans: Tuple[Tuple[int, int], ...]


def _spans(length: int, cp: int, splitter: str) -> List[Tuple[Tuple[int, int], ...]]:
    if splitter == "contiguous":
        if length % cp:
            raise InvalidInputError(f"length {length} not divisible by cp={cp}")
        c = length // cp
        return [((i * c, (i + 1) * c),) for i in range(cp)]
    if splitter == "zigzag":
        if length % (2 * cp):
            raise InvalidInputError(f"length {length} not divisible by 2*cp={2 * cp}")
        c = length // (2 * cp)
        return [((i * c, (i + 1) * c), ((2 * cp - 1 - i) * c, (2 * cp - i) * c)) for i in range(cp)]
    raise InvalidInputError(f"unknown cp splitter {splitter!r}; expected one of {SPLITTERS}")


def cp_partition(mb: Microbatch, cp: int, splitter: str = "contiguous") -> Tuple[CPShard, ...]:
    """Split the sequence axis across ``cp`` ranks.

    Contiguous shards are views of the assembled batch; zig-zag shards pair
    chunk ``i`` with chunk ``2cp-1-i`` and are copies.
    """
    if cp < 1:
        raise InvalidInputError(f"cp must be >= 1, got {cp}")
    out = []
    for i, spans in enumerate(_spans(mb.length, cp, splitter)):
        if len(spans) == 1:
            a, b = spans[0]
            tok, seg = mb.tokens[:, a:b], mb.segment_ids[:, a:b]
        else:
            tok = np.concatenate([mb.tokens[:, a:b] for a, b in spans], axis=1)
            seg = np.concatenate([mb.segment_ids[:, a:b] for a, b in spans], axis=1)
        out.append(CPShard(i, tok, seg, spans))
    return tuple(out)


def merge_cp(shards: Sequence[CPShard]) -> Tuple[np.ndarray, np.ndarray]:
    rows = shards[0].tokens.shape[0] if shards else 0
    width = sum(b - a for s in shards for a, b in s.spans)
    tokens = np.zeros((rows, width), dtype=np.int32)
    segment_ids = np.zeros((rows, width), dtype=np.int32)
    for s in shards:
        pos = 0
        for a, b in s.spans:
            tokens[:, a:b] = s.tokens[:, pos:pos + b - a]
            segment_ids[:, a:b] = s.segment_ids[:, pos:pos + b - a]
            pos += b - a
    return tokens, segment_ids


# -----------------------------
# Rank payloads
# -----------------------------

PAYLOAD_KINDS = ("full", "stub", "redirect", "manifest")


@dataclass(frozen=True)
class RankPayload:
    plan_id: int
    rank: int
    coords: Tuple[int, int, int, int]
    graph: str
    node: int
    microbatch: int
    kind: str
    sample_ids: Tuple[int, ...] = ()
    seq_lens: Tuple[int, ...] = ()
    offsets: Tuple[Tuple[int, ...], ...] = ()
    shape: Tuple[int, int] = (0, 0)
    pad_count: int = 0
    tokens: Optional[np.ndarray] = None
    segment_ids: Optional[np.ndarray] = None
    root: Optional[int] = None
    patch_counts: Tuple[int, ...] = ()

    @property
    def key(self) -> MicrobatchKey:
        return (self.plan_id, self.graph, self.node, self.microbatch)

    @property
    def carries_data(self) -> bool:
        return self.tokens is not None


def pp_filter(mb: Microbatch, stage: int, rank: int = 0, coords: Tuple[int, int, int, int] = (0, 0, 0, 0),
              stub_fields: Sequence[str] = DEFAULT_STUB_FIELDS, tokens: Optional[np.ndarray] = None,
              segment_ids: Optional[np.ndarray] = None) -> RankPayload:
    """Full payload for the first pipeline stage, a metadata stub for the rest.

    ``tokens``/``segment_ids`` override the microbatch arrays (a CP shard).
    """
    tok = mb.tokens if tokens is None else tokens
    seg = mb.segment_ids if segment_ids is None else segment_ids
    common = dict(plan_id=mb.plan_id, rank=rank, coords=tuple(coords), graph=mb.graph, node=mb.node,
                  microbatch=mb.microbatch, sample_ids=mb.sample_ids, shape=tuple(int(x) for x in tok.shape),
                  pad_count=mb.pad_count)
    if stage == 0:
        return RankPayload(kind="full", seq_lens=mb.seq_lens, offsets=mb.offsets, tokens=tok, segment_ids=seg,
                           **common)
    unknown = set(stub_fields) - set(STUB_FIELDS)
    if unknown:
        raise InvalidInputError(f"unknown stub fields {sorted(unknown)}")
    return RankPayload(
        kind="stub",
        seq_lens=mb.seq_lens if "seq_lens" in stub_fields else (),
        offsets=mb.offsets if "offsets" in stub_fields else (),
        segment_ids=seg if "segment_ids" in stub_fields else None,
        **common,
    )


# -----------------------------
# Constructor actor
# -----------------------------

class DataConstructor:
    def __init__(self, constructor_id: int, tree: ClientPlaceTree, max_seq_len: int,
                 splitter: str = "contiguous", stub_fields: Sequence[str] = DEFAULT_STUB_FIELDS,
                 granularity: str = "dp"):
        if splitter not in SPLITTERS:
            raise InvalidInputError(f"unknown cp splitter {splitter!r}")
        self.cid = constructor_id
        self.tree = tree
        self.max_seq_len = max_seq_len
        self.splitter = splitter
        self.stub_fields = tuple(stub_fields)
        self.granularity = granularity
        self.store: Dict[int, PreparedSample] = {}
        self.microbatches: "OrderedDict[MicrobatchKey, Microbatch]" = OrderedDict()
        self.manifests: "OrderedDict[MicrobatchKey, Tuple[int, ...]]" = OrderedDict()
        self.expected: Dict[MicrobatchKey, Set[int]] = {}
        self.served: Dict[MicrobatchKey, Set[int]] = {}
        self.queues: Dict[Tuple[str, int], Deque[RankPayload]] = {}
        self.events: List[Tuple[str, str, int, Tuple[int, ...]]] = []
        self.applied: Set[int] = set()
        self.materialized = 0
        self.busy_ms = 0.0

    # --- intake ---

    def receive(self, staged: StagedSlice):
        """Accept a loader slice; only complete slices (end-of-stream marked) are taken."""
        if not staged.eos:
            raise MalformedPayloadError(f"slice {staged.loader}/{staged.plan_id} has no end-of-stream marker")
        self.accept(s.prepared for s in staged.samples if s.owner == self.cid)

    def accept(self, samples: Iterable[PreparedSample]):
        for s in samples:
            self.store[s.meta.sample_id] = s
            self.busy_ms += s.deferred_ms

    def take(self, sample_ids: Iterable[int]) -> List[PreparedSample]:
        return [self.store.pop(sid) for sid in sample_ids if sid in self.store]

    @property
    def ranks(self) -> Set[int]:
        return set(constructor_ranks(self.tree, self.cid, self.granularity)) | {r for _, r in self.queues}

    # --- plan execution ---

    def _pad_multiple(self, transforms: Sequence[str]) -> int:
        if "cp_split" not in transforms:
            return 1
        cp = self.tree.config.cp
        return 2 * cp if self.splitter == "zigzag" else cp

    def _enqueue(self, payload: RankPayload):
        self.queues.setdefault((payload.graph, payload.rank), deque()).append(payload)

    def _root_of(self, rank: int, dims: Sequence[str], consumers: Set[int], leaves: Sequence[int]) -> int:
        if dims:
            return broadcast_root(self.tree, rank, dims)
        return min(set(leaves) & consumers)

    def assemble_bin(self, plan: LoadingPlan, b: BinAssignment) -> Microbatch:
        missing = [sid for sid in b.members if sid not in self.store]
        if missing:
            raise MissingSampleError(f"constructor {self.cid}: bin {b.node}/{b.microbatch} of plan "
                                     f"{plan.plan_id} lacks samples {missing[:8]}")
        transforms = plan.transforms.get(b.graph, ())
        mb = assemble([self.store[sid] for sid in b.members], self.max_seq_len, self._pad_multiple(transforms),
                      plan.plan_id, b.graph, b.node, b.microbatch)
        self.materialized += 1
        return mb

    def do_plan(self, plan: LoadingPlan, metas: Optional[Mapping[int, SampleMeta]] = None) -> List[Microbatch]:
        """Assemble this constructor's bins of ``plan`` and queue a payload per leaf rank."""
        if plan.plan_id in self.applied:
            return []
        built = []
        for b in plan.bins_for(self.cid):
            transforms = plan.transforms.get(b.graph, ())
            consumers = set(plan.consumers.get(b.graph, b.leaves))
            dims = [t.split(":", 1)[1] for t in transforms if t.startswith("broadcast:")]
            key = (plan.plan_id, b.graph, b.node, b.microbatch)
            takers = [r for r in b.leaves if r in consumers]
            if b.graph != plan.primary:
                self._queue_manifest(plan, b, metas or {})
                self.manifests[key] = b.members
                self.expected[key] = set(takers)
                self.events.append(("assembled", b.graph, plan.plan_id, b.members))
                continue
            mb = self.assemble_bin(plan, b)
            shards = cp_partition(mb, self.tree.config.cp, self.splitter) if "cp_split" in transforms else None
            for r in b.leaves:
                coords = self.tree.leaf(r).coords
                if r not in consumers:
                    self._enqueue(RankPayload(plan.plan_id, r, coords, b.graph, b.node, b.microbatch, "redirect",
                                              sample_ids=mb.sample_ids,
                                              root=self._root_of(r, dims, consumers, b.leaves)))
                    continue
                shard = shards[coords[2]] if shards else None
                stage = coords[0] if "pp_stub" in transforms else 0
                self._enqueue(pp_filter(mb, stage, r, coords, self.stub_fields,
                                        shard.tokens if shard else None, shard.segment_ids if shard else None))
            self.microbatches[key] = mb
            self.expected[key] = set(takers)
            self.events.append(("assembled", b.graph, plan.plan_id, b.members))
            built.append(mb)
        self.applied.add(plan.plan_id)
        return built

    def _queue_manifest(self, plan: LoadingPlan, b: BinAssignment, metas: Mapping[int, SampleMeta]):
        counts = []
        for sid in b.members:
            meta = metas.get(sid) or (self.store[sid].meta if sid in self.store else None)
            counts.append(meta.image_patches if meta else 0)
        for r in b.leaves:
            self._enqueue(RankPayload(plan.plan_id, r, self.tree.leaf(r).coords, b.graph, b.node, b.microbatch,
                                      "manifest", sample_ids=b.members, patch_counts=tuple(counts)))

    # --- serving ---

    def pending(self, rank: int, graph: str = "sequence") -> int:
        return len(self.queues.get((graph, rank), ()))

    def peek(self, rank: int, graph: str = "sequence") -> Optional[RankPayload]:
        queue = self.queues.get((graph, rank))
        return queue[0] if queue else None

    def serve(self, rank: int, graph: str = "sequence") -> RankPayload:
        """Next payload for ``rank``; raises QueueStarvedError when the queue is empty."""
        if rank not in self.ranks:
            raise NotFoundError(f"rank {rank} is not served by constructor {self.cid}")
        queue = self.queues.get((graph, rank))
        if not queue:
            raise QueueStarvedError(f"constructor {self.cid}: no {graph} payload queued for rank {rank}")
        payload = queue.popleft()
        if payload.kind != "redirect":
            self._mark_served(payload.key, rank)
        return payload

    def _mark_served(self, key: MicrobatchKey, rank: int):
        served = self.served.setdefault(key, set())
        served.add(rank)
        if served >= self.expected.get(key, set()):
            members = self.manifests.pop(key, None)
            if members is None:
                mb = self.microbatches.pop(key)
                members = mb.sample_ids
                for sid in members:
                    self.store.pop(sid, None)
            self.expected.pop(key, None)
            self.served.pop(key, None)
            self.events.append(("delivered", key[1], key[0], tuple(members)))

    def drain_events(self) -> List[Tuple[str, str, int, Tuple[int, ...]]]:
        out, self.events = self.events, []
        return out

    # --- resharding ---

    def reshard_resident(self, new_tree: ClientPlaceTree, remap: Optional[RemapTable] = None) -> List[int]:
        """Release every microbatch no rank has started consuming; returns their sample ids.

        The samples stay in ``store`` until the re-plan moves them; partly
        served microbatches finish on the old layout.
        """
        released: List[int] = []
        if remap is not None and remap.is_identity:
            return released
        untouched = [k for k in list(self.microbatches) + list(self.manifests) if not self.served.get(k)]
        for key in untouched:
            if key in self.microbatches:
                released.extend(self.microbatches.pop(key).sample_ids)
            else:
                self.manifests.pop(key)
            self.expected.pop(key, None)
        gone = set(untouched)
        for qkey in list(self.queues):
            kept = deque(p for p in self.queues[qkey] if p.key not in gone)
            if kept:
                self.queues[qkey] = kept
            else:
                del self.queues[qkey]
        self.tree = new_tree
        logger.info("constructor %d released %d resident samples for reshard", self.cid, len(released))
        return released

    def ledger(self) -> Dict[str, Any]:
        return {"constructor": self.cid, "materialized": self.materialized, "resident": len(self.store),
                "queued": sum(len(q) for q in self.queues.values())}
