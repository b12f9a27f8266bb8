# tests/test_loader.py
import pytest

from core.errors import IntegrityError, MalformedRecordError, MissingSampleError, NotFoundError, StorageError
from core.model import SourceSpec
from loader.source_loader import (Segment, ShardCursor, SourceLoader, list_schedule_makespan, prepare_record,
                                  reshard_frontier, shard_loaders)
from loader.storage import InMemoryStorage, LocalFileStorage, Record, open_shard, write_shard
from planner.plan import LoadingPlan


def _plan(plan_id, pops, owner=0):
    return LoadingPlan(plan_id, plan_id - 1, {k: tuple(v) for k, v in pops.items()},
                       owners={s: owner for v in pops.values() for s in v})


# -----------------------------
# Cursor
# -----------------------------

def test_cursor_strides_and_state():
    cursor = ShardCursor.initial(1, 3, 10)
    assert [cursor.advance() for _ in range(4)] == [1, 4, 7, None]
    assert cursor.exhausted
    restored = ShardCursor.from_state(ShardCursor.initial(0, 2, 10).state())
    assert restored.remaining() == [0, 2, 4, 6, 8]


def test_reshard_keeps_a_disjoint_cover(loader_factory):
    loaders = [loader_factory(actor=0, actors=2), loader_factory(actor=1, actors=2)]
    for loader in loaders:
        loader.ingest()
    frontier = reshard_frontier(loaders)
    assert frontier == 21
    for j, loader in enumerate(loaders):
        loader.apply_reshard(frontier, j, 3)
    fresh = loader_factory(actor=2, actors=3, cursor=ShardCursor([Segment(frontier + 2, 100, 3)]))
    loaders.append(fresh)

    seen = []
    for loader in loaders:
        seen.extend(loader.buffer)
        seen.extend(loader.cursor.remaining())
    assert sorted(seen) == list(range(100))


def test_retiring_actor_drains(loader_factory):
    loader = loader_factory(actor=1, actors=2)
    loader.ingest()
    loader.apply_reshard(reshard_frontier([loader]), 1, 1)
    assert loader.draining
    assert loader.eos
    assert len(loader.buffer) == 10


# -----------------------------
# Buffer and plan execution
# -----------------------------

def test_ingest_fills_to_capacity(loader_factory):
    loader = loader_factory()
    assert loader.ingest(3) == [0, 1, 2]
    assert len(loader.ingest()) == 7
    assert loader.ingest() == []
    summary = loader.summarize_buffer()
    assert summary.loader == "0.0"
    assert summary.sample_ids == list(range(10))
    assert not summary.eos


def test_execute_plan_slice_pops_stages_and_refills(loader_factory):
    loader = loader_factory()
    loader.ingest()
    staged = loader.execute_plan_slice(_plan(1, {"0.0": [3, 1]}, owner=1))
    assert staged.sample_ids == [3, 1]
    assert all(s.owner == 1 for s in staged.samples)
    assert staged.eos
    assert len(loader.buffer) == 10
    assert 3 not in loader.buffer and 10 in loader.buffer
    # redelivery of the same plan id hits the staging cache
    assert loader.execute_plan_slice(_plan(1, {"0.0": [3, 1]})) is staged
    assert loader.last_plan_id == 1


def test_plan_for_unbuffered_sample_fails(loader_factory):
    loader = loader_factory()
    loader.ingest()
    with pytest.raises(MissingSampleError):
        loader.execute_plan_slice(_plan(1, {"0.0": [55]}))
    loader.execute_plan_slice(_plan(2, {"0.0": [0]}))
    with pytest.raises(IntegrityError):
        loader.execute_plan_slice(_plan(1, {}))


def test_other_loaders_pops_are_ignored(loader_factory):
    loader = loader_factory()
    loader.ingest()
    staged = loader.execute_plan_slice(_plan(1, {"1.0": [1_000_000_000]}))
    assert staged.samples == ()
    assert loader.last_plan_id == 1


def test_checkpoint_restore_reproduces_state(loader_factory, spec, memory):
    loader = loader_factory()
    loader.ingest()
    loader.execute_plan_slice(_plan(1, {"0.0": [0, 4]}))
    state = loader.checkpoint()
    restored = SourceLoader.restore(state, spec, memory.open(spec.uri), buffer_capacity=10)
    assert restored.checkpoint() == state
    a = loader.execute_plan_slice(_plan(2, {"0.0": [5]}))
    b = restored.execute_plan_slice(_plan(2, {"0.0": [5]}))
    assert a.sample_ids == b.sample_ids
    assert (a.samples[0].prepared.tokens == b.samples[0].prepared.tokens).all()
    assert loader.checkpoint() == restored.checkpoint()


def test_malformed_records_skipped_or_raised(spec, memory):
    rows = [Record(0, 4).encode(), b"{not json", Record(2, 6).encode(), b'{"index": 3, "text_len": -1}']
    memory.put_raw(spec.uri, rows)
    lenient = SourceLoader(spec, memory.open(spec.uri), buffer_capacity=8)
    assert lenient.ingest() == [0, 2]
    assert lenient.skipped == 2
    strict = SourceLoader(spec, memory.open(spec.uri), buffer_capacity=8, strict=True)
    with pytest.raises(MalformedRecordError):
        strict.ingest()


def test_memory_ledger_counts_access_state_once(loader_factory, spec):
    loader = loader_factory(workers=4, worker_ctx_bytes=1 << 20)
    loader.ingest()
    ledger = loader.memory()
    assert ledger.access_state == spec.access_state_bytes
    assert ledger.worker_ctx == 4 << 20
    assert ledger.buffer == sum(e.meta.payload_bytes for e in loader.buffer.values())
    assert ledger.total == ledger.access_state + ledger.worker_ctx + ledger.buffer


def test_shard_loaders_open_their_own_readers(spec, records, memory):
    memory.put(spec.uri, records)
    opened = []

    def factory():
        opened.append(1)
        return memory.open(spec.uri)

    loaders = shard_loaders(spec, factory, actors=3, workers_per_actor=2)
    assert [l.key for l in loaders] == ["0.0", "0.1", "0.2"]
    assert len(opened) == 3
    assert all(l.workers == 2 for l in loaders)


# -----------------------------
# Transformation
# -----------------------------

def test_prepare_record_is_deterministic(spec):
    rec = Record(7, text_len=12, image_patches=9)
    a, b = prepare_record(spec, rec), prepare_record(spec, rec)
    assert (a.tokens == b.tokens).all() and (a.patches == b.patches).all()
    assert a.tokens.shape == (12,) and a.patches.shape == (9,)
    deferred = prepare_record(spec, rec, defer_images=True)
    assert deferred.transform_ms + deferred.deferred_ms == pytest.approx(a.transform_ms)
    assert deferred.deferred_ms == pytest.approx(9 / 21)


def test_transform_sample_matches_prepare_record(loader_factory, spec):
    rec = Record(3, text_len=5, image_patches=4)
    out = loader_factory().transform_sample(rec)
    assert (out.tokens == prepare_record(spec, rec).tokens).all()
    assert out.meta.source_id == spec.source_id


def test_list_schedule_makespan():
    assert list_schedule_makespan([3, 3, 3, 3], 2) == 6
    assert list_schedule_makespan([5, 1, 1], 1) == 7
    assert list_schedule_makespan([], 4) == 0.0


# -----------------------------
# Storage
# -----------------------------

@pytest.mark.parametrize("ext", [".jsonl", ".bin"])
def test_file_shards_round_trip(tmp_path, records, ext):
    path = str(tmp_path / f"shard{ext}")
    digest = write_shard(path, records)
    assert len(digest) == 64
    reader = open_shard(path)
    assert reader.record_count == 100
    assert reader.read(42) == records[42]
    reader.seek(99)
    assert reader.next_record() == records[99]
    assert reader.next_record() is None


def test_storage_errors(tmp_path):
    with pytest.raises(NotFoundError):
        InMemoryStorage().open("mem://missing")
    with pytest.raises(NotFoundError):
        LocalFileStorage().open(str(tmp_path / "missing.jsonl"))
    with pytest.raises(StorageError):
        LocalFileStorage().open(str(tmp_path / "shard.parquet"))
    truncated = tmp_path / "bad.bin"
    truncated.write_bytes(b"\x10\x00\x00\x00{}")
    with pytest.raises(StorageError):
        open_shard(str(truncated))


def test_loader_reads_at_most_the_declared_records(memory, records):
    spec = SourceSpec(1, "mem://short", 40, 1.0)
    memory.put(spec.uri, records)
    loader = SourceLoader(spec, memory.open(spec.uri), buffer_capacity=64)
    assert len(loader.ingest()) == 40
    assert loader.eos
    assert min(loader.buffer) == spec.id_base


# -----------------------------
# Read failures
# -----------------------------

class FlakyReader:
    """Fails reads of one record a fixed number of times, then recovers."""

    def __init__(self, inner, bad, failures):
        self.inner, self.bad, self.failures = inner, bad, failures
        self.uri = inner.uri

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def read(self, index):
        if index == self.bad and self.failures > 0:
            self.failures -= 1
            raise StorageError(f"{self.uri}: transient failure on record {index}")
        return self.inner.read(index)


def test_failed_read_keeps_the_record_for_the_next_ingest(spec, records, memory):
    memory.put(spec.uri, records)
    loader = SourceLoader(spec, FlakyReader(memory.open(spec.uri), bad=3, failures=2),
                          buffer_capacity=8, read_retries=1)
    with pytest.raises(StorageError):
        loader.ingest()
    assert sorted(loader.buffer) == [0, 1, 2]
    assert loader.cursor.peek() == 3
    loader.ingest()
    assert sorted(loader.buffer) == list(range(8))


def test_failed_refill_keeps_the_staged_slice(spec, records, memory):
    memory.put(spec.uri, records)
    loader = SourceLoader(spec, FlakyReader(memory.open(spec.uri), bad=4, failures=1),
                          buffer_capacity=4, read_retries=0)
    loader.ingest()
    with pytest.raises(StorageError):
        loader.execute_plan_slice(_plan(1, {"0.0": [0, 1]}))
    assert loader.execute_plan_slice(_plan(1, {"0.0": [0, 1]})).sample_ids == [0, 1]
    assert 4 not in loader.buffer and loader.cursor.peek() == 4
