# tests/test_constructor.py
import numpy as np
import pytest

from constructor.constructor import (DataConstructor, assemble, cp_partition, merge_cp, pack_first_fit, pp_filter)
from constructor.wire import content_hash, decode_payload, encode_payload
from core.errors import (InvalidInputError, MalformedPayloadError, NotFoundError, QueueStarvedError,
                         SequenceTooLongError)
from core.model import BackboneParams, CostParams, MixSchedule, ParallelismConfig, SourceSpec
from loader.source_loader import StagedSample, StagedSlice, prepare_record
from loader.storage import Record
from orchestration.primitives import PlanRequest, execute_strategy, strategy_from_config
from placetree.tree import build_tree
from runtime.faults import corrupt_header

SPEC = SourceSpec(0, "mem://constructor", 1000, 1.0)


def _prepared(lengths, patches=None):
    patches = patches or [0] * len(lengths)
    return [prepare_record(SPEC, Record(i, n, p)) for i, (n, p) in enumerate(zip(lengths, patches))]


# -----------------------------
# Packing and CP split
# -----------------------------

def test_first_fit_packing():
    assert pack_first_fit([(0, 30), (1, 70)], 100) == [[1, 0]]
    assert len(pack_first_fit([(0, 60), (1, 60), (2, 60)], 100)) == 3
    with pytest.raises(SequenceTooLongError):
        pack_first_fit([(0, 101)], 100)


def test_assemble_pads_to_the_longest_sequence():
    mb = assemble(_prepared([5, 3, 8]), max_seq_len=10, pad_multiple=3)
    assert mb.seq_lens == (8, 8)
    assert mb.offsets == ((0,), (0, 5))
    assert mb.tokens.shape == (2, 9)
    assert mb.pad_count == 2
    assert list(mb.segment_ids[1]) == [1] * 5 + [2] * 3 + [0]
    assert mb.sample_ids == (2, 0, 1)
    assert mb.token_count == 16


def test_padding_never_exceeds_max_seq_len():
    mb = assemble(_prepared([10, 2]), max_seq_len=10, pad_multiple=4)
    assert mb.tokens.shape == (2, 10)
    assert max(mb.seq_lens) <= 10
    assert mb.pad_count == 8


@pytest.mark.parametrize("splitter", ["contiguous", "zigzag"])
def test_cp_split_merges_back(splitter):
    mb = assemble(_prepared([13, 7, 21], [4, 0, 0]), max_seq_len=64, pad_multiple=8)
    shards = cp_partition(mb, 4 if splitter == "contiguous" else 2, splitter)
    tokens, segs = merge_cp(shards)
    np.testing.assert_array_equal(tokens, mb.tokens)
    np.testing.assert_array_equal(segs, mb.segment_ids)
    assert len({s.tokens.shape for s in shards}) == 1


def test_zigzag_pairs_opposite_chunks():
    mb = assemble(_prepared([16]), max_seq_len=16, pad_multiple=4)
    shards = cp_partition(mb, 2, "zigzag")
    assert shards[0].spans == ((0, 4), (12, 16))
    assert shards[1].spans == ((4, 8), (8, 12))
    with pytest.raises(InvalidInputError):
        cp_partition(assemble(_prepared([6]), 16), 4, "zigzag")


def test_pp_stub_keeps_requested_fields():
    mb = assemble(_prepared([4, 4]), max_seq_len=16)
    full = pp_filter(mb, stage=0)
    stub = pp_filter(mb, stage=1, stub_fields=("seq_lens",))
    assert full.kind == "full" and full.carries_data
    assert stub.kind == "stub" and not stub.carries_data
    assert stub.seq_lens == mb.seq_lens and stub.offsets == ()
    assert stub.shape == full.shape
    with pytest.raises(InvalidInputError):
        pp_filter(mb, stage=1, stub_fields=("attention_mask",))


# -----------------------------
# Wire format
# -----------------------------

def test_wire_round_trip_and_errors():
    mb = assemble(_prepared([6, 2]), max_seq_len=8)
    payload = pp_filter(mb, stage=0, rank=3, coords=(0, 1, 0, 1))
    data = encode_payload(payload)
    back = decode_payload(data)
    assert back.key == payload.key and back.rank == 3 and back.coords == (0, 1, 0, 1)
    np.testing.assert_array_equal(back.tokens, payload.tokens)
    assert content_hash(back) == content_hash(payload)
    for broken in (corrupt_header(data), data[:-1], data + b"\x00", b"DP"):
        with pytest.raises(MalformedPayloadError):
            decode_payload(broken)


# -----------------------------
# Constructor actor
# -----------------------------

@pytest.fixture
def planned():
    """Constructor 0 of a pp2 x cp2 x tp2 tree with one plan applied."""
    tree = build_tree(ParallelismConfig(pp=2, dp=1, cp=2, tp=2, num_microbatches=2))
    samples = _prepared([12, 30, 7, 19, 25, 3, 9, 14])
    request = PlanRequest(summaries=[s.meta for s in samples], schedule=MixSchedule.static([1.0], 4), tree=tree,
                          step=0, plan_id=1, batch_size=8, cost_params=CostParams(BackboneParams(2, 64)))
    _, plan = execute_strategy(strategy_from_config("backbone_balance"), request)
    cons = DataConstructor(0, tree, max_seq_len=128)
    cons.receive(StagedSlice(1, "0.0", tuple(StagedSample(s, 0) for s in samples)))
    built = cons.do_plan(plan)
    return cons, plan, built


def test_plan_builds_payloads_per_rank(planned):
    cons, plan, built = planned
    assert len(built) == 2
    # rank 0: stage 0, cp 0, tp 0
    first = cons.peek(0)
    assert first.kind == "full" and first.shape[1] * 2 == built[0].length
    # rank 1 is a TP follower of rank 0
    follower = cons.peek(1)
    assert follower.kind == "redirect" and follower.root == 0
    # rank 4 sits on the second pipeline stage
    assert cons.peek(4).kind == "stub"
    assert cons.do_plan(plan) == []


def test_serving_every_consumer_delivers_and_frees(planned):
    cons, plan, built = planned
    cons.drain_events()
    for _ in built:
        for rank in range(8):
            cons.serve(rank)
    events = cons.drain_events()
    assert [e[0] for e in events] == ["delivered", "delivered"]
    assert sorted(s for e in events for s in e[3]) == sorted(plan.owners)
    assert cons.store == {}
    with pytest.raises(QueueStarvedError):
        cons.serve(0)
    with pytest.raises(NotFoundError):
        cons.serve(99)


def test_slice_without_eos_is_refused():
    cons = DataConstructor(0, build_tree(ParallelismConfig()), max_seq_len=64)
    with pytest.raises(MalformedPayloadError):
        cons.receive(StagedSlice(1, "0.0", (), eos=False))
    cons.receive(StagedSlice(1, "0.0", tuple(StagedSample(s, 1) for s in _prepared([4]))))
    assert cons.store == {}


def test_reshard_releases_untouched_microbatches(planned):
    cons, plan, built = planned
    for rank in range(8):
        cons.serve(rank)
    grown = build_tree(ParallelismConfig(pp=2, dp=2, cp=2, tp=2, num_microbatches=2))
    released = cons.reshard_resident(grown)
    assert sorted(released) == sorted(built[1].sample_ids)
    assert cons.pending(0) == 0
    assert len(cons.take(released)) == len(released)
    assert not any(sid in cons.store for sid in released)
