# tests/test_orchestration.py
import numpy as np
import pytest

from core.errors import BatchShapeError, IncompletePlanError, InvalidConfigError, InvalidInputError, IntegrityError
from core.model import BackboneParams, CostParams, EncoderParams, MixSchedule, ParallelismConfig, SampleMeta
from dgraph.graph import State, init_from_buffer
from orchestration.partition import (bin_loads, greedy_binpack, karmarkar_karp, optimal_max_load,
                                     optimal_two_way_difference, resolve_method, run_partitioner, sequential_layout)
from orchestration.primitives import (Op, Pipeline, PlanRequest, Strategy, balance, bins_of, broadcast_at, cost,
                                      distribute, execute_strategy, largest_remainder, mix, quota_counts,
                                      sample_all, select_samples, strategy_from_config)
from placetree.tree import build_tree
from tests.conftest import metas_of


def _items(costs):
    return [(i, c) for i, c in enumerate(costs)]


def _spread(partition, costs):
    loads = bin_loads(partition, dict(_items(costs)))
    return max(loads) - min(loads)


# -----------------------------
# Partitioners
# -----------------------------

def test_two_way_values():
    costs = [8, 7, 6, 5, 4]
    assert _spread(greedy_binpack(_items(costs), 2), costs) == 4
    assert _spread(karmarkar_karp(_items(costs), 2), costs) == 2
    assert optimal_two_way_difference(costs) == 0


def test_partitioners_conserve_items_and_stay_above_optimum():
    rng = np.random.default_rng(11)
    kk_wins = 0
    trials = 1000
    for _ in range(trials):
        n = int(rng.integers(2, 15))
        costs = [float(x) for x in rng.integers(1, 1_000_000, size=n)]
        best = optimal_two_way_difference(costs)
        greedy = run_partitioner("greedy", _items(costs), 2)
        kk = run_partitioner("kk", _items(costs), 2)
        for part in (greedy, kk):
            assert sorted(i for b in part for i in b) == list(range(n))
            assert _spread(part, costs) >= best - 1e-9
        kk_wins += _spread(kk, costs) <= _spread(greedy, costs) + 1e-9
    assert kk_wins / trials >= 0.95


def test_multiway_against_exhaustive_max_load():
    rng = np.random.default_rng(5)
    for _ in range(30):
        costs = [float(x) for x in rng.integers(1, 100, size=8)]
        best = optimal_max_load(costs, 3)
        for method in ("greedy", "karmarkar_karp"):
            loads = bin_loads(run_partitioner(method, _items(costs), 3), dict(_items(costs)))
            assert max(loads) >= best - 1e-9


def test_sequential_layout_is_contiguous():
    assert sequential_layout(_items([1] * 7), 3) == [[0, 1, 2], [3, 4], [5, 6]]


def test_capacity_bounds_bin_sizes():
    part = greedy_binpack(_items([9, 1, 1, 1, 1, 1]), 2, capacity=3)
    assert sorted(len(b) for b in part) == [3, 3]
    with pytest.raises(BatchShapeError):
        greedy_binpack(_items([1] * 7), 2, capacity=3)


def test_partitioner_edge_cases():
    assert run_partitioner("kk", _items([3, 2]), 1) == [[0, 1]]
    assert karmarkar_karp([], 3) == [[], [], []]
    with pytest.raises(InvalidInputError):
        resolve_method("simulated_annealing")
    with pytest.raises(InvalidInputError):
        greedy_binpack(_items([1, -2]), 2)


# -----------------------------
# mix
# -----------------------------

def test_largest_remainder_is_exact():
    assert largest_remainder([0.7, 0.2, 0.1], 100) == [70, 20, 10]
    assert sum(largest_remainder([1 / 3] * 3, 10)) == 10
    assert largest_remainder([1 / 3] * 3, 10) == [4, 3, 3]


def test_quota_shortfall_moves_to_open_sources():
    assert quota_counts([0.5, 0.5], [3, 100], 20) == [3, 17]
    assert quota_counts([1.0, 0.0], [5, 100], 20) == [5, 0]


def test_quota_selection_is_fifo_within_source():
    pop = [SampleMeta(i, i % 2, 4) for i in range(20)]
    chosen = select_samples(pop, [0.5, 0.5], step=0, rng_seed=1, batch_size=6)
    assert chosen == [0, 1, 2, 3, 4, 5]


def test_bernoulli_fractions_follow_weights():
    weights = [0.7, 0.2, 0.1]
    per_source = 34_000
    pop = [SampleMeta(s * per_source + i, s, 1) for s in range(3) for i in range(per_source)]
    chosen = select_samples(pop, weights, step=3, rng_seed=42)
    counts = np.bincount([sid // per_source for sid in chosen], minlength=3)
    assert np.allclose(counts / counts.sum(), weights, atol=0.02)
    assert np.allclose(counts / per_source, weights, atol=0.01)
    # same key, same draw
    assert chosen == select_samples(pop, weights, step=3, rng_seed=42)


def test_mix_rejects_weight_length_mismatch():
    g = init_from_buffer(metas_of([4, 4]))
    with pytest.raises(InvalidInputError):
        mix(g, MixSchedule.static([0.5, 0.5], 4), 0, 0, batch_size=2, num_sources=3)
    mix(g, MixSchedule.static([1.0], 4), 0, 0, batch_size=1)
    assert g.samples_in(State.SAMPLED) == [0]
    with pytest.raises(IntegrityError):
        mix(g, MixSchedule.static([1.0], 4), 1, 0, batch_size=1)


# -----------------------------
# distribute / cost / balance
# -----------------------------

def _balanced(method, lengths, dp=1, m=4, intra_reorder=True):
    tree = build_tree(ParallelismConfig(dp=dp, num_microbatches=m))
    g = init_from_buffer(metas_of(lengths), name="sequence")
    sample_all(g, 0)
    distribute(g, tree, "DP")
    cost(g, "text_len")
    balance(g, method, m, intra_reorder)
    return g


def _max_mean(g):
    costs = [b.cost for b in bins_of(g)]
    return max(costs) / (sum(costs) / len(costs))


def test_balance_flattens_skewed_bins():
    lengths = [9, 9, 9, 9] + [1] * 12
    assert _max_mean(_balanced("sequential", lengths)) == pytest.approx(3.0)
    assert _max_mean(_balanced("karmarkar_karp", lengths)) == pytest.approx(1.0)
    assert _max_mean(_balanced("karmarkar_karp", lengths, intra_reorder=False)) == pytest.approx(3.0)


def test_balance_bins_every_sample_once():
    rng = np.random.default_rng(0)
    lengths = rng.integers(1, 500, size=48)
    g = _balanced("greedy", lengths, dp=4, m=3)
    bins = bins_of(g)
    assert len(bins) == 12
    members = sorted(s for b in bins for s in b.members)
    assert members == list(range(48))
    assert all(g.state_of(s) == State.BINNED for s in members)


def test_balance_requires_cost_and_distribute():
    tree = build_tree(ParallelismConfig(dp=2, num_microbatches=2))
    g = init_from_buffer(metas_of([1, 2, 3, 4]))
    sample_all(g, 0)
    with pytest.raises(IncompletePlanError):
        balance(g)
    distribute(g, tree, "DP")
    with pytest.raises(IncompletePlanError):
        balance(g)
    cost(g, "tokens")
    with pytest.raises(BatchShapeError):
        balance(g, m=3, strict_batch=True)


def test_cost_functions():
    g = init_from_buffer([SampleMeta(0, 0, 10, 4)])
    cost(g, "quadratic")
    assert g.annotation(0, "cost") == 196.0
    params = CostParams(BackboneParams(depth=1, hidden=2), EncoderParams(depth=1, hidden=2, mlp=4))
    cost(g, "encoder", params)
    # 4 * 4 * (4 + 8) + 4 * 16 * 2
    assert g.annotation(0, "cost") == pytest.approx(320.0)
    with pytest.raises(InvalidConfigError):
        cost(g, "backbone")
    with pytest.raises(InvalidInputError):
        cost(g, "entropy")


def test_broadcast_dims_intersect():
    tree = build_tree(ParallelismConfig(dp=2, cp=2, tp=2, num_microbatches=1))
    g = init_from_buffer(metas_of([1]))
    broadcast_at(g, tree, "TP")
    assert len(g.context["consumers"]) == 4
    broadcast_at(g, tree, "CP")
    assert len(g.context["consumers"]) == 2


# -----------------------------
# Strategies
# -----------------------------

def test_pipeline_order_validated():
    with pytest.raises(InvalidConfigError):
        Pipeline("sequence", None, (Op("mix"), Op("balance"), Op("plan")))
    with pytest.raises(InvalidConfigError):
        Pipeline("sequence", None, (Op("mix"), Op("shuffle"), Op("plan")))
    with pytest.raises(InvalidConfigError):
        Pipeline("sequence", None, (Op("mix"),))
    seq = Pipeline("sequence", None, (Op("mix"), Op("plan")))
    with pytest.raises(InvalidConfigError):
        Strategy("twice", (seq, seq))


def test_strategy_from_config():
    assert [p.modality for p in strategy_from_config("hybrid_balance").pipelines] == ["image", "sequence"]
    custom = strategy_from_config({"name": "tokens", "pipelines": [{
        "modality": "sequence",
        "ops": [{"op": "mix"}, {"op": "distribute", "axis": "DP"}, {"op": "cost", "costfn": "tokens"},
                {"op": "balance", "method": "greedy"}, {"op": "plan"}],
    }]})
    assert custom.name == "tokens"
    with pytest.raises(InvalidConfigError):
        strategy_from_config("round_robin")
    with pytest.raises(InvalidConfigError):
        strategy_from_config({"pipelines": [{"ops": []}]})


def test_execute_hybrid_strategy():
    tree = build_tree(ParallelismConfig(dp=2, tp=2, num_microbatches=2))
    metas = [SampleMeta(i, i % 2, 10 + i, 16 if i % 2 == 0 else 0) for i in range(24)]
    params = CostParams(BackboneParams(depth=2, hidden=64), EncoderParams(depth=2, hidden=32))
    request = PlanRequest(summaries=metas, schedule=MixSchedule.static([0.5, 0.5], 4), tree=tree, step=0,
                          plan_id=1, seed=0, batch_size=8, cost_params=params)
    graphs, result = execute_strategy(strategy_from_config("hybrid_balance"), request)
    image, sequence = graphs
    assert len(sequence.samples_in(State.BINNED)) == 8
    # image selection is the image-bearing subset of the same batch
    assert set(image.samples_in(State.BINNED)) <= set(sequence.samples_in(State.BINNED))
    assert sum(len(v) for v in result.pop_lists.values()) == 8
    assert set(result.pop_lists) == {"0.0", "1.0"}
    assert set(result.owners) == set(sequence.samples_in(State.BINNED))
    assert "tp_replicate" in result.transforms["sequence"]
    assert result.consumers["sequence"] == (0, 2)
