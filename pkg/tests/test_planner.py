# tests/test_planner.py
import numpy as np
import pytest

from core.errors import CapacityError, IntegrityError, InvalidInputError
from core.model import BackboneParams, CostParams, MixSchedule, ParallelismConfig, SampleMeta, SourceSpec
from orchestration.primitives import strategy_from_config
from placetree.tree import build_tree
from planner.autoscale import (MixtureScaler, ResourceEnvelope, ScalingParams, SourceAllocation, auto_partition,
                               mixture_scaling_step, water_fill)
from planner.plan import BufferSummary, LoadingPlan, parse_loader_key
from planner.planner import Planner, coalesced_latency


@pytest.fixture
def planner():
    tree = build_tree(ParallelismConfig(dp=2, num_microbatches=2))
    return Planner(strategy_from_config("backbone_balance"), MixSchedule.static([1.0], 10), tree, seed=0,
                   batch_size=8, cost_params=CostParams(BackboneParams(depth=2, hidden=64)))


@pytest.fixture
def loaders(loader_factory):
    out = [loader_factory(actor=0, actors=2), loader_factory(actor=1, actors=2)]
    for loader in out:
        loader.ingest()
    return out


def test_coalesced_latency_grows_sublinearly():
    assert coalesced_latency(16, 4) == 8
    assert coalesced_latency(2, 4) == 2
    assert coalesced_latency(256, 4) == 16
    assert coalesced_latency(16, 1) == 16
    assert coalesced_latency(0, 4) == 0


def test_plan_pops_the_batch_and_advances(planner, loaders):
    summaries = planner.gather_buffer_summaries(loaders)
    assert [s.loader for s in summaries.summaries] == ["0.0", "0.1"]
    plan = planner.generate_plan(summaries, step=0)
    assert plan.plan_id == 1
    assert len(plan.popped_ids()) == 8
    assert set(plan.owners.values()) <= {0, 1}
    for loader in loaders:
        loader.execute_plan_slice(plan)
    second = planner.generate_plan(planner.gather_buffer_summaries(loaders), step=1)
    assert second.plan_id == 2
    assert not set(second.popped_ids()) & set(plan.popped_ids())
    # stale summaries would pop samples a second time
    with pytest.raises(IntegrityError):
        planner.generate_plan(summaries, step=2)


def test_duplicate_summaries_rejected(planner, loaders):
    with pytest.raises(IntegrityError):
        planner.gather_buffer_summaries([loaders[0], loaders[0]])


def test_empty_buffers_give_empty_plan(planner):
    plan = planner.generate_plan([BufferSummary("0.0", 0, (), eos=True)], step=0)
    assert plan.pop_lists == {}
    assert planner.last_plan_id == 1


def test_plan_raw_is_validated(planner, loaders):
    summaries = planner.gather_buffer_summaries(loaders)
    with pytest.raises(InvalidInputError):
        planner.plan_raw(summaries, 0, lambda pop, pid, step: {"plan_id": pid})
    with pytest.raises(IntegrityError):
        planner.plan_raw(summaries, 0, lambda pop, pid, step: LoadingPlan(pid, step, {"0.0": (999_999,)}))
    first = summaries.population[0].sample_id
    plan = planner.plan_raw(summaries, 0, lambda pop, pid, step: LoadingPlan(pid, step, {"0.0": (first,)},
                                                                           owners={first: 0}))
    assert plan.plan_id == 1
    with pytest.raises(IntegrityError):
        planner.observe_plan(plan)


def test_resident_plan_pops_nothing(planner):
    metas = [SampleMeta(i, 0, 10 + i) for i in range(4)]
    plan = planner.plan_resident(metas, step=3)
    assert plan.resident and plan.pop_lists == {}
    assert set(plan.owners) == {0, 1, 2, 3}


def test_checkpoint_round_trip(planner, loaders):
    planner.generate_plan(planner.gather_buffer_summaries(loaders), step=0)
    state = planner.checkpoint()
    fresh = Planner(planner.strategy, planner.schedule, planner.tree, seed=0, batch_size=8,
                    cost_params=planner.cost_params)
    fresh.restore(state)
    assert fresh.checkpoint() == state
    fresh.new_epoch()
    assert fresh.popped == set()


def test_loader_keys():
    assert parse_loader_key("3.1") == (3, 1)


# -----------------------------
# Resource partitioning
# -----------------------------

def _specs(costs):
    return [SourceSpec(i, f"mem://cost-{i}", 100, c) for i, c in enumerate(costs)]


def test_water_fill_proportional_to_cost():
    assert water_fill([8, 4, 2, 1], [16] * 4, 30) == [16, 8, 4, 2]
    assert water_fill([8, 4], [3, 3], 100) == [3, 3]
    with pytest.raises(CapacityError):
        water_fill([1, 1, 1], [4] * 3, 2)


def test_auto_partition_splits_workers_into_actors():
    env = ResourceEnvelope(cpu_blocks=30, memory_bytes=1 << 40)
    allocs = auto_partition(_specs([8, 4, 2, 1]), env)
    assert [a.workers for a in allocs] == [16, 8, 4, 2]
    assert [(a.actors, a.workers_per_actor) for a in allocs] == [(2, 8), (2, 4), (2, 2), (2, 1)]


def test_auto_partition_matches_the_max_min_oracle():
    costs = np.array([8, 4, 2, 1])
    grid = np.stack(np.meshgrid(*[np.arange(1, 17)] * 4, indexing="ij"), axis=-1).reshape(-1, 4)
    objective = (grid / costs).min(axis=1)
    used = grid.sum(axis=1)
    specs = _specs(costs.tolist())
    for budget in range(4, 31):
        best = objective[used <= budget].max()
        env = ResourceEnvelope(cpu_blocks=budget, memory_bytes=1 << 40, clusters=1, w_actor=16,
                               actor_memory_bytes=specs[0].access_state_bytes + 16 * (256 << 20))
        workers = np.array([a.workers for a in auto_partition(specs, env)])
        assert workers.sum() <= budget
        assert (workers >= 1).all() and (workers <= env.w_src).all()
        assert (workers / costs).min() == pytest.approx(best)
        # each source sits within one block of its share of the optimum
        assert (workers - 1 <= best * costs + 1e-9).all()


def test_auto_partition_respects_actor_memory_cap():
    specs = _specs([8, 1])
    env = ResourceEnvelope(cpu_blocks=16, memory_bytes=1 << 40, worker_ctx_bytes=1 << 20,
                           actor_memory_bytes=specs[0].access_state_bytes + 2 * (1 << 20))
    allocs = auto_partition(specs, env)
    assert all(a.workers_per_actor <= 2 for a in allocs)
    with pytest.raises(CapacityError) as err:
        auto_partition(specs, ResourceEnvelope(cpu_blocks=16, memory_bytes=1 << 40, actor_memory_bytes=1))
    assert err.value.source_id == 0


def test_auto_partition_sheds_workers_to_fit_memory():
    specs = _specs([1, 1])
    per_worker = 1 << 20
    budget = 2 * specs[0].access_state_bytes + 4 * per_worker
    env = ResourceEnvelope(cpu_blocks=20, memory_bytes=budget, worker_ctx_bytes=per_worker, clusters=1)
    allocs = auto_partition(specs, env)
    assert sum(a.actors * specs[0].access_state_bytes + a.workers * per_worker for a in allocs) <= budget


# -----------------------------
# Mixture-driven scaling
# -----------------------------

def test_scaler_waits_for_the_window():
    scaler = MixtureScaler(ScalingParams(threshold=0.4, window=3), {0: (1, 2), 1: (1, 2)})
    assert scaler.observe([0.7, 0.3]) is None
    assert scaler.observe([0.7, 0.3]) is None
    plan = scaler.observe([0.7, 0.3])
    assert [(a.kind, a.source_id, a.actors) for a in plan.actions] == [("create", 0, 2), ("reshard", 0, 2)]
    assert plan.target_for(0) == (2, 2)
    assert plan.target_for(1) == (1, 2)
    # already scaled out
    assert scaler.observe([0.7, 0.3]) is None


def test_scaler_reclaims_after_weight_drops():
    scaler = MixtureScaler(ScalingParams(threshold=0.4, window=3), {0: (1, 2), 1: (1, 2)})
    for _ in range(3):
        scaler.observe([0.7, 0.3])
    kinds = []
    for _ in range(20):
        plan = scaler.observe([0.05, 0.95])
        if plan:
            kinds.extend((a.kind, a.source_id) for a in plan.actions)
    assert ("reclaim", 0) in kinds
    assert scaler.current[0] == (1, 2)


def test_scaler_respects_free_blocks():
    scaler = MixtureScaler(ScalingParams(window=1), {0: (2, 4)}, available_blocks=8)
    assert scaler.observe([1.0]) is None


def test_scaler_state_round_trip():
    scaler = MixtureScaler(ScalingParams(), {0: (1, 1)})
    scaler.observe([0.9])
    other = MixtureScaler(ScalingParams(), {0: (1, 1)})
    other.load_state(scaler.state())
    assert other.state() == scaler.state()


def test_mixture_scaling_step_replays_history():
    allocs = [SourceAllocation(0, 1, 4), SourceAllocation(1, 1, 4)]
    plan = mixture_scaling_step([[0.8, 0.2]] * 3, allocs)
    assert plan.target_for(0) == (2, 4)
    assert mixture_scaling_step([[0.5, 0.5]] * 2, allocs) is None
