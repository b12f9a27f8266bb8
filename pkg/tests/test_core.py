# tests/test_core.py
import math

import pytest

from core.config import parse_config
from core.errors import InvalidConfigError, InvalidInputError, OutOfRangeError
from core.model import (BACKBONE_PRESETS, ID_STRIDE, BackboneParams, EncoderParams, MixSchedule, ParallelismConfig,
                        SampleMeta, SourceSpec, backbone_cost, encoder_cost, mix_weights_at, validate_weights)


# -----------------------------
# Samples and sources
# -----------------------------

def test_sample_total_tokens():
    meta = SampleMeta(sample_id=3, source_id=0, text_len=12, image_patches=196)
    assert meta.total_tokens == 208
    assert meta.admissible
    assert not SampleMeta(4, 0).admissible
    assert SampleMeta.from_dict(meta.tagged(5).to_dict()).step_tag == 5


def test_source_spec_id_space():
    spec = SourceSpec(2, "mem://x", 10, 1.0)
    assert spec.id_base == 2 * ID_STRIDE
    assert spec.label == "source-2"


@pytest.mark.parametrize("kwargs", [
    {"record_count": 0, "transform_cost_per_sample": 1.0},
    {"record_count": 10, "transform_cost_per_sample": 0.0},
])
def test_source_spec_rejects_bad_values(kwargs):
    with pytest.raises(InvalidConfigError):
        SourceSpec(0, "mem://x", **kwargs)


# -----------------------------
# Mixing schedules
# -----------------------------

def test_schedule_lookup_by_range():
    schedule = MixSchedule.from_ranges([(0, 100, [0.5, 0.5]), (100, 200, [0.9, 0.1])])
    assert mix_weights_at(schedule, 0) == (0.5, 0.5)
    assert mix_weights_at(schedule, 99) == (0.5, 0.5)
    assert mix_weights_at(schedule, 100) == (0.9, 0.1)
    assert schedule.total_steps == 200


@pytest.mark.parametrize("step", [-1, 200])
def test_schedule_out_of_range(step):
    schedule = MixSchedule.from_ranges([(0, 100, [0.5, 0.5]), (100, 200, [0.9, 0.1])])
    with pytest.raises(OutOfRangeError):
        mix_weights_at(schedule, step)


def test_schedule_rejects_gaps_and_bad_weights():
    with pytest.raises(InvalidConfigError):
        MixSchedule.from_ranges([(0, 10, [1.0]), (12, 20, [1.0])])
    with pytest.raises(InvalidConfigError):
        MixSchedule.from_ranges([(0, 10, [0.6, 0.6])])


def test_schedule_callback_is_validated():
    schedule = MixSchedule.from_ranges([(0, 10, [0.5, 0.5])], callback=lambda step: [step / 10, 1 - step / 10])
    assert mix_weights_at(schedule, 3) == pytest.approx((0.3, 0.7))


def test_schedule_granularity():
    schedule = MixSchedule.from_ranges([(0, 4, [1.0])], granularity="epoch", steps_per_epoch=10)
    assert schedule.index_for(25) == 2


@pytest.mark.parametrize("weights", [[], [0.5, 0.6], [-0.1, 1.1], [float("nan"), 1.0]])
def test_validate_weights_rejects(weights):
    with pytest.raises(InvalidInputError):
        validate_weights(weights)


# -----------------------------
# Parallelism and costs
# -----------------------------

def test_parallelism_world_size():
    cfg = ParallelismConfig(pp=2, dp=4, cp=2, tp=2, num_microbatches=4)
    assert cfg.world_size == 32
    assert cfg.encoder_dp == 32
    assert cfg.with_changes(encoder_world_dp=False).encoder_dp == 4


@pytest.mark.parametrize("field", ["pp", "dp", "cp", "tp", "num_microbatches"])
def test_parallelism_rejects_zero(field):
    with pytest.raises(InvalidConfigError):
        ParallelismConfig(**{field: 0})


def test_backbone_cost_closed_form():
    params = BackboneParams(depth=2, hidden=8)
    # 2 * (24 * 10 * 64 + 4 * 100 * 8)
    assert backbone_cost([10], params) == 2 * (24 * 10 * 64 + 4 * 100 * 8)


def test_backbone_cost_attention_is_local_to_subsequences():
    params = BackboneParams(depth=1, hidden=16)
    assert backbone_cost([50, 50], params) < backbone_cost([100], params)
    assert backbone_cost([], params) == 0.0


def test_backbone_moe_and_vocab_terms():
    dense = BackboneParams(depth=1, hidden=16)
    moe = BackboneParams(depth=1, hidden=16, topk_experts=2)
    assert backbone_cost([32], moe) > backbone_cost([32], dense)
    with_head = BackboneParams(depth=1, hidden=16, vocab=100)
    assert backbone_cost([32], with_head) - backbone_cost([32], dense) == pytest.approx(2 * 16 * 100 * 32)


def test_encoder_cost_uses_default_mlp():
    params = EncoderParams(depth=1, hidden=4)
    assert params.mlp_dim == 16
    assert encoder_cost([2], params) == pytest.approx(4 * 2 * (16 + 64) + 4 * 4 * 4)


def test_cost_rejects_negative_lengths():
    with pytest.raises(InvalidInputError):
        backbone_cost([-1], BackboneParams(depth=1, hidden=1))


def test_presets_are_valid():
    assert BACKBONE_PRESETS["llama-12b"].depth == 45
    assert math.isfinite(backbone_cost([128], BACKBONE_PRESETS["mixtral-8x7b"]))


# -----------------------------
# Config
# -----------------------------

def test_config_defaults_and_overrides(small_config_dict):
    cfg = parse_config(small_config_dict, {"seed": 11, "runtime.threads": 3})
    assert cfg.seed == 11
    assert cfg.runtime.threads == 3
    assert cfg.parallelism_config().dp == 2
    assert [s.source_id for s in cfg.source_specs()] == [0, 1]


@pytest.mark.parametrize("patch", [
    {"sources": []},
    {"parallelism": {"dp": 0}},
    {"strategy_typo": 1},
    {"runtime": {"planner_ckpt_every": 2, "loader_ckpt_every": 3}},
    {"schedule": {"phases": [{"start": 0, "stop": 8, "weights": [1.0]}]}},
])
def test_config_rejected(small_config_dict, patch):
    with pytest.raises(InvalidConfigError):
        parse_config({**small_config_dict, **patch})


def test_config_default_schedule_is_uniform(small_config_dict):
    cfg = parse_config(small_config_dict)
    assert mix_weights_at(cfg.mix_schedule(), 0) == (0.5, 0.5)
