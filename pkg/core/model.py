# core/model.py
"""Domain types shared by every package: sample metadata, sources, mixing
schedules, parallelism layouts and the closed-form FLOP models."""
import bisect
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from core.errors import InvalidConfigError, InvalidInputError, OutOfRangeError

# Sample ids are global: source k owns [k * ID_STRIDE, (k + 1) * ID_STRIDE).
ID_STRIDE = 1_000_000_000

MIB = 1 << 20
SOCKET_BYTES = 1 * MIB
METADATA_BYTES = 4 * MIB
ROWGROUP_BUFFER_BYTES = 64 * MIB
DEFAULT_ACCESS_STATE_BYTES = SOCKET_BYTES + METADATA_BYTES + ROWGROUP_BUFFER_BYTES

WEIGHT_TOLERANCE = 1e-9


# -----------------------------
# Samples and sources
# -----------------------------

@dataclass(frozen=True)
class SampleMeta:
    """Lightweight per-sample metadata carried by the control plane."""

    sample_id: int
    source_id: int
    text_len: int = 0
    image_patches: int = 0
    payload_bytes: int = 0
    step_tag: Optional[int] = None

    @property
    def total_tokens(self) -> int:
        return self.text_len + self.image_patches

    @property
    def admissible(self) -> bool:
        return self.text_len >= 0 and self.image_patches >= 0 and self.total_tokens > 0

    def tagged(self, step: int) -> "SampleMeta":
        return replace(self, step_tag=step)

    def to_dict(self) -> Dict[str, int]:
        return {
            "sample_id": self.sample_id,
            "source_id": self.source_id,
            "text_len": self.text_len,
            "image_patches": self.image_patches,
            "payload_bytes": self.payload_bytes,
            "step_tag": self.step_tag,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "SampleMeta":
        return cls(**d)


@dataclass(frozen=True)
class SourceSpec:
    source_id: int
    uri: str
    record_count: int
    transform_cost_per_sample: float
    access_state_bytes: int = DEFAULT_ACCESS_STATE_BYTES
    modalities: Tuple[str, ...] = ("text",)
    name: str = ""

    def __post_init__(self):
        if self.record_count <= 0:
            raise InvalidConfigError(f"source {self.source_id}: record_count must be > 0")
        if self.transform_cost_per_sample <= 0:
            raise InvalidConfigError(f"source {self.source_id}: transform_cost_per_sample must be > 0")
        if self.access_state_bytes < 0:
            raise InvalidConfigError(f"source {self.source_id}: access_state_bytes must be >= 0")

    @property
    def id_base(self) -> int:
        return self.source_id * ID_STRIDE

    @property
    def label(self) -> str:
        return self.name or f"source-{self.source_id}"


# -----------------------------
# Mixing schedules
# -----------------------------

def validate_weights(weights: Sequence[float], num_sources: Optional[int] = None) -> Tuple[float, ...]:
    w = tuple(float(x) for x in weights)
    if not w:
        raise InvalidInputError("weight vector is empty")
    if num_sources is not None and len(w) != num_sources:
        raise InvalidInputError(f"weight vector has {len(w)} entries for {num_sources} sources")
    if any(x < 0 or math.isnan(x) for x in w):
        raise InvalidInputError(f"weights must be non-negative: {w}")
    if abs(math.fsum(w) - 1.0) > WEIGHT_TOLERANCE:
        raise InvalidInputError(f"weights must sum to 1, got {math.fsum(w)}")
    return w


@dataclass(frozen=True)
class MixPhase:
    start: int
    stop: int
    weights: Tuple[float, ...]


GRANULARITIES = ("epoch", "step", "substep")


@dataclass(frozen=True)
class MixSchedule:
    """Piecewise-constant source weights over half-open index ranges.

    Indices are in units of ``granularity``; ``index_for`` converts a
    training step. ``callback`` replaces the lookup with a user function
    (dynamic, loss-driven mixing) while the phases still fix the horizon.
    """

    phases: Tuple[MixPhase, ...]
    granularity: str = "step"
    steps_per_epoch: int = 1
    substeps_per_step: int = 1
    callback: Optional[Callable[[int], Sequence[float]]] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.phases:
            raise InvalidConfigError("schedule needs at least one phase")
        if self.granularity not in GRANULARITIES:
            raise InvalidConfigError(f"unknown granularity {self.granularity!r}")
        if self.steps_per_epoch < 1 or self.substeps_per_step < 1:
            raise InvalidConfigError("steps_per_epoch and substeps_per_step must be >= 1")
        expected = 0
        width = len(self.phases[0].weights)
        for phase in self.phases:
            if phase.start != expected or phase.stop <= phase.start:
                raise InvalidConfigError(
                    f"phases must tile [0, total) without gaps: got [{phase.start}, {phase.stop}) after {expected}"
                )
            try:
                validate_weights(phase.weights, width)
            except InvalidInputError as exc:
                raise InvalidConfigError(str(exc)) from exc
            expected = phase.stop

    @classmethod
    def static(cls, weights: Sequence[float], total_steps: int) -> "MixSchedule":
        return cls(phases=(MixPhase(0, total_steps, tuple(float(x) for x in weights)),))

    @classmethod
    def from_ranges(cls, ranges: Sequence[Tuple[int, int, Sequence[float]]], **kwargs) -> "MixSchedule":
        return cls(phases=tuple(MixPhase(a, b, tuple(float(x) for x in w)) for a, b, w in ranges), **kwargs)

    @property
    def total_steps(self) -> int:
        return self.phases[-1].stop

    @property
    def num_sources(self) -> int:
        return len(self.phases[0].weights)

    def index_for(self, step: int, substep: int = 0) -> int:
        if self.granularity == "epoch":
            return step // self.steps_per_epoch
        if self.granularity == "substep":
            return step * self.substeps_per_step + substep
        return step


def mix_weights_at(schedule: MixSchedule, step: int) -> Tuple[float, ...]:
    """Weight vector of the range containing ``step``."""
    if step < 0 or step >= schedule.total_steps:
        raise OutOfRangeError(f"step {step} outside schedule [0, {schedule.total_steps})")
    if schedule.callback is not None:
        return validate_weights(schedule.callback(step), schedule.num_sources)
    starts = [p.start for p in schedule.phases]
    idx = bisect.bisect_right(starts, step) - 1
    return schedule.phases[idx].weights


# -----------------------------
# Parallelism
# -----------------------------

@dataclass(frozen=True)
class ParallelismConfig:
    pp: int = 1
    dp: int = 1
    cp: int = 1
    tp: int = 1
    num_microbatches: int = 1
    encoder_world_dp: bool = True

    def __post_init__(self):
        for name in ("pp", "dp", "cp", "tp", "num_microbatches"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidConfigError(f"{name} must be a positive integer, got {value!r}")

    @property
    def world_size(self) -> int:
        return self.pp * self.dp * self.cp * self.tp

    @property
    def encoder_dp(self) -> int:
        return self.world_size if self.encoder_world_dp else self.dp

    @property
    def sizes(self) -> Tuple[int, int, int, int]:
        return (self.pp, self.dp, self.cp, self.tp)

    def with_changes(self, **changes) -> "ParallelismConfig":
        return replace(self, **changes)

    def describe(self) -> str:
        return f"pp={self.pp} dp={self.dp} cp={self.cp} tp={self.tp} m={self.num_microbatches}"


# -----------------------------
# Cost models
# -----------------------------

@dataclass(frozen=True)
class BackboneParams:
    depth: int
    hidden: int
    linear_coeff: float = 24.0
    quad_coeff: float = 4.0
    topk_experts: int = 1
    vocab: int = 0
    mlp_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if self.depth < 1 or self.hidden < 1 or self.topk_experts < 1:
            raise InvalidConfigError("backbone depth, hidden and topk_experts must be >= 1")
        if self.linear_coeff < 0 or self.quad_coeff < 0 or self.vocab < 0:
            raise InvalidConfigError("backbone coefficients and vocab must be >= 0")
        if not 0.0 <= self.mlp_fraction <= 1.0:
            raise InvalidConfigError("mlp_fraction must lie in [0, 1]")

    @property
    def effective_linear_coeff(self) -> float:
        # routed experts multiply the MLP share of the per-token linear work
        if self.topk_experts == 1:
            return self.linear_coeff
        f = self.mlp_fraction
        return self.linear_coeff * ((1.0 - f) + f * self.topk_experts)


@dataclass(frozen=True)
class EncoderParams:
    depth: int
    hidden: int
    mlp: int = 0
    linear_coeff: float = 4.0
    quad_coeff: float = 4.0

    def __post_init__(self):
        if self.depth < 1 or self.hidden < 1 or self.mlp < 0:
            raise InvalidConfigError("encoder depth and hidden must be >= 1")
        if self.linear_coeff < 0 or self.quad_coeff < 0:
            raise InvalidConfigError("encoder coefficients must be >= 0")

    @property
    def mlp_dim(self) -> int:
        return self.mlp or 4 * self.hidden


@dataclass(frozen=True)
class CostParams:
    backbone: BackboneParams
    encoder: Optional[EncoderParams] = None


BACKBONE_PRESETS: Dict[str, BackboneParams] = {
    "llama-12b": BackboneParams(depth=45, hidden=4608, vocab=128256),
    "tmoe-25b": BackboneParams(depth=42, hidden=2048, topk_experts=2),
    "mixtral-8x7b": BackboneParams(depth=32, hidden=4096, topk_experts=2, vocab=32000),
}

ENCODER_PRESETS: Dict[str, EncoderParams] = {
    "vit-1b": EncoderParams(depth=39, hidden=1408),
    "vit-2b": EncoderParams(depth=48, hidden=1664),
}


def _check_lengths(values: Sequence[int], what: str) -> List[float]:
    out = []
    for v in values:
        if v < 0:
            raise InvalidInputError(f"negative {what}: {v}")
        out.append(float(v))
    return out


def backbone_cost(lengths: Sequence[int], params: BackboneParams) -> float:
    """depth * sum(k1 * l * h^2 + k2 * l^2 * h), attention local to each subsequence."""
    ls = _check_lengths(lengths, "subsequence length")
    h = float(params.hidden)
    k1 = params.effective_linear_coeff
    k2 = params.quad_coeff
    body = params.depth * math.fsum(k1 * l * h * h + k2 * l * l * h for l in ls)
    if params.vocab:
        body += 2.0 * h * params.vocab * math.fsum(ls)
    return body


def encoder_cost(patch_counts: Sequence[int], params: EncoderParams) -> float:
    """depth * sum(k1 * p * (h^2 + h * m) + k2 * p^2 * h), attention local to each image."""
    ps = _check_lengths(patch_counts, "patch count")
    h = float(params.hidden)
    m = float(params.mlp_dim)
    return params.depth * math.fsum(
        params.linear_coeff * p * (h * h + h * m) + params.quad_coeff * p * p * h for p in ps
    )
