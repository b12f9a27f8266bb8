# core/config.py
"""Run configuration: YAML validated by pydantic, converted to domain types."""
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from core.errors import InvalidConfigError
from core.model import (BACKBONE_PRESETS, DEFAULT_ACCESS_STATE_BYTES, ENCODER_PRESETS, MIB, BackboneParams,
                        CostParams, EncoderParams, MixPhase, MixSchedule, ParallelismConfig, SourceSpec)
from planner.autoscale import ResourceEnvelope, ScalingParams

GIB = 1 << 30

FAULT_KINDS = ("kill", "kill_mid_plan", "delay", "drop", "drop_eos", "corrupt_header")


class _Model(BaseModel):
    model_config = {"extra": "forbid", "populate_by_name": True}


# -----------------------------
# Sources
# -----------------------------

class DistributionConfig(_Model):
    """Distribution of one per-record field."""

    family: Literal["lognormal", "pareto", "empirical", "constant"] = "lognormal"
    median: float = Field(default=16.0, gt=0)
    sigma: float = Field(default=0.5, ge=0)
    alpha: float = Field(default=2.0, gt=0)
    scale: float = Field(default=1.0, gt=0)
    value: int = Field(default=0, ge=0)
    edges: List[float] = Field(default_factory=list)
    counts: List[float] = Field(default_factory=list)
    clip: Tuple[int, int] = (0, 1 << 20)
    fraction: float = Field(default=1.0, ge=0, le=1)

    @model_validator(mode="after")
    def check_shape(self) -> "DistributionConfig":
        lo, hi = self.clip
        if lo < 0 or hi < lo:
            raise ValueError(f"clip must satisfy 0 <= lo <= hi, got {self.clip}")
        if self.family == "empirical":
            if len(self.edges) != len(self.counts) + 1 or not self.counts:
                raise ValueError("empirical histogram needs len(edges) == len(counts) + 1")
            if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise ValueError("histogram edges must increase")
            if any(c < 0 for c in self.counts) or sum(self.counts) <= 0:
                raise ValueError("histogram counts must be non-negative with a positive total")
        return self


class SourceConfig(_Model):
    id: int = Field(ge=0)
    name: str = ""
    uri: str = ""
    record_count: int = Field(gt=0)
    transform_cost_ms: float = Field(default=1.0, gt=0)
    access_state_mib: float = Field(default=DEFAULT_ACCESS_STATE_BYTES / MIB, ge=0)
    modalities: List[str] = Field(default_factory=lambda: ["text"])
    text_len: DistributionConfig = Field(default_factory=DistributionConfig)
    image_patches: Optional[DistributionConfig] = None
    bytes_per_token: int = Field(default=4, ge=0)

    def to_spec(self, uri: Optional[str] = None) -> SourceSpec:
        return SourceSpec(
            source_id=self.id,
            uri=uri or self.uri or f"mem://source-{self.id}",
            record_count=self.record_count,
            transform_cost_per_sample=self.transform_cost_ms,
            access_state_bytes=int(self.access_state_mib * MIB),
            modalities=tuple(self.modalities),
            name=self.name,
        )


# -----------------------------
# Schedule, parallelism, costs
# -----------------------------

class PhaseConfig(_Model):
    start: int = Field(ge=0)
    stop: int = Field(gt=0)
    weights: List[float]


class ScheduleConfig(_Model):
    granularity: Literal["epoch", "step", "substep"] = "step"
    steps_per_epoch: int = Field(default=1, ge=1)
    substeps_per_step: int = Field(default=1, ge=1)
    phases: List[PhaseConfig] = Field(min_length=1)

    def to_schedule(self) -> MixSchedule:
        return MixSchedule(
            phases=tuple(MixPhase(p.start, p.stop, tuple(p.weights)) for p in self.phases),
            granularity=self.granularity,
            steps_per_epoch=self.steps_per_epoch,
            substeps_per_step=self.substeps_per_step,
        )


class ParallelismModel(_Model):
    pp: int = Field(default=1, ge=1)
    dp: int = Field(default=1, ge=1)
    cp: int = Field(default=1, ge=1)
    tp: int = Field(default=1, ge=1)
    microbatches: int = Field(default=1, ge=1)
    encoder_world_dp: bool = True

    def to_config(self) -> ParallelismConfig:
        return ParallelismConfig(pp=self.pp, dp=self.dp, cp=self.cp, tp=self.tp,
                                 num_microbatches=self.microbatches, encoder_world_dp=self.encoder_world_dp)


class BackboneModel(_Model):
    preset: Optional[str] = None
    depth: int = Field(default=2, ge=1)
    hidden: int = Field(default=64, ge=1)
    linear_coeff: float = Field(default=24.0, ge=0)
    quad_coeff: float = Field(default=4.0, ge=0)
    topk_experts: int = Field(default=1, ge=1)
    vocab: int = Field(default=0, ge=0)

    @field_validator("preset")
    @classmethod
    def known_preset(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in BACKBONE_PRESETS:
            raise ValueError(f"unknown backbone preset {v!r}; presets: {sorted(BACKBONE_PRESETS)}")
        return v

    def to_params(self) -> BackboneParams:
        if self.preset:
            return BACKBONE_PRESETS[self.preset]
        return BackboneParams(depth=self.depth, hidden=self.hidden, linear_coeff=self.linear_coeff,
                              quad_coeff=self.quad_coeff, topk_experts=self.topk_experts, vocab=self.vocab)


class EncoderModel(_Model):
    preset: Optional[str] = None
    depth: int = Field(default=2, ge=1)
    hidden: int = Field(default=64, ge=1)
    mlp: int = Field(default=0, ge=0)

    @field_validator("preset")
    @classmethod
    def known_preset(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in ENCODER_PRESETS:
            raise ValueError(f"unknown encoder preset {v!r}; presets: {sorted(ENCODER_PRESETS)}")
        return v

    def to_params(self) -> EncoderParams:
        if self.preset:
            return ENCODER_PRESETS[self.preset]
        return EncoderParams(depth=self.depth, hidden=self.hidden, mlp=self.mlp)


class CostConfig(_Model):
    backbone: BackboneModel = Field(default_factory=BackboneModel)
    encoder: Optional[EncoderModel] = Field(default_factory=EncoderModel)

    def to_params(self) -> CostParams:
        return CostParams(self.backbone.to_params(), self.encoder.to_params() if self.encoder else None)


# -----------------------------
# Actors
# -----------------------------

class ResourceConfig(_Model):
    cpu_blocks: int = Field(default=64, ge=1)
    memory_gib: float = Field(default=64.0, gt=0)
    reserved_blocks: int = Field(default=0, ge=0)
    reserved_memory_gib: float = Field(default=0.0, ge=0)
    w_src: int = Field(default=16, ge=1)
    w_actor: int = Field(default=8, ge=1)
    clusters: int = Field(default=4, ge=1)
    actor_memory_mib: Optional[float] = Field(default=None, gt=0)
    worker_ctx_mib: float = Field(default=256.0, ge=0)
    buffer_mib: float = Field(default=0.0, ge=0)

    def to_envelope(self) -> ResourceEnvelope:
        return ResourceEnvelope(
            cpu_blocks=self.cpu_blocks,
            memory_bytes=int(self.memory_gib * GIB),
            reserved_blocks=self.reserved_blocks,
            reserved_memory=int(self.reserved_memory_gib * GIB),
            w_src=self.w_src,
            w_actor=self.w_actor,
            clusters=self.clusters,
            actor_memory_bytes=int(self.actor_memory_mib * MIB) if self.actor_memory_mib else None,
            worker_ctx_bytes=int(self.worker_ctx_mib * MIB),
            buffer_bytes=int(self.buffer_mib * MIB),
        )


class LoaderConfig(_Model):
    partition: Literal["auto", "fixed"] = "fixed"
    actors: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)
    buffer_capacity: int = Field(default=256, ge=1)
    eager: bool = False
    strict: bool = False
    defer_images: bool = False
    read_retries: int = Field(default=2, ge=0)


class ConstructorConfig(_Model):
    max_seq_len: int = Field(default=4096, ge=1)
    splitter: Literal["contiguous", "zigzag"] = "contiguous"
    stub_fields: List[str] = Field(default_factory=lambda: ["seq_lens", "offsets"])
    granularity: Literal["dp", "cp"] = "dp"


class RuntimeConfig(_Model):
    clock: Literal["logical", "wall"] = "logical"
    timeout_ticks: int = Field(default=4, ge=1)
    prefetch_depth: int = Field(default=2, ge=1)
    planner_ckpt_every: int = Field(default=1, ge=1)
    loader_ckpt_every: int = Field(default=5, ge=1)
    shadows: int = Field(default=1, ge=0)
    threads: int = Field(default=1, ge=1)
    fan_in: int = Field(default=4, ge=1)
    rpc_ticks: int = Field(default=1, ge=1)
    tick_ms: float = Field(default=1.0, gt=0)
    failover_ticks: int = Field(default=1, ge=0)
    cold_restart_ticks: int = Field(default=20, ge=0)
    mailbox_capacity: int = Field(default=1024, ge=1)
    checkpoint_dir: Optional[str] = None
    wire_check: bool = True

    @model_validator(mode="after")
    def check_intervals(self) -> "RuntimeConfig":
        if self.loader_ckpt_every % self.planner_ckpt_every:
            raise ValueError("loader_ckpt_every must be a multiple of planner_ckpt_every")
        return self


class AutoscaleConfig(_Model):
    enabled: bool = False
    threshold: float = Field(default=0.4, gt=0, le=1)
    window: int = Field(default=3, ge=1)
    alpha: float = Field(default=0.3, gt=0, le=1)
    low_threshold: Optional[float] = Field(default=None, ge=0)
    factor: int = Field(default=2, ge=2)

    def to_params(self) -> ScalingParams:
        return ScalingParams(threshold=self.threshold, window=self.window, alpha=self.alpha,
                             low_threshold=self.low_threshold, factor=self.factor)


class FaultEventModel(_Model):
    kind: Literal["kill", "kill_mid_plan", "delay", "drop", "drop_eos", "corrupt_header"]
    target: str
    step: Optional[int] = Field(default=None, ge=0)
    ticks: int = Field(default=0, ge=0)
    rate: Optional[float] = Field(default=None, gt=0, le=1)

    @model_validator(mode="after")
    def step_or_rate(self) -> "FaultEventModel":
        if (self.step is None) == (self.rate is None):
            raise ValueError(f"fault {self.kind} on {self.target}: give exactly one of step or rate")
        if ":" not in self.target:
            raise ValueError(f"fault target {self.target!r} must look like 'loader:0.0' or 'constructor:1'")
        return self


class FaultConfig(_Model):
    script: Optional[str] = None
    events: List[FaultEventModel] = Field(default_factory=list)


class ReshardConfig(_Model):
    step: int = Field(ge=1)
    parallelism: ParallelismModel


# -----------------------------
# Run
# -----------------------------

class RunConfig(_Model):
    seed: int = 0
    steps: int = Field(default=10, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    sources: List[SourceConfig] = Field(min_length=1)
    schedule: Optional[ScheduleConfig] = None
    parallelism: ParallelismModel = Field(default_factory=ParallelismModel)
    strategy: Union[str, Dict[str, Any]] = "hybrid_balance"
    cost: CostConfig = Field(default_factory=CostConfig)
    constructor: ConstructorConfig = Field(default_factory=ConstructorConfig)
    resources: ResourceConfig = Field(default_factory=ResourceConfig)
    loader: LoaderConfig = Field(default_factory=LoaderConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    autoscale: AutoscaleConfig = Field(default_factory=AutoscaleConfig)
    faults: FaultConfig = Field(default_factory=FaultConfig)
    reshard: List[ReshardConfig] = Field(default_factory=list)
    memory_mode: Literal["disaggregated", "naive"] = "disaggregated"
    data_dir: Optional[str] = None

    @model_validator(mode="after")
    def check_run(self) -> "RunConfig":
        ids = [s.id for s in self.sources]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError(f"source ids must be 0..{len(ids) - 1}, got {ids}")
        if self.schedule is not None:
            for p in self.schedule.phases:
                if len(p.weights) != len(ids):
                    raise ValueError(f"phase [{p.start}, {p.stop}) has {len(p.weights)} weights "
                                     f"for {len(ids)} sources")
            horizon = self.schedule.phases[-1].stop
            if self.schedule.granularity == "step" and horizon < self.steps:
                raise ValueError(f"schedule covers {horizon} steps, run needs {self.steps}")
        return self

    # --- domain types ---

    def source_specs(self) -> List[SourceSpec]:
        return [s.to_spec() for s in sorted(self.sources, key=lambda s: s.id)]

    def mix_schedule(self) -> MixSchedule:
        if self.schedule is None:
            n = len(self.sources)
            return MixSchedule.static([1.0 / n] * n, self.steps)
        return self.schedule.to_schedule()

    def parallelism_config(self) -> ParallelismConfig:
        return self.parallelism.to_config()

    def cost_params(self) -> CostParams:
        return self.cost.to_params()


# -----------------------------
# Loading
# -----------------------------

def _set_dotted(data: Dict[str, Any], key: str, value: Any):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InvalidConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def parse_config(data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    raw = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, key, value)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise InvalidConfigError(f"invalid run config: {exc}") from exc


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read YAML at ``path`` and apply dotted-key ``overrides`` (``runtime.threads``, ``seed``...)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfigError(f"config {path} must be a mapping")
    cfg = parse_config(data, overrides)
    if cfg.faults.script:
        script = Path(cfg.faults.script)
        if not script.is_absolute():
            script = Path(path).parent / script
        events = cfg.faults.events + load_fault_events(script)
        cfg = cfg.model_copy(update={"faults": FaultConfig(script=str(script), events=events)})
    return cfg


def load_fault_events(path: Union[str, Path]) -> List[FaultEventModel]:
    """Fault script: a YAML list of events, or a mapping with an ``events`` list."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or []
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidConfigError(f"cannot read fault script {path}: {exc}") from exc
    if isinstance(data, dict):
        data = data.get("events", [])
    try:
        return [FaultEventModel.model_validate(e) for e in data]
    except ValidationError as exc:
        raise InvalidConfigError(f"invalid fault script {path}: {exc}") from exc


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json", exclude_none=True), sort_keys=False)
