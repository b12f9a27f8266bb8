# planner/plan.py
"""Plan values exchanged between the planner, loaders and constructors."""
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from core.model import SampleMeta


def loader_key(source_id: int, shard: int = 0) -> str:
    return f"{source_id}.{shard}"


def parse_loader_key(key: str) -> Tuple[int, int]:
    source, shard = key.split(".")
    return int(source), int(shard)


@dataclass(frozen=True)
class BinAssignment:
    graph: str
    node: int
    bucket: int
    microbatch: int
    members: Tuple[int, ...]
    cost: float
    leaves: Tuple[int, ...]
    constructor: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "graph": self.graph,
            "node": self.node,
            "bucket": self.bucket,
            "microbatch": self.microbatch,
            "members": list(self.members),
            "cost": self.cost,
            "leaves": list(self.leaves),
            "constructor": self.constructor,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "BinAssignment":
        return cls(
            graph=d["graph"], node=d["node"], bucket=d["bucket"], microbatch=d["microbatch"],
            members=tuple(d["members"]), cost=d["cost"], leaves=tuple(d["leaves"]),
            constructor=d["constructor"],
        )


# -----------------------------
# Scaling
# -----------------------------

@dataclass(frozen=True)
class ScalingAction:
    kind: str  # create | reshard | reclaim
    source_id: int
    actors: int
    workers_per_actor: int
    frontier: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "source_id": self.source_id, "actors": self.actors,
                "workers_per_actor": self.workers_per_actor, "frontier": self.frontier}


@dataclass(frozen=True)
class ScalingPlan:
    targets: Tuple[Tuple[int, int, int], ...]  # (source, actors, workers per actor)
    actions: Tuple[ScalingAction, ...]

    def target_for(self, source_id: int) -> Optional[Tuple[int, int]]:
        for s, actors, wpa in self.targets:
            if s == source_id:
                return actors, wpa
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {"targets": [list(t) for t in self.targets], "actions": [a.to_dict() for a in self.actions]}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ScalingPlan":
        return cls(
            targets=tuple(tuple(t) for t in d["targets"]),
            actions=tuple(ScalingAction(**a) for a in d["actions"]),
        )


# -----------------------------
# Loading plan
# -----------------------------

@dataclass(frozen=True)
class LoadingPlan:
    """Per-step instructions.

    ``pop_lists`` is keyed by loader (``source.shard``), ``assignments`` by
    constructor id. ``owners`` names the constructor each popped sample is
    staged to.
    """

    plan_id: int
    step: int
    pop_lists: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    assignments: Dict[int, Tuple[BinAssignment, ...]] = field(default_factory=dict)
    transforms: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    consumers: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    owners: Dict[int, int] = field(default_factory=dict)
    primary: str = "sequence"
    resident: bool = False
    scaling: Optional[ScalingPlan] = None

    def pops_for(self, key: str) -> Tuple[int, ...]:
        return self.pop_lists.get(key, ())

    def popped_ids(self) -> List[int]:
        return [sid for key in sorted(self.pop_lists) for sid in self.pop_lists[key]]

    def bins_for(self, constructor_id: int, graph: Optional[str] = None) -> List[BinAssignment]:
        bins = self.assignments.get(constructor_id, ())
        return [b for b in bins if graph is None or b.graph == graph]

    @property
    def constructors(self) -> List[int]:
        return sorted(self.assignments)

    @property
    def graphs(self) -> List[str]:
        return sorted(self.transforms)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "step": self.step,
            "pop_lists": {k: list(v) for k, v in sorted(self.pop_lists.items())},
            "assignments": {str(c): [b.to_dict() for b in bins] for c, bins in sorted(self.assignments.items())},
            "transforms": {k: list(v) for k, v in sorted(self.transforms.items())},
            "consumers": {k: list(v) for k, v in sorted(self.consumers.items())},
            "owners": {str(s): c for s, c in sorted(self.owners.items())},
            "primary": self.primary,
            "resident": self.resident,
            "scaling": self.scaling.to_dict() if self.scaling else None,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LoadingPlan":
        return cls(
            plan_id=d["plan_id"],
            step=d["step"],
            pop_lists={k: tuple(v) for k, v in d["pop_lists"].items()},
            assignments={int(c): tuple(BinAssignment.from_dict(b) for b in bins)
                         for c, bins in d["assignments"].items()},
            transforms={k: tuple(v) for k, v in d["transforms"].items()},
            consumers={k: tuple(v) for k, v in d["consumers"].items()},
            owners={int(s): c for s, c in d["owners"].items()},
            primary=d.get("primary", "sequence"),
            resident=d.get("resident", False),
            scaling=ScalingPlan.from_dict(d["scaling"]) if d.get("scaling") else None,
        )

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


# -----------------------------
# Buffer summaries
# -----------------------------

@dataclass(frozen=True)
class BufferSummary:
    """Metadata snapshot of one loader's read buffer, in buffer order."""

    loader: str
    source_id: int
    metas: Tuple[SampleMeta, ...]
    eos: bool = False

    def __len__(self) -> int:
        return len(self.metas)

    @property
    def sample_ids(self) -> List[int]:
        return [m.sample_id for m in self.metas]
