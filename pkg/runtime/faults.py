# runtime/faults.py
"""Scripted fault injection.

A script is a YAML list of events:

    - {kind: kill, target: "loader:0.0", step: 3}
    - {kind: kill_mid_plan, target: "loader:1.0", step: 6}
    - {kind: delay, target: "loader:0.0", step: 4, ticks: 9}
    - {kind: drop, target: "loader:0.0", step: 5}
    - {kind: drop_eos, target: "loader:1.0", step: 7}
    - {kind: corrupt_header, target: "constructor:0", step: 2}
    - {kind: kill, target: "loader:0.0", rate: 0.05}

``kill`` stops the actor before the planner gathers summaries,
``kill_mid_plan`` after the plan reaches it but before its slice is sent.
``delay`` holds the actor's next message back ``ticks`` ticks, ``drop`` loses
it, ``drop_eos`` sends it without the end-of-stream marker.
``corrupt_header`` damages the next payload header a constructor puts on
the wire. An event with ``rate`` instead of ``step`` fires on each step
with that probability, drawn from the run seed.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from core.config import FAULT_KINDS, FaultEventModel, load_fault_events
from core.errors import InvalidConfigError
from core.logs import get_logger

logger = get_logger(__name__)

ACTOR_KINDS = ("loader", "constructor", "planner")


@dataclass(frozen=True)
class FaultEvent:
    kind: str
    target: str
    step: Optional[int] = None
    ticks: int = 0
    rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise InvalidConfigError(f"unknown fault kind {self.kind!r}; expected one of {FAULT_KINDS}")
        actor, _, _ = self.target.partition(":")
        if actor not in ACTOR_KINDS:
            raise InvalidConfigError(f"fault target {self.target!r} names no actor kind")

    @classmethod
    def from_model(cls, m: FaultEventModel) -> "FaultEvent":
        return cls(m.kind, m.target, m.step, m.ticks, m.rate)

    @property
    def actor_kind(self) -> str:
        return self.target.split(":", 1)[0]

    @property
    def actor_id(self) -> str:
        return self.target.split(":", 1)[1]


class FaultInjector:
    """Answers which faults fire at a step; the answer depends only on the script and seed."""

    def __init__(self, events: Iterable[FaultEvent] = (), seed: int = 0):
        self.events: List[FaultEvent] = list(events)
        self.seed = seed
        self.fired: List[tuple] = []

    @classmethod
    def from_script(cls, path: Union[str, Path], seed: int = 0) -> "FaultInjector":
        return cls([FaultEvent.from_model(m) for m in load_fault_events(path)], seed)

    @classmethod
    def from_models(cls, models: Sequence[FaultEventModel], seed: int = 0) -> "FaultInjector":
        return cls([FaultEvent.from_model(m) for m in models], seed)

    def __len__(self) -> int:
        return len(self.events)

    def _fires(self, index: int, event: FaultEvent, step: int) -> bool:
        if event.step is not None:
            return event.step == step
        draw = np.random.default_rng([self.seed, step, index]).random()
        return bool(draw < event.rate)

    def at(self, step: int, kinds: Optional[Sequence[str]] = None) -> List[FaultEvent]:
        out = []
        for i, e in enumerate(self.events):
            if kinds is not None and e.kind not in kinds:
                continue
            if self._fires(i, e, step):
                out.append(e)
        return out

    def record(self, step: int, event: FaultEvent):
        self.fired.append((step, event.kind, event.target))
        logger.info("step %d: injected %s on %s", step, event.kind, event.target)


def corrupt_header(data: bytes) -> bytes:
    """Damage the magic and the header length so decoding must fail."""
    if len(data) < 8:
        return b"\x00" * len(data)
    return b"XXXX" + b"\xff\xff\xff\x7f" + data[8:]
