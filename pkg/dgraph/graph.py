# dgraph/graph.py
"""Sample lifecycle graph.

One node per (sample, state). Transformation edges link consecutive states
of a sample; dependency edges link a sample into its bin node and to the
constructor it is bound to.
"""
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from core.errors import (CycleError, DuplicateBindingError, IncompletePlanError, IntegrityError,
                         InvalidInputError, NotFoundError, StateRegressionError)
from core.logs import get_logger
from core.model import SampleMeta

logger = get_logger(__name__)


class State(IntEnum):
    BUFFERED = 0
    SAMPLED = 1
    BUCKETED = 2
    BINNED = 3
    ASSEMBLED = 4
    DELIVERED = 5

    @property
    def label(self) -> str:
        return self.name.lower()


FULL_LINEAGE = [s.label for s in State]


class EdgeKind(str, Enum):
    TRANSFORMATION = "transformation"
    DEPENDENCY = "dependency"
    NULL = "null"


@dataclass
class DNode:
    node_id: str
    sample_ref: Optional[int]
    state: Optional[State]
    producer: str
    annotations: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class DEdge:
    src: str
    dst: str
    kind: EdgeKind


Selector = Union[None, str, Sequence[str], Callable[[SampleMeta], bool]]


def _matcher(selector: Selector) -> Callable[[SampleMeta], bool]:
    if selector is None or selector == "all":
        return lambda m: True
    if callable(selector):
        return selector
    keys = (selector,) if isinstance(selector, str) else tuple(selector)
    for k in keys:
        if k not in SampleMeta.__dataclass_fields__:
            raise InvalidInputError(f"unknown metadata key {k!r}")
    return lambda m: sum(getattr(m, k) or 0 for k in keys) > 0


def sample_node_id(sample_id: int, state: State) -> str:
    return f"{sample_id}@{state.label}"


# -----------------------------
# Graph
# -----------------------------

class DGraph:
    """Metadata-only lifecycle graph owned by one planner step."""

    def __init__(self, name: str = "default", selector: Selector = None):
        self.name = name
        self.selector = selector
        self.nodes: Dict[str, DNode] = {}
        self.edges: List[DEdge] = []
        self.metas: Dict[int, SampleMeta] = {}
        self.consumer: Dict[int, str] = {}
        self.context: Dict[str, Any] = {}
        self._incoming: Dict[str, List[DEdge]] = {}
        self._head: Dict[int, str] = {}
        self._depth = 0

    def __len__(self) -> int:
        return len(self.metas)

    def __iter__(self) -> Iterator[int]:
        return iter(self.metas)

    # --- queries ---

    @property
    def sample_ids(self) -> List[int]:
        return list(self.metas)

    def meta(self, sample_id: int) -> SampleMeta:
        try:
            return self.metas[sample_id]
        except KeyError:
            raise NotFoundError(f"sample {sample_id} not in graph {self.name!r}") from None

    def head(self, sample_id: int) -> DNode:
        self.meta(sample_id)
        return self.nodes[self._head[sample_id]]

    def state_of(self, sample_id: int) -> State:
        return self.head(sample_id).state

    def samples_in(self, state: State) -> List[int]:
        return [sid for sid in self.metas if self.nodes[self._head[sid]].state == state]

    def samples_at_least(self, state: State) -> List[int]:
        return [sid for sid in self.metas if self.nodes[self._head[sid]].state >= state]

    def annotation(self, sample_id: int, key: str, default: Any = None) -> Any:
        return self.head(sample_id).annotations.get(key, default)

    # --- mutation ---

    @contextmanager
    def mutation(self):
        """Defer the acyclicity check to the end of a bulk operation."""
        self._depth += 1
        try:
            yield self
        finally:
            self._depth -= 1
        if self._depth == 0:
            self.check_acyclic()

    def _after_change(self):
        if self._depth == 0:
            self.check_acyclic()

    def _add_node(self, node: DNode):
        if node.node_id in self.nodes:
            raise IntegrityError(f"node {node.node_id} already exists in {self.name!r}")
        self.nodes[node.node_id] = node
        self._incoming[node.node_id] = []

    def _add_edge(self, src: str, dst: str, kind: EdgeKind):
        edge = DEdge(src, dst, kind)
        self.edges.append(edge)
        self._incoming[dst].append(edge)

    def add_sample(self, meta: SampleMeta, producer: str):
        if meta.sample_id in self.metas:
            raise IntegrityError(f"duplicate sample id {meta.sample_id} in {self.name!r}")
        node = DNode(sample_node_id(meta.sample_id, State.BUFFERED), meta.sample_id, State.BUFFERED, producer)
        self._add_node(node)
        self.metas[meta.sample_id] = meta
        self._head[meta.sample_id] = node.node_id
        self._after_change()

    def advance(self, sample_id: int, state: State, producer: Optional[str] = None,
                kind: EdgeKind = EdgeKind.TRANSFORMATION, **annotations) -> DNode:
        prev = self.head(sample_id)
        if state <= prev.state:
            raise StateRegressionError(
                f"sample {sample_id}: cannot move from {prev.state.label} to {state.label}"
            )
        merged = dict(prev.annotations)
        merged.update(annotations)
        node = DNode(sample_node_id(sample_id, state), sample_id, state, producer or prev.producer, merged)
        self._add_node(node)
        self._add_edge(prev.node_id, node.node_id, kind)
        self._head[sample_id] = node.node_id
        self._after_change()
        return node

    def annotate(self, sample_id: int, **annotations):
        self.head(sample_id).annotations.update(annotations)

    def add_group(self, node_id: str, members: Sequence[int], producer: str, **annotations) -> DNode:
        """Group node (bin, constructor) fed by dependency edges from member heads."""
        node = self.nodes.get(node_id)
        if node is None:
            node = DNode(node_id, None, None, producer, dict(annotations))
            self._add_node(node)
        for sid in members:
            self._add_edge(self.head(sid).node_id, node_id, EdgeKind.DEPENDENCY)
        self._after_change()
        return node

    def bind(self, sample_id: int, constructor_id: Any):
        if sample_id in self.consumer:
            raise DuplicateBindingError(f"sample {sample_id} already bound to {self.consumer[sample_id]}")
        target = f"constructor:{constructor_id}"
        self.add_group(target, [sample_id], producer=target)
        self.consumer[sample_id] = target
        self.annotate(sample_id, constructor=constructor_id)

    # --- checks and export ---

    def check_acyclic(self):
        indegree = {nid: 0 for nid in self.nodes}
        outgoing: Dict[str, List[str]] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            indegree[e.dst] += 1
            outgoing[e.src].append(e.dst)
        ready = deque(nid for nid, d in indegree.items() if d == 0)
        visited = 0
        while ready:
            nid = ready.popleft()
            visited += 1
            for dst in outgoing[nid]:
                indegree[dst] -= 1
                if indegree[dst] == 0:
                    ready.append(dst)
        if visited != len(self.nodes):
            raise CycleError(f"graph {self.name!r} contains a cycle")

    def lineage(self, sample_id: int) -> List[str]:
        node = self.head(sample_id)
        path = [node.state.label]
        while True:
            back = [e for e in self._incoming[node.node_id]
                    if e.kind != EdgeKind.DEPENDENCY and self.nodes[e.src].sample_ref == sample_id]
            if not back:
                break
            node = self.nodes[back[0].src]
            path.append(node.state.label)
        return list(reversed(path))

    def to_dot(self) -> str:
        lines = [f'digraph "{self.name}" {{']
        for node in self.nodes.values():
            if node.sample_ref is None:
                label = node.node_id
                shape = "box"
            else:
                label = f"{node.sample_ref} {node.state.label}"
                cost = node.annotations.get("cost")
                if cost is not None:
                    label += f"\\ncost={cost:g}"
                shape = "ellipse"
            lines.append(f'  "{node.node_id}" [label="{label}", shape={shape}];')
        for e in self.edges:
            style = "dashed" if e.kind == EdgeKind.DEPENDENCY else "solid"
            lines.append(f'  "{e.src}" -> "{e.dst}" [label="{e.kind.value}", style={style}];')
        lines.append("}")
        return "\n".join(lines)


# -----------------------------
# Operations
# -----------------------------

def init_from_buffer(buffer_metadata: Iterable[SampleMeta], selector: Selector = None,
                     name: str = "default") -> DGraph:
    metas = list(buffer_metadata)
    if not metas:
        raise InvalidInputError("buffer metadata is empty")
    match = _matcher(selector)
    g = DGraph(name=name, selector=selector)
    with g.mutation():
        for meta in metas:
            if match(meta):
                g.add_sample(meta, producer=f"source:{meta.source_id}")
    if not g.metas:
        logger.warning("selector %r matched no samples; graph %r is empty", selector, name)
    return g


def bind_consumers(g: DGraph, assignment: Union[Mapping[int, Any], Iterable[Tuple[int, Any]]]) -> DGraph:
    """Bind each sample to its constructor; every binned sample must be covered."""
    pairs = list(assignment.items()) if isinstance(assignment, Mapping) else list(assignment)
    seen = set()
    for sid, _ in pairs:
        g.meta(sid)
        if sid in seen or sid in g.consumer:
            raise DuplicateBindingError(f"sample {sid} assigned twice")
        seen.add(sid)
    missing = [sid for sid in g.samples_in(State.BINNED) if sid not in seen and sid not in g.consumer]
    if missing:
        raise IncompletePlanError(f"binned samples without a constructor: {missing[:8]}")
    with g.mutation():
        for sid, cons in pairs:
            g.bind(sid, cons)
    return g


def lineage(g: DGraph, sample_id: int) -> List[str]:
    return g.lineage(sample_id)
