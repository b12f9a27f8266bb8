# placetree/tree.py
"""Logical trainer device mesh (PP -> DP -> CP -> TP, TP fastest-varying)."""
import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from core.errors import InvalidConfigError, InvalidInputError, NotFoundError, UnknownAxisError
from core.logs import get_logger
from core.model import ParallelismConfig

logger = get_logger(__name__)

AXES = ("PP", "DP", "CP", "TP")
BUCKET_AXES = ("PP", "DP", "CP", "WORLD")

Coords = Tuple[int, int, int, int]


def axis_index(axis: str) -> int:
    try:
        return AXES.index(axis.upper())
    except (ValueError, AttributeError):
        raise UnknownAxisError(f"unknown axis {axis!r}; expected one of {AXES}") from None


def rank_of(coords: Sequence[int], sizes: Sequence[int]) -> int:
    rank = 0
    for c, s in zip(coords, sizes):
        rank = rank * s + c
    return rank


def coords_of(rank: int, sizes: Sequence[int]) -> Coords:
    out = []
    for s in reversed(sizes):
        out.append(rank % s)
        rank //= s
    return tuple(reversed(out))


# -----------------------------
# Tree
# -----------------------------

@dataclass(frozen=True)
class Leaf:
    rank: int
    coords: Coords

    def coord(self, axis: str) -> int:
        return self.coords[axis_index(axis)]


@dataclass(frozen=True)
class ClientPlaceTree:
    config: ParallelismConfig
    leaves: Tuple[Leaf, ...]
    receivers: FrozenSet[int] = frozenset()

    @property
    def sizes(self) -> Tuple[int, int, int, int]:
        return self.config.sizes

    @property
    def world_size(self) -> int:
        return len(self.leaves)

    @property
    def consumers(self) -> FrozenSet[int]:
        return frozenset(l.rank for l in self.leaves) - self.receivers

    def leaf(self, rank: int) -> Leaf:
        if not 0 <= rank < len(self.leaves):
            raise NotFoundError(f"rank {rank} not in tree of {len(self.leaves)} leaves")
        return self.leaves[rank]

    def nodes_at(self, axis: str) -> List[Tuple[int, ...]]:
        """Coordinate prefixes of the interior nodes at ``axis``, in tree order."""
        depth = axis_index(axis) + 1
        return list(itertools.product(*(range(s) for s in self.sizes[:depth])))

    def leaves_under(self, prefix: Sequence[int]) -> Tuple[int, ...]:
        # ranks below a prefix are contiguous because TP varies fastest
        sizes = self.sizes
        start = rank_of(tuple(prefix) + (0,) * (len(sizes) - len(prefix)), sizes)
        count = math.prod(sizes[len(prefix):])
        return tuple(range(start, start + count))

    def with_receivers(self, receivers: Iterable[int]) -> "ClientPlaceTree":
        return replace(self, receivers=frozenset(receivers))

    def dump(self) -> str:
        cfg = self.config
        lines = [f"ClientPlaceTree {cfg.describe()} world={self.world_size}"]
        seen: List[Optional[Tuple[int, ...]]] = [None, None, None]
        for leaf in self.leaves:
            for depth in range(3):
                if seen[depth] != leaf.coords[: depth + 1]:
                    lines.append("  " * depth + f"{AXES[depth]}{leaf.coords[depth]}")
                    seen[depth] = leaf.coords[: depth + 1]
                    for deeper in range(depth + 1, 3):
                        seen[deeper] = None
            tag = "recv" if leaf.rank in self.receivers else "fetch"
            lines.append("      " + f"TP{leaf.coords[3]} rank {leaf.rank} [{tag}]")
        return "\n".join(lines)


TreeBuilder = Callable[[ParallelismConfig], ClientPlaceTree]


def _default_builder(config: ParallelismConfig) -> ClientPlaceTree:
    sizes = config.sizes
    leaves = tuple(Leaf(rank=r, coords=coords_of(r, sizes)) for r in range(config.world_size))
    return ClientPlaceTree(config=config, leaves=leaves)


def build_tree(config: ParallelismConfig, builder: Optional[TreeBuilder] = None) -> ClientPlaceTree:
    """Tree for ``config``; ``builder`` overrides the canonical construction."""
    for name, size in zip(AXES, config.sizes):
        if size < 1:
            raise InvalidConfigError(f"axis {name} has size {size}")
    tree = (builder or _default_builder)(config)
    ranks = sorted(l.rank for l in tree.leaves)
    if ranks != list(range(config.world_size)):
        raise InvalidConfigError("tree builder must place every global rank exactly once")
    return tree


# -----------------------------
# Buckets
# -----------------------------

@dataclass(frozen=True)
class BucketSet:
    axis: str
    group_size: int
    nodes: Tuple[Tuple[int, ...], ...]
    bucket_nodes: Tuple[Tuple[int, ...], ...]

    @property
    def buckets(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(tuple(r for n in group for r in self.nodes[n]) for group in self.bucket_nodes)

    def __len__(self) -> int:
        return len(self.bucket_nodes)

    def bucket_of_rank(self, rank: int) -> int:
        for b, members in enumerate(self.buckets):
            if rank in members:
                return b
        raise NotFoundError(f"rank {rank} not in any bucket")


def _group(nodes: List[Tuple[int, ...]], axis: str, group_size: int) -> BucketSet:
    if group_size < 1:
        raise InvalidInputError(f"group_size must be >= 1, got {group_size}")
    n = len(nodes)
    groups = tuple(tuple(range(i, min(i + group_size, n))) for i in range(0, n, group_size))
    return BucketSet(axis=axis, group_size=group_size, nodes=tuple(nodes), bucket_nodes=groups)


def check_bucket_axis(axis: str) -> str:
    key = str(axis).upper()
    if key not in BUCKET_AXES:
        raise UnknownAxisError(f"unknown distribution axis {axis!r}; expected one of {BUCKET_AXES}")
    return key


def buckets_at(tree: ClientPlaceTree, axis: str, group_size: int = 1) -> BucketSet:
    """One bucket per node at ``axis``, adjacent nodes merged ``group_size`` at a time."""
    key = check_bucket_axis(axis)
    if key == "WORLD":
        nodes = [(l.rank,) for l in tree.leaves]
    else:
        nodes = [tree.leaves_under(p) for p in tree.nodes_at(key)]
    return _group(nodes, key, group_size)


def fetch_buckets(tree: ClientPlaceTree, axis: str, group_size: int = 1) -> BucketSet:
    """Buckets for data distribution.

    Below PP the stage-0 nodes fetch and every pipeline stage sharing their
    DP/CP coordinates joins the same node, so stages see one data stream.
    Equal to ``buckets_at`` when pp == 1.
    """
    key = check_bucket_axis(axis)
    if key in ("WORLD", "PP") or tree.config.pp == 1:
        return buckets_at(tree, key, group_size)
    kept = (1,) if key == "DP" else (1, 2)
    nodes: Dict[Tuple[int, ...], List[int]] = {}
    for leaf in tree.leaves:
        nodes.setdefault(tuple(leaf.coords[i] for i in kept), []).append(leaf.rank)
    ordered = [tuple(nodes[k]) for k in sorted(nodes)]
    return _group(ordered, key, group_size)


# -----------------------------
# Broadcast
# -----------------------------

def _dims(target_dim: Union[str, Sequence[str]]) -> Tuple[int, ...]:
    dims = (target_dim,) if isinstance(target_dim, str) else tuple(target_dim)
    return tuple(axis_index(d) for d in dims)


def consumers_after_broadcast(tree: ClientPlaceTree, target_dim: Union[str, Sequence[str]]) -> FrozenSet[int]:
    """Leaves with coordinate 0 along every dim in ``target_dim``; the rest receive."""
    idx = _dims(target_dim)
    return frozenset(l.rank for l in tree.leaves if all(l.coords[i] == 0 for i in idx))


def broadcast_root(tree: ClientPlaceTree, rank: int, target_dim: Union[str, Sequence[str]]) -> int:
    coords = list(tree.leaf(rank).coords)
    for i in _dims(target_dim):
        coords[i] = 0
    return rank_of(coords, tree.sizes)


# -----------------------------
# Reshard
# -----------------------------

@dataclass(frozen=True)
class RemapTable:
    old_config: ParallelismConfig
    new_config: ParallelismConfig
    mapping: Tuple[Tuple[int, Optional[int]], ...]
    cold: FrozenSet[int]
    retired: FrozenSet[int]

    @property
    def is_identity(self) -> bool:
        return self.old_config == self.new_config

    def new_rank(self, old_rank: int) -> Optional[int]:
        return dict(self.mapping)[old_rank]

    def describe(self) -> List[str]:
        old_sizes, new_sizes = self.old_config.sizes, self.new_config.sizes
        rows = []
        for old, new in self.mapping:
            target = "retired" if new is None else f"{new} {coords_of(new, new_sizes)}"
            rows.append(f"{old} {coords_of(old, old_sizes)} -> {target}")
        rows.extend(f"cold {r} {coords_of(r, new_sizes)}" for r in sorted(self.cold))
        return rows


class Reshard(NamedTuple):
    tree: ClientPlaceTree
    remap: RemapTable


def reshard_tree(tree: ClientPlaceTree, new_config: ParallelismConfig) -> Reshard:
    """Fresh tree for ``new_config`` plus the rank remap table.

    Ranks keep their linear index; ranks past the new world retire and new
    ranks past the old world start cold.
    """
    new_tree = build_tree(new_config)
    old_n, new_n = tree.world_size, new_tree.world_size
    mapping = tuple((r, r if r < new_n else None) for r in range(old_n))
    remap = RemapTable(
        old_config=tree.config,
        new_config=new_config,
        mapping=mapping,
        cold=frozenset(range(old_n, new_n)),
        retired=frozenset(range(new_n, old_n)),
    )
    logger.info("reshard %s -> %s (%d cold, %d retired)", tree.config.describe(), new_config.describe(),
                len(remap.cold), len(remap.retired))
    return Reshard(new_tree, remap)


# -----------------------------
# Constructor placement
# -----------------------------

CONSTRUCTOR_GRANULARITIES = ("dp", "cp")


def constructor_of_rank(tree: ClientPlaceTree, rank: int, granularity: str = "dp") -> int:
    """Data Constructor serving ``rank``: one per DP group, or one per (DP, CP) group."""
    if granularity not in CONSTRUCTOR_GRANULARITIES:
        raise InvalidInputError(f"unknown constructor granularity {granularity!r}")
    _, dp, cp, _ = tree.leaf(rank).coords
    if granularity == "cp":
        return dp * tree.config.cp + cp
    return dp


def num_constructors(config: ParallelismConfig, granularity: str = "dp") -> int:
    return config.dp * config.cp if granularity == "cp" else config.dp


def constructor_ranks(tree: ClientPlaceTree, constructor_id: int, granularity: str = "dp") -> Tuple[int, ...]:
    return tuple(l.rank for l in tree.leaves if constructor_of_rank(tree, l.rank, granularity) == constructor_id)
