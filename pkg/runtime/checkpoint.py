# runtime/checkpoint.py
"""Checkpoint store and plan log.

Layout under the root directory:

    planner/000012.ckpt         planner snapshot taken after plan 12
    loader-0.1/000010.ckpt      snapshot of loader 0.1 after plan 10
    plan.log                    append-only JSON lines, one entry per plan,
                                reshard or scaling event

Snapshots are written to a temporary file and renamed into place. Each
snapshot and log entry carries the sha256 of its body; a snapshot that
fails the check is skipped in favour of the previous one. Without a root
directory everything is kept in memory.
"""
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from core.errors import ChecksumMismatchError, InvalidInputError, StorageError
from core.logs import get_logger
from planner.plan import LoadingPlan

logger = get_logger(__name__)

PLAN_LOG = "plan.log"
SUFFIX = ".ckpt"
ENTRY_KINDS = ("plan", "reshard", "scaling", "tree")


def _canonical(body: Any) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _sealed(body: Any) -> Dict[str, Any]:
    return {"body": body, "sha256": hashlib.sha256(_canonical(body)).hexdigest()}


def _unseal(wrapper: Dict[str, Any], where: str) -> Any:
    body = wrapper.get("body")
    if hashlib.sha256(_canonical(body)).hexdigest() != wrapper.get("sha256"):
        raise ChecksumMismatchError(f"checksum mismatch in {where}")
    return body


@dataclass(frozen=True)
class LogEntry:
    seq: int
    kind: str
    plan_id: int
    body: Dict[str, Any]

    @property
    def plan(self) -> LoadingPlan:
        return LoadingPlan.from_dict(self.body)


@dataclass
class CheckpointStore:
    root: Optional[Path] = None
    keep: int = 4
    _snapshots: Dict[str, Dict[int, Dict[str, Any]]] = field(default_factory=dict)
    _log: List[Dict[str, Any]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.root is not None:
            self.root = Path(self.root)
            self.root.mkdir(parents=True, exist_ok=True)
            if (self.root / PLAN_LOG).exists():
                logger.info("plan log exists at %s, %d entries", self.root / PLAN_LOG, len(self.read_log()))

    @property
    def in_memory(self) -> bool:
        return self.root is None

    # -----------------------------
    # Snapshots
    # -----------------------------

    def _dir(self, scope: str) -> Path:
        return self.root / scope

    def save(self, scope: str, plan_id: int, state: Dict[str, Any]):
        wrapper = _sealed(state)
        with self._lock:
            if self.in_memory:
                # round-trip through JSON so restores never alias live state
                self._snapshots.setdefault(scope, {})[plan_id] = json.loads(_canonical(wrapper))
                return
            d = self._dir(scope)
            d.mkdir(parents=True, exist_ok=True)
            path = d / f"{plan_id:06d}{SUFFIX}"
            tmp = path.with_suffix(".tmp")
            try:
                tmp.write_bytes(_canonical(wrapper))
                os.replace(tmp, path)
            except OSError as exc:
                raise StorageError(f"cannot write snapshot {path}: {exc}") from exc
            self._prune(d)
        logger.debug("snapshot %s at plan %d", scope, plan_id)

    def _prune(self, d: Path):
        files = sorted(d.glob(f"*{SUFFIX}"))
        for old in files[:-self.keep] if self.keep > 0 else []:
            old.unlink()

    def _candidates(self, scope: str) -> List[Tuple[int, Any]]:
        if self.in_memory:
            return sorted(self._snapshots.get(scope, {}).items(), reverse=True)
        d = self._dir(scope)
        if not d.exists():
            return []
        return [(int(p.stem), p) for p in sorted(d.glob(f"*{SUFFIX}"), reverse=True)]

    def latest(self, scope: str, at_most: Optional[int] = None) -> Optional[Tuple[int, Dict[str, Any]]]:
        """Newest intact snapshot of ``scope`` taken at or before plan ``at_most``."""
        for plan_id, ref in self._candidates(scope):
            if at_most is not None and plan_id > at_most:
                continue
            try:
                wrapper = ref if self.in_memory else json.loads(ref.read_bytes())
                return plan_id, _unseal(wrapper, f"{scope}/{plan_id:06d}")
            except (ChecksumMismatchError, json.JSONDecodeError, OSError) as exc:
                logger.warning("snapshot %s/%06d unusable (%s), falling back", scope, plan_id, exc)
        return None

    def scopes(self) -> List[str]:
        if self.in_memory:
            return sorted(self._snapshots)
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def save_planner(self, plan_id: int, state: Dict[str, Any]):
        self.save("planner", plan_id, state)

    def save_loader(self, key: str, plan_id: int, state: Dict[str, Any]):
        self.save(f"loader-{key}", plan_id, state)

    def latest_planner(self, at_most: Optional[int] = None):
        return self.latest("planner", at_most)

    def latest_loader(self, key: str, at_most: Optional[int] = None):
        return self.latest(f"loader-{key}", at_most)

    # -----------------------------
    # Plan log
    # -----------------------------

    def append(self, kind: str, plan_id: int, body: Dict[str, Any]) -> LogEntry:
        """Append one entry; written and flushed before the plan is dispatched."""
        if kind not in ENTRY_KINDS:
            raise InvalidInputError(f"unknown log entry kind {kind!r}")
        with self._lock:
            seq = len(self._log) if self.in_memory else self._count_lines()
            line = _sealed({"seq": seq, "kind": kind, "plan_id": plan_id, "body": body})
            if self.in_memory:
                self._log.append(json.loads(_canonical(line)))
            else:
                try:
                    with open(self.root / PLAN_LOG, "ab") as fh:
                        fh.write(_canonical(line) + b"\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    raise StorageError(f"cannot append to plan log: {exc}") from exc
        return LogEntry(seq, kind, plan_id, body)

    def log_plan(self, plan: LoadingPlan) -> LogEntry:
        return self.append("plan", plan.plan_id, plan.to_dict())

    def _count_lines(self) -> int:
        path = self.root / PLAN_LOG
        if not path.exists():
            return 0
        with open(path, "rb") as fh:
            return sum(1 for _ in fh)

    def read_log(self, after_plan: int = 0, kinds: Optional[Tuple[str, ...]] = None) -> List[LogEntry]:
        """Entries with ``plan_id`` > ``after_plan``.

        A torn final line (crash mid-append) is dropped with a warning; a bad
        line followed by good ones is corruption and raises.
        """
        if self.in_memory:
            raw = list(self._log)
        else:
            path = self.root / PLAN_LOG
            if not path.exists():
                return []
            lines = path.read_bytes().splitlines()
            raw = []
            for i, line in enumerate(lines):
                try:
                    raw.append(json.loads(line))
                except json.JSONDecodeError:
                    if i == len(lines) - 1:
                        logger.warning("plan log ends in a torn entry, ignoring it")
                        break
                    raise ChecksumMismatchError(f"plan log line {i} is not valid JSON")
        out = []
        for wrapper in raw:
            body = _unseal(wrapper, f"plan log entry {wrapper.get('body', {}).get('seq')}")
            if body["plan_id"] <= after_plan:
                continue
            if kinds is not None and body["kind"] not in kinds:
                continue
            out.append(LogEntry(body["seq"], body["kind"], body["plan_id"], body["body"]))
        return out

    def plans_since(self, plan_id: int) -> List[LoadingPlan]:
        return [e.plan for e in self.read_log(plan_id, ("plan",))]
