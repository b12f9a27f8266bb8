# loader/storage.py
"""Shard storage backends.

``open(uri)`` returns a reader with ``seek``, ``next_record``, ``read`` and
``metadata``. URIs starting with ``mem://`` resolve against the in-memory
store; everything else is a local file (``.bin`` length-prefixed JSON
records or ``.jsonl`` lines).
"""
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Protocol, Sequence

from core.errors import MalformedRecordError, NotFoundError, StorageError
from core.logs import get_logger

logger = get_logger(__name__)

LENGTH = struct.Struct("<I")
MEM_PREFIX = "mem://"
FORMATS = (".bin", ".jsonl")


@dataclass(frozen=True)
class Record:
    index: int
    text_len: int
    image_patches: int = 0
    payload_bytes: int = 0
    cost_scale: float = 1.0

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "Record":
        try:
            rec = cls(index=int(d["index"]), text_len=int(d["text_len"]),
                      image_patches=int(d.get("image_patches", 0)), payload_bytes=int(d.get("payload_bytes", 0)),
                      cost_scale=float(d.get("cost_scale", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecordError(f"bad record fields: {exc}") from exc
        if rec.text_len < 0 or rec.image_patches < 0 or rec.cost_scale < 0:
            raise MalformedRecordError(f"record {rec.index} has negative fields")
        return rec

    def encode(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> "Record":
        try:
            d = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedRecordError(f"undecodable record: {exc}") from exc
        if not isinstance(d, dict):
            raise MalformedRecordError("record is not an object")
        return cls.from_dict(d)


class ShardReader(Protocol):
    uri: str

    @property
    def record_count(self) -> int:
        ...

    def read(self, index: int) -> Record:
        ...

    def seek(self, index: int):
        ...

    def next_record(self) -> Optional[Record]:
        ...

    def metadata(self) -> Dict:
        ...


class _CursorMixin:
    _pos = 0

    def seek(self, index: int):
        if not 0 <= index <= self.record_count:
            raise StorageError(f"seek to {index} outside {self.uri} ({self.record_count} records)")
        self._pos = index

    def next_record(self) -> Optional[Record]:
        if self._pos >= self.record_count:
            return None
        rec = self.read(self._pos)
        self._pos += 1
        return rec


# -----------------------------
# In-memory
# -----------------------------

class MemoryShardReader(_CursorMixin):
    def __init__(self, uri: str, rows: List[bytes]):
        self.uri = uri
        self._rows = rows

    @property
    def record_count(self) -> int:
        return len(self._rows)

    def read(self, index: int) -> Record:
        if not 0 <= index < len(self._rows):
            raise StorageError(f"{self.uri}: no record {index}")
        return Record.decode(self._rows[index])

    def metadata(self) -> Dict:
        return {"uri": self.uri, "records": self.record_count, "backend": "memory"}


class InMemoryStorage:
    def __init__(self):
        self._shards: Dict[str, List[bytes]] = {}

    def put(self, uri: str, records: Iterable[Record]):
        self._shards[uri] = [r.encode() for r in records]

    def put_raw(self, uri: str, rows: Sequence[bytes]):
        self._shards[uri] = list(rows)

    def open(self, uri: str) -> MemoryShardReader:
        try:
            return MemoryShardReader(uri, self._shards[uri])
        except KeyError:
            raise NotFoundError(f"no in-memory shard {uri!r}") from None

    def __contains__(self, uri: str) -> bool:
        return uri in self._shards


MEMORY = InMemoryStorage()


# -----------------------------
# Local files
# -----------------------------

class FileShardReader(_CursorMixin):
    """Random access over a shard through an offset index built on open."""

    def __init__(self, path: str):
        self.uri = path
        self._binary = path.endswith(".bin")
        try:
            with open(path, "rb") as fh:
                self._data = fh.read()
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc
        self._spans = self._index()

    def _index(self) -> List[tuple]:
        spans, pos, data = [], 0, self._data
        if self._binary:
            while pos < len(data):
                if pos + LENGTH.size > len(data):
                    raise StorageError(f"{self.uri}: truncated length prefix at byte {pos}")
                (n,) = LENGTH.unpack_from(data, pos)
                start = pos + LENGTH.size
                if start + n > len(data):
                    raise StorageError(f"{self.uri}: truncated record at byte {pos}")
                spans.append((start, start + n))
                pos = start + n
        else:
            for line_end in _line_ends(data):
                if line_end > pos:
                    spans.append((pos, line_end))
                pos = line_end + 1
        return spans

    @property
    def record_count(self) -> int:
        return len(self._spans)

    def read(self, index: int) -> Record:
        if not 0 <= index < len(self._spans):
            raise StorageError(f"{self.uri}: no record {index}")
        a, b = self._spans[index]
        return Record.decode(self._data[a:b])

    def metadata(self) -> Dict:
        return {"uri": self.uri, "records": self.record_count, "backend": "bin" if self._binary else "jsonl",
                "bytes": len(self._data)}


def _line_ends(data: bytes) -> Iterable[int]:
    start = 0
    while start < len(data):
        nl = data.find(b"\n", start)
        if nl < 0:
            yield len(data)
            return
        yield nl
        start = nl + 1


class LocalFileStorage:
    def open(self, uri: str) -> FileShardReader:
        if not uri.endswith(FORMATS):
            raise StorageError(f"unsupported shard format {uri!r}; expected one of {FORMATS}")
        if not os.path.exists(uri):
            raise NotFoundError(f"shard file {uri!r} does not exist")
        return FileShardReader(uri)


def open_shard(uri: str, memory: Optional[InMemoryStorage] = None) -> ShardReader:
    if uri.startswith(MEM_PREFIX):
        return (memory or MEMORY).open(uri)
    return LocalFileStorage().open(uri)


def write_shard(path: str, records: Iterable[Record]) -> str:
    """Write ``records`` in the format named by the extension; returns the sha256 of the file."""
    if not path.endswith(FORMATS):
        raise StorageError(f"unsupported shard format {path!r}")
    digest = hashlib.sha256()
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            for rec in records:
                raw = rec.encode()
                chunk = LENGTH.pack(len(raw)) + raw if path.endswith(".bin") else raw + b"\n"
                digest.update(chunk)
                fh.write(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote shard %s", path)
    return digest.hexdigest()
