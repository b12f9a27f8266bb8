# constructor/wire.py
"""Payload wire format.

    magic      4 bytes  b"DPL1"
    hlen       u32 LE   header length
    header     hlen bytes of UTF-8 JSON (sorted keys)
    arrays     for each name in header["arrays"]:
                 dtype  u8  (1 = int32 LE)
                 ndim   u8
                 shape  ndim x u32 LE
                 data   prod(shape) x 4 bytes, C order

The header holds plan id, rank, coords, graph, node, microbatch, kind,
sample ids, sequence lengths, segment offsets, shape, pad count, broadcast
root and patch counts.
"""
import hashlib
import json
import struct
from typing import Dict, List, Tuple

import numpy as np

from constructor.constructor import PAYLOAD_KINDS, RankPayload
from core.errors import MalformedPayloadError

MAGIC = b"DPL1"
U32 = struct.Struct("<I")
DTYPES = {1: np.dtype("<i4")}
ARRAY_FIELDS = ("tokens", "segment_ids")


def _header(p: RankPayload) -> Dict:
    return {
        "plan_id": p.plan_id,
        "rank": p.rank,
        "coords": list(p.coords),
        "graph": p.graph,
        "node": p.node,
        "microbatch": p.microbatch,
        "kind": p.kind,
        "sample_ids": list(p.sample_ids),
        "seq_lens": list(p.seq_lens),
        "offsets": [list(o) for o in p.offsets],
        "shape": list(p.shape),
        "pad_count": p.pad_count,
        "root": p.root,
        "patch_counts": list(p.patch_counts),
        "arrays": [name for name in ARRAY_FIELDS if getattr(p, name) is not None],
    }


def encode_payload(p: RankPayload) -> bytes:
    header = json.dumps(_header(p), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts: List[bytes] = [MAGIC, U32.pack(len(header)), header]
    for name in ARRAY_FIELDS:
        arr = getattr(p, name)
        if arr is None:
            continue
        arr = np.ascontiguousarray(arr, dtype=DTYPES[1])
        parts.append(bytes([1, arr.ndim]))
        parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        parts.append(arr.tobytes())
    return b"".join(parts)


def _take(data: bytes, pos: int, n: int) -> Tuple[bytes, int]:
    if pos + n > len(data):
        raise MalformedPayloadError(f"payload truncated at byte {pos} (wanted {n} more)")
    return data[pos:pos + n], pos + n


def decode_payload(data: bytes) -> RankPayload:
    magic, pos = _take(data, 0, 4)
    if magic != MAGIC:
        raise MalformedPayloadError(f"bad magic {magic!r}")
    raw, pos = _take(data, pos, U32.size)
    (hlen,) = U32.unpack(raw)
    raw, pos = _take(data, pos, hlen)
    try:
        h = json.loads(raw.decode("utf-8"))
        kind = h["kind"]
        names = h["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedPayloadError(f"bad payload header: {exc}") from exc
    if kind not in PAYLOAD_KINDS:
        raise MalformedPayloadError(f"unknown payload kind {kind!r}")
    arrays = {}
    for name in names:
        if name not in ARRAY_FIELDS:
            raise MalformedPayloadError(f"unknown array {name!r}")
        raw, pos = _take(data, pos, 2)
        code, ndim = raw[0], raw[1]
        if code not in DTYPES:
            raise MalformedPayloadError(f"unknown dtype code {code}")
        raw, pos = _take(data, pos, 4 * ndim)
        shape = tuple(int(x) for x in np.frombuffer(raw, dtype="<u4"))
        count = int(np.prod(shape)) if shape else 1
        raw, pos = _take(data, pos, count * DTYPES[code].itemsize)
        arrays[name] = np.frombuffer(raw, dtype=DTYPES[code]).reshape(shape).astype(np.int32)
    if pos != len(data):
        raise MalformedPayloadError(f"{len(data) - pos} trailing bytes after payload")
    try:
        return RankPayload(
            plan_id=h["plan_id"], rank=h["rank"], coords=tuple(h["coords"]), graph=h["graph"], node=h["node"],
            microbatch=h["microbatch"], kind=kind, sample_ids=tuple(h["sample_ids"]),
            seq_lens=tuple(h["seq_lens"]), offsets=tuple(tuple(o) for o in h["offsets"]),
            shape=tuple(h["shape"]), pad_count=h["pad_count"], root=h["root"],
            patch_counts=tuple(h["patch_counts"]), tokens=arrays.get("tokens"),
            segment_ids=arrays.get("segment_ids"),
        )
    except KeyError as exc:
        raise MalformedPayloadError(f"payload header misses {exc}") from exc


def content_hash(p: RankPayload) -> str:
    return hashlib.sha256(encode_payload(p)).hexdigest()


def payload_size(p: RankPayload) -> int:
    return len(encode_payload(p))
