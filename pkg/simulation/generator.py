# simulation/generator.py
"""Synthetic source shards.

Every record field is drawn from a seeded numpy ``Generator`` keyed by
(seed, source id, field), so one source's records never depend on how many
other sources are generated alongside it.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from core.config import DistributionConfig, SourceConfig
from core.errors import StorageError
from core.logs import get_logger
from loader.storage import MEMORY, InMemoryStorage, Record, write_shard

logger = get_logger(__name__)

MANIFEST = "manifest.json"
KS_ALPHA = 1e-3
KS_MIN_SAMPLES = 20

FIELD_TEXT = 0
FIELD_IMAGE = 1
FIELD_HAS_IMAGE = 2


# -----------------------------
# Distributions
# -----------------------------

def _raw_draws(dist: DistributionConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if dist.family == "lognormal":
        return rng.lognormal(mean=np.log(dist.median), sigma=dist.sigma, size=n)
    if dist.family == "pareto":
        return (rng.pareto(dist.alpha, size=n) + 1.0) * dist.scale
    if dist.family == "empirical":
        edges = np.asarray(dist.edges, dtype=float)
        probs = np.asarray(dist.counts, dtype=float)
        bins = rng.choice(len(probs), size=n, p=probs / probs.sum())
        return rng.uniform(edges[bins], edges[bins + 1])
    return np.full(n, float(dist.value))


def ks_check(dist: DistributionConfig, raw: np.ndarray) -> Optional[float]:
    """KS p-value of the unclipped draws against the configured family; None when not testable."""
    if len(raw) < KS_MIN_SAMPLES:
        return None
    if dist.family == "lognormal" and dist.sigma > 0:
        ref = stats.lognorm(s=dist.sigma, scale=dist.median)
    elif dist.family == "pareto":
        ref = stats.pareto(b=dist.alpha, scale=dist.scale)
    else:
        return None
    return float(stats.kstest(raw, ref.cdf).pvalue)


def draw(dist: DistributionConfig, n: int, rng: np.random.Generator, label: str = "") -> np.ndarray:
    """``n`` non-negative integer values, rounded and clipped to ``dist.clip``."""
    raw = _raw_draws(dist, n, rng)
    p = ks_check(dist, raw)
    if p is not None and p < KS_ALPHA:
        logger.warning("%s: generated values fail the KS check against %s (p=%.2g)", label, dist.family, p)
    lo, hi = dist.clip
    return np.clip(np.rint(raw), lo, hi).astype(np.int64)


def analytic_mean(dist: DistributionConfig) -> float:
    """Mean of the unclipped, unrounded distribution."""
    if dist.family == "lognormal":
        return float(dist.median * np.exp(dist.sigma ** 2 / 2))
    if dist.family == "pareto":
        return float("inf") if dist.alpha <= 1 else float(dist.alpha * dist.scale / (dist.alpha - 1))
    if dist.family == "empirical":
        edges = np.asarray(dist.edges, dtype=float)
        probs = np.asarray(dist.counts, dtype=float)
        mids = (edges[:-1] + edges[1:]) / 2
        return float((mids * probs).sum() / probs.sum())
    return float(dist.value)


# -----------------------------
# Records
# -----------------------------

def make_records(source: SourceConfig, seed: int, count: Optional[int] = None) -> List[Record]:
    n = source.record_count if count is None else count
    label = source.name or f"source {source.id}"
    text = draw(source.text_len, n, np.random.default_rng([seed, source.id, FIELD_TEXT]), f"{label} text_len")
    patches = np.zeros(n, dtype=np.int64)
    if source.image_patches is not None:
        dist = source.image_patches
        patches = draw(dist, n, np.random.default_rng([seed, source.id, FIELD_IMAGE]), f"{label} image_patches")
        if dist.fraction < 1.0:
            keep = np.random.default_rng([seed, source.id, FIELD_HAS_IMAGE]).random(n) < dist.fraction
            patches = np.where(keep, patches, 0)
    total = text + patches
    mean_total = float(total.mean()) if n else 0.0
    scale = total / mean_total if mean_total > 0 else np.ones(n)
    return [Record(index=i, text_len=int(text[i]), image_patches=int(patches[i]),
                   payload_bytes=int(total[i]) * source.bytes_per_token, cost_scale=round(float(scale[i]), 6))
            for i in range(n)]


# -----------------------------
# Shard sets
# -----------------------------

@dataclass
class ShardEntry:
    source_id: int
    name: str
    uri: str
    records: int
    sha256: str


@dataclass
class Manifest:
    seed: int
    shards: List[ShardEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.shards)

    def uris(self) -> Dict[int, str]:
        return {s.source_id: s.uri for s in self.shards}

    def to_dict(self) -> Dict:
        return {"seed": self.seed, "shards": [vars(s) for s in self.shards]}

    @classmethod
    def from_dict(cls, d: Dict) -> "Manifest":
        return cls(d["seed"], [ShardEntry(**s) for s in d["shards"]])

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / MANIFEST
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, out_dir: Union[str, Path]) -> "Manifest":
        try:
            return cls.from_dict(json.loads((Path(out_dir) / MANIFEST).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise StorageError(f"cannot read shard manifest in {out_dir}: {exc}") from exc


def _digest_records(records: Sequence[Record]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.encode() + b"\n")
    return h.hexdigest()


def gen_sources(sources: Sequence[SourceConfig], seed: int, out_dir: Optional[Union[str, Path]] = None,
                memory: Optional[InMemoryStorage] = None, fmt: str = ".jsonl") -> Manifest:
    """Generate one shard per source.

    With ``out_dir`` the shards are files ``source-<id><fmt>`` plus a
    ``manifest.json``; without it they go to the in-memory store under each
    source's ``mem://`` uri.
    """
    manifest = Manifest(seed)
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create {out_dir}: {exc}") from exc
    for source in sorted(sources, key=lambda s: s.id):
        records = make_records(source, seed)
        if out_dir is None:
            uri = source.to_spec().uri
            (memory or MEMORY).put(uri, records)
            digest = _digest_records(records)
        else:
            uri = str(Path(out_dir) / f"source-{source.id}{fmt}")
            digest = write_shard(uri, records)
        manifest.shards.append(ShardEntry(source.id, source.name, uri, len(records), digest))
    if out_dir is not None:
        manifest.write(out_dir)
    logger.info("generated %d shards (%d records)", len(manifest), sum(s.records for s in manifest.shards))
    return manifest


# -----------------------------
# Fixtures
# -----------------------------

def skewed_sources(records: int = 4096, n_sources: int = 2) -> List[SourceConfig]:
    """Short-text heavy mixture: about 98% of text sequences are at most 64 tokens."""
    text = DistributionConfig(family="lognormal", median=16, sigma=0.659, clip=(1, 2048))
    patches = DistributionConfig(family="lognormal", median=196, sigma=0.9, clip=(16, 1024))
    return [SourceConfig(id=i, name=f"skewed-{i}", record_count=records, text_len=text,
                         image_patches=patches, modalities=["text", "image"]) for i in range(n_sources)]


def uniform_sources(records: int = 1024, n_sources: int = 1, length: int = 64) -> List[SourceConfig]:
    const = DistributionConfig(family="constant", value=length, clip=(0, 1 << 20))
    return [SourceConfig(id=i, name=f"uniform-{i}", record_count=records, text_len=const)
            for i in range(n_sources)]


def fraction_at_most(lengths: Sequence[int], bound: int) -> float:
    arr = np.asarray(lengths)
    return float((arr <= bound).mean()) if len(arr) else 0.0


def lengths_of(records: Sequence[Record]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.array([r.text_len for r in records], dtype=np.int64),
            np.array([r.image_patches for r in records], dtype=np.int64))
