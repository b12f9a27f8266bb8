# tests/conftest.py
import copy

import pytest

from core.config import parse_config
from core.model import ParallelismConfig, SampleMeta, SourceSpec
from loader.source_loader import SourceLoader
from loader.storage import InMemoryStorage, Record
from placetree.tree import build_tree

SMALL_CONFIG = {
    "seed": 3,
    "steps": 8,
    "batch_size": 16,
    "sources": [
        {"id": 0, "name": "captions", "record_count": 400, "modalities": ["text", "image"],
         "text_len": {"family": "lognormal", "median": 16, "sigma": 0.6, "clip": [1, 512]},
         "image_patches": {"family": "lognormal", "median": 32, "sigma": 0.5, "clip": [4, 256], "fraction": 0.5}},
        {"id": 1, "name": "documents", "record_count": 400, "transform_cost_ms": 2.0,
         "text_len": {"family": "lognormal", "median": 48, "sigma": 0.8, "clip": [1, 1024]}},
    ],
    "parallelism": {"dp": 2, "microbatches": 2},
    "strategy": "hybrid_balance",
    "loader": {"buffer_capacity": 64},
    "runtime": {"loader_ckpt_every": 3},
}


@pytest.fixture
def small_config_dict():
    return copy.deepcopy(SMALL_CONFIG)


@pytest.fixture
def small_config(small_config_dict):
    return parse_config(small_config_dict)


@pytest.fixture
def memory():
    return InMemoryStorage()


@pytest.fixture
def tree_2x2():
    return build_tree(ParallelismConfig(pp=1, dp=2, cp=1, tp=2, num_microbatches=2))


@pytest.fixture
def spec():
    return SourceSpec(0, "mem://unit-0", 100, 1.0, access_state_bytes=70 << 20)


@pytest.fixture
def records():
    return [Record(index=i, text_len=8 + i % 5, image_patches=(16 if i % 3 == 0 else 0), payload_bytes=4 * (8 + i % 5))
            for i in range(100)]


@pytest.fixture
def loader_factory(spec, records, memory):
    memory.put(spec.uri, records)

    def make(actor=0, actors=1, **kwargs):
        kwargs.setdefault("buffer_capacity", 10)
        return SourceLoader(spec, memory.open(spec.uri), actor=actor, actors=actors, **kwargs)

    return make


def metas_of(lengths, source_id=0):
    return [SampleMeta(sample_id=i, source_id=source_id, text_len=int(l)) for i, l in enumerate(lengths)]
