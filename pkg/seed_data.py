# seed_data.py
"""Populate a demo workspace: generated shards for configs/demo.yaml plus a config pointing at them."""
import sys
from pathlib import Path

from core.config import FaultConfig, dump_config, load_config
from core.logs import setup_logging
from simulation.generator import fraction_at_most, gen_sources, lengths_of, make_records

DEMO_CONFIG = Path("configs") / "demo.yaml"
DATA_DIR = Path("data")


def seed_data(config: Path = DEMO_CONFIG, out_dir: Path = DATA_DIR) -> Path:
    cfg = load_config(config)
    manifest = gen_sources(cfg.sources, cfg.seed, out_dir=out_dir)
    for source in cfg.sources:
        text, patches = lengths_of(make_records(source, cfg.seed))
        print(f"source {source.id} ({source.name}): {len(text)} records, "
              f"{fraction_at_most(text, 64):.2%} with text <= 64 tokens, "
              f"{(patches > 0).mean():.0%} with images")

    # the seeded config reads files instead of regenerating in memory; script events are inlined
    seeded = cfg.model_copy(update={"data_dir": str(out_dir.resolve()),
                                    "faults": FaultConfig(events=cfg.faults.events)})
    path = out_dir / "run.yaml"
    path.write_text(dump_config(seeded), encoding="utf-8")
    print(f"wrote {len(manifest)} shards and {path}")
    return path


if __name__ == "__main__":
    setup_logging("INFO")
    seed_data(*(Path(a) for a in sys.argv[1:3]))
