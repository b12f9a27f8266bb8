# tests/test_simulation.py
import numpy as np
import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from core.config import DistributionConfig, SourceConfig, parse_config
from core.errors import InvalidInputError
from core.model import ParallelismConfig, SourceSpec
from loader.storage import InMemoryStorage, open_shard
from main import app
from planner.autoscale import SourceAllocation
from simulation.generator import (Manifest, analytic_mean, draw, fraction_at_most, gen_sources, lengths_of,
                                  make_records, skewed_sources, uniform_sources)
from simulation.harness import (MetricsFrame, bench_balance, bench_context, estimate_ettr, kk_vs_greedy,
                                ledger_totals, memory_ledger, memory_sweep, run_sim, summarize_bench,
                                summary_latency_fit)
from simulation.report import load_metrics, read_csv_tables, report, write_table
from tests.conftest import SMALL_CONFIG

MIB = 1 << 20


# -----------------------------
# Generator
# -----------------------------

def test_lognormal_draws_match_their_mean():
    dist = DistributionConfig(family="lognormal", median=100, sigma=0.5, clip=(0, 1 << 20))
    values = draw(dist, 100_000, np.random.default_rng(0))
    assert values.dtype == np.int64
    assert values.mean() == pytest.approx(analytic_mean(dist), rel=0.05)


def test_draws_are_clipped():
    dist = DistributionConfig(family="pareto", alpha=1.5, scale=10, clip=(10, 50))
    values = draw(dist, 5000, np.random.default_rng(1))
    assert values.min() >= 10 and values.max() == 50
    assert (draw(DistributionConfig(family="constant", value=7), 3, np.random.default_rng(2)) == 7).all()


def test_skewed_fixture_is_short_text_heavy():
    text, patches = lengths_of(make_records(skewed_sources()[0], seed=0))
    assert fraction_at_most(text, 64) == pytest.approx(0.9823, abs=0.01)
    assert patches.min() >= 16


def test_sources_generate_independently():
    a, b = skewed_sources(records=50, n_sources=2)
    alone = make_records(b, seed=9)
    memory = InMemoryStorage()
    gen_sources([a, b], seed=9, memory=memory)
    stored = open_shard(b.to_spec().uri, memory)
    assert [stored.read(i) for i in range(50)] == alone


def test_many_sources_one_manifest():
    sources = [SourceConfig(id=i, record_count=2) for i in range(306)]
    manifest = gen_sources(sources, seed=0, memory=InMemoryStorage())
    assert len(manifest) == 306
    assert len(set(manifest.uris().values())) == 306


@pytest.mark.parametrize("fmt", [".jsonl", ".bin"])
def test_manifest_checksums_are_stable(tmp_path, fmt):
    sources = uniform_sources(records=64, n_sources=2, length=12)
    first = gen_sources(sources, seed=5, out_dir=tmp_path / "a", fmt=fmt)
    second = gen_sources(sources, seed=5, out_dir=tmp_path / "b", fmt=fmt)
    assert [s.sha256 for s in first.shards] == [s.sha256 for s in second.shards]
    again = Manifest.read(tmp_path / "a")
    assert again.uris() == first.uris()
    assert open_shard(again.uris()[1]).record_count == 64


def test_run_from_generated_files(tmp_path, small_config_dict):
    cfg = parse_config(small_config_dict)
    gen_sources(cfg.sources, cfg.seed, out_dir=tmp_path)
    small_config_dict["data_dir"] = str(tmp_path)
    from_files = run_sim(parse_config(small_config_dict), memory=InMemoryStorage())
    in_memory = run_sim(cfg, memory=InMemoryStorage())
    assert from_files.stream_digest == in_memory.stream_digest


# -----------------------------
# Balance outcomes
# -----------------------------

def _mixture_config(sources, strategy, dp=2, m=2, batch=16, steps=4):
    return parse_config({"seed": 1, "steps": steps, "batch_size": batch,
                         "sources": [s.model_dump() for s in sources],
                         "parallelism": {"dp": dp, "microbatches": m}, "strategy": strategy})


def test_uniform_lengths_balance_exactly():
    result = run_sim(_mixture_config(uniform_sources(records=256), "backbone_balance"), memory=InMemoryStorage())
    assert result.metrics.summary["imbalance_max_min"] == pytest.approx(1.0)
    assert len(result.metrics.iterations) == 4


def test_balancing_beats_the_unbalanced_layout():
    sources = skewed_sources(records=1024)
    means = {}
    for strategy in ("vanilla", "backbone_balance"):
        cfg = _mixture_config(sources, strategy, dp=4, m=2, batch=64, steps=6)
        result = run_sim(cfg, memory=InMemoryStorage())
        means[strategy] = result.metrics.iterations["imbalance_max_mean"].mean()
    assert means["backbone_balance"] <= means["vanilla"]


def test_hybrid_balance_flattens_skewed_bins():
    sources = skewed_sources(records=1024)
    summary = {}
    for strategy in ("vanilla", "hybrid_balance"):
        cfg = _mixture_config(sources, strategy, dp=4, m=4, batch=64, steps=6)
        summary[strategy] = run_sim(cfg, memory=InMemoryStorage()).metrics.summary
    assert summary["vanilla"]["imbalance_max_min"] >= 3.0
    assert summary["hybrid_balance"]["imbalance_max_mean"] <= 1.3


def test_bench_balance_speedup_grows_with_skew():
    df = bench_balance(sigmas=(0.2, 0.8), methods=("greedy", "kk"), dp=8, m=2, batch_size=64, trials=10)
    assert set(df["method"]) == {"sequential", "greedy", "karmarkar_karp"}
    assert (df[df["method"] == "sequential"]["speedup"] == 1.0).all()
    summary = summarize_bench(df).set_index(["sigma", "method"])
    kk = summary.xs("karmarkar_karp", level="method")
    assert (kk["speedup"] > 1.0).all()
    assert kk.loc[0.8, "speedup"] > kk.loc[0.2, "speedup"]
    seq = summary.xs("sequential", level="method")
    assert (kk["max_mean"] <= seq["max_mean"]).all()
    assert 0.0 <= kk_vs_greedy(df) <= 1.0


def test_speedup_never_drops_as_skew_rises():
    df = bench_balance(sigmas=(0.2, 0.4, 0.6), methods=("kk",))
    speedup = summarize_bench(df).set_index(["sigma", "method"]).xs("karmarkar_karp", level="method")["speedup"]
    assert speedup.is_monotonic_increasing
    assert speedup.loc[0.6] >= 1.5


def test_bench_context_rows():
    df = bench_context(contexts=(1024, 2048), base_context=1024, dp=4, m=2, batch_size=32, trials=3)
    assert list(df["context"]) == [1024, 2048]
    assert (df["speedup"] > 0).all() and (df["max_mean"] >= 1.0).all()


# -----------------------------
# Memory
# -----------------------------

def test_naive_ledger_scales_with_world_size():
    specs = [SourceSpec(i, f"mem://m-{i}", 10, 1.0, access_state_bytes=70 * MIB) for i in range(2)]
    allocs = [SourceAllocation(0, 2, 4), SourceAllocation(1, 1, 2)]
    config = ParallelismConfig(pp=2, dp=4, cp=2)
    disagg = ledger_totals(memory_ledger(specs, allocs, config, worker_ctx_bytes=MIB))
    naive = ledger_totals(memory_ledger(specs, allocs, config, worker_ctx_bytes=MIB, mode="naive"))
    assert disagg["access_state"] == 3 * 70 * MIB
    assert disagg["worker_ctx"] == 10 * MIB
    assert naive["access_state"] == config.world_size * 2 * 70 * MIB
    assert naive["worker_ctx"] == config.world_size * disagg["worker_ctx"]


def test_naive_clones_cost_at_least_cp_times_pp():
    specs = [SourceSpec(i, f"mem://m-{i}", 10, 1.0, access_state_bytes=70 * MIB) for i in range(3)]
    allocs = [SourceAllocation(0, 1, 8), SourceAllocation(1, 1, 2), SourceAllocation(2, 1, 1)]
    config = ParallelismConfig(pp=4, cp=4)
    disagg = ledger_totals(memory_ledger(specs, allocs, config, worker_ctx_bytes=MIB, buffer_bytes=4 * MIB))
    naive = ledger_totals(memory_ledger(specs, allocs, config, worker_ctx_bytes=MIB, buffer_bytes=4 * MIB,
                                        mode="naive"))
    assert naive["total"] / disagg["total"] >= config.cp * config.pp


def test_memory_ratio_in_run_summary(small_config_dict):
    small_config_dict["parallelism"] = {"dp": 4, "microbatches": 2}
    result = run_sim(parse_config(small_config_dict), memory=InMemoryStorage())
    summary = result.metrics.summary
    assert summary["memory_ratio"] == pytest.approx(4.0)
    assert summary["memory_naive"] > summary["memory_disaggregated"]


def test_memory_mode_picks_the_reported_table(small_config_dict):
    live = run_sim(parse_config(small_config_dict), memory=InMemoryStorage()).metrics
    assert not live.memory["actor"].str.contains("/").any()
    small_config_dict["memory_mode"] = "naive"
    naive = run_sim(parse_config(small_config_dict), memory=InMemoryStorage()).metrics
    assert naive.memory["actor"].str.contains("/").all()
    assert sorted(naive.memory["step"].unique()) == list(range(small_config_dict["steps"]))
    per_step = naive.memory.groupby("step")["total"].sum()
    assert (per_step == naive.summary["memory_naive"]).all()


def test_memory_sweep_axes():
    df = memory_sweep(source_counts=(1, 2, 4), worker_counts=(1, 2, 4))
    sources = df[df["axis"] == "sources"]
    workers = df[df["axis"] == "workers"]
    assert list(sources["access_state"]) == [70 * MIB, 140 * MIB, 280 * MIB]
    assert workers["access_state"].nunique() == 1
    assert list(workers["worker_ctx"]) == [256 * MIB, 512 * MIB, 1024 * MIB]


# -----------------------------
# Latency fit and ETTR
# -----------------------------

def test_summary_gather_grows_sublinearly():
    tree = summary_latency_fit(fan_in=4)
    flat = summary_latency_fit(fan_in=1)
    assert tree["slope"] < 0.7
    assert flat["slope"] == pytest.approx(1.0)
    assert flat["r2"] == pytest.approx(1.0)


def test_ettr_hot_beats_cold():
    est = estimate_ettr(mtbf_steps=50, steps=5000, shadows=1000)
    assert est["failures"] > 0
    assert est["ettr_hot"] == pytest.approx(1.0)
    assert 0.0 < est["ettr_cold"] < 1.0
    assert est["ratio"] >= 1.0
    one = estimate_ettr(mtbf_steps=50, steps=5000, shadows=1)
    assert one["ettr_hot"] >= one["ettr_cold"]
    assert estimate_ettr(mtbf_steps=50, steps=5000) == estimate_ettr(mtbf_steps=50, steps=5000)


# -----------------------------
# Report
# -----------------------------

def test_empty_frame_writes_headers(tmp_path):
    written = report(MetricsFrame.empty(), tmp_path, plots=False)
    assert sorted(p.name for p in written) == ["flops.csv", "iterations.csv", "latency.csv", "memory.csv",
                                               "metrics.json"]
    assert (tmp_path / "flops.csv").read_text().strip() == "step,graph,node,microbatch,samples,tokens,flops"
    with pytest.raises(InvalidInputError):
        report(MetricsFrame.empty(), tmp_path, formats=("xml",))


def test_csv_and_json_reports_agree(tmp_path, small_config):
    metrics = run_sim(small_config, memory=InMemoryStorage()).metrics
    report(metrics, tmp_path)
    assert (tmp_path / "heatmap_sequence.png").exists()
    assert (tmp_path / "heatmap_sequence.csv").exists()
    csv = read_csv_tables(tmp_path)
    loaded = load_metrics(tmp_path)
    for name in ("flops", "latency", "iterations"):
        pd.testing.assert_frame_equal(csv[name], loaded.tables()[name], check_dtype=False)
    assert loaded.summary["steps"] == small_config.steps


def test_write_table_by_extension(tmp_path):
    df = pd.DataFrame({"a": [1, 2], "b": [0.5, 1.5]})
    pd.testing.assert_frame_equal(pd.read_csv(write_table(df, tmp_path / "t.csv")), df)
    pd.testing.assert_frame_equal(pd.read_json(write_table(df, tmp_path / "t.json")), df)


# -----------------------------
# Command line
# -----------------------------

@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(SMALL_CONFIG))
    return path


def test_cli_exit_codes(tmp_path, config_file):
    runner = CliRunner()
    ok = runner.invoke(app, ["--log-level", "ERROR", "run", str(config_file), "--dump-topology"])
    assert ok.exit_code == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"sources": []}))
    assert runner.invoke(app, ["--log-level", "ERROR", "run", str(bad)]).exit_code == 2
    assert runner.invoke(app, ["--log-level", "ERROR", "run", str(tmp_path / "missing.yaml")]).exit_code == 2


def test_cli_run_and_report(tmp_path, config_file):
    runner = CliRunner()
    out = tmp_path / "report"
    result = runner.invoke(app, ["--log-level", "ERROR", "run", str(config_file), "--out", str(out), "--no-plots"])
    assert result.exit_code == 0, result.output
    assert (out / "metrics.json").exists()
    again = tmp_path / "again"
    result = runner.invoke(app, ["--log-level", "ERROR", "report", str(out), "--out", str(again), "--no-plots"])
    assert result.exit_code == 0, result.output
    assert (again / "iterations.csv").read_text() == (out / "iterations.csv").read_text()
