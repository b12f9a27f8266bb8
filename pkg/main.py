# main.py
"""Command line entry point: gen, run, bench-balance, replay, report."""
from functools import wraps
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import typer
from rich.console import Console
from rich.table import Table

from core.config import load_config
from core.errors import DataPlaneError, InvalidInputError
from core.logs import get_logger, setup_logging
from placetree.tree import build_tree
from simulation.generator import gen_sources
from simulation.harness import (bench_balance, bench_context, estimate_ettr, kk_vs_greedy, memory_sweep, replay,
                                run_sim, summarize_bench)
from simulation.report import load_metrics, report, write_table

app = typer.Typer(add_completion=False, help="Multisource data plane simulator.")
console = Console()
logger = get_logger(__name__)


@app.callback()
def main(log_level: str = typer.Option("WARNING", "--log-level", help="DEBUG, INFO, WARNING or ERROR.")):
    setup_logging(log_level)


def exits_on_error(fn):
    """Map DataPlaneError subclasses to their exit codes."""
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DataPlaneError as exc:
            console.print(f"[bold red]error:[/] {type(exc).__name__}: {exc}")
            raise typer.Exit(code=exc.exit_code)
    return wrapper


# -----------------------------
# Helpers
# -----------------------------

def _split(text: str, cast=str) -> List:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"cannot parse list {text!r}: {exc}") from exc


def _overrides(seed: Optional[int], steps: Optional[int], threads: Optional[int],
               checkpoint_dir: Optional[Path]) -> Dict:
    return {"seed": seed, "steps": steps, "runtime.threads": threads,
            "runtime.checkpoint_dir": str(checkpoint_dir) if checkpoint_dir else None}


def print_frame(df: pd.DataFrame, title: str, floatfmt: str = "{:.4g}"):
    table = Table(title=title)
    for col in df.columns:
        table.add_column(str(col), justify="right")
    for row in df.itertuples(index=False):
        table.add_row(*[floatfmt.format(v) if isinstance(v, float) else str(v) for v in row])
    console.print(table)


def print_summary(summary: Dict, title: str = "Summary"):
    table = Table(title=title)
    table.add_column("metric")
    table.add_column("value", justify="right")
    for key, value in summary.items():
        table.add_row(key, f"{value:.4g}" if isinstance(value, float) else str(value))
    console.print(table)


# -----------------------------
# Commands
# -----------------------------

@app.command()
@exits_on_error
def gen(config: Path = typer.Argument(..., help="Run config (YAML)."),
        out: Path = typer.Option(Path("data"), "--out", help="Directory for shards and manifest.json."),
        seed: Optional[int] = typer.Option(None, "--seed"),
        fmt: str = typer.Option(".jsonl", "--format", help=".jsonl or .bin")):
    """Synthesize one shard per configured source."""
    cfg = load_config(config, {"seed": seed})
    manifest = gen_sources(cfg.sources, cfg.seed, out_dir=out, fmt=fmt)
    table = Table(title=f"Shards in {out}")
    for col in ("source", "name", "records", "sha256"):
        table.add_column(col)
    for s in manifest.shards:
        table.add_row(str(s.source_id), s.name, str(s.records), s.sha256[:16])
    console.print(table)


@app.command()
@exits_on_error
def run(config: Path = typer.Argument(..., help="Run config (YAML)."),
        out: Optional[Path] = typer.Option(None, "--out", help="Write the report here."),
        seed: Optional[int] = typer.Option(None, "--seed"),
        steps: Optional[int] = typer.Option(None, "--steps"),
        threads: Optional[int] = typer.Option(None, "--threads"),
        checkpoint_dir: Optional[Path] = typer.Option(None, "--checkpoint-dir"),
        formats: str = typer.Option("csv,json", "--formats"),
        plots: bool = typer.Option(True, "--plots/--no-plots"),
        dump_topology: bool = typer.Option(False, "--dump-topology", help="Print the rank tree and exit."),
        dump_dgraph: Optional[Path] = typer.Option(None, "--dump-dgraph",
                                                   help="Write each plan's graphs as DOT files here.")):
    """Simulate the configured cluster for the configured steps."""
    cfg = load_config(config, _overrides(seed, steps, threads, checkpoint_dir))
    if dump_topology:
        console.print(build_tree(cfg.parallelism_config()).dump(), markup=False)
        return
    result = run_sim(cfg)
    if dump_dgraph:
        dump_dgraph.mkdir(parents=True, exist_ok=True)
        for plan_id, graphs in sorted(result.runtime.graphs.items()):
            for g in graphs:
                (dump_dgraph / f"plan-{plan_id}-{g.name}.dot").write_text(g.to_dot(), encoding="utf-8")
        logger.info("wrote %d plan graphs to %s", len(result.runtime.graphs), dump_dgraph)
    print_summary(result.metrics.summary)
    if len(result.metrics.iterations):
        print_frame(result.metrics.iterations, "Iterations")
    console.print(f"stream digest {result.stream_digest[:16]}  metrics digest {result.metrics.digest()[:16]}")
    if out:
        written = report(result.metrics, out, _split(formats), plots)
        console.print(f"wrote {len(written)} files to {out}")


@app.command("bench-balance")
@exits_on_error
def bench_balance_cmd(sigmas: str = typer.Option("0.2,0.4,0.6", "--sigmas", help="Lognormal skew levels."),
                      methods: str = typer.Option("greedy,karmarkar_karp", "--methods"),
                      dp: int = typer.Option(16, "--dp"),
                      m: int = typer.Option(4, "--m", help="Microbatches per DP rank."),
                      batch_size: int = typer.Option(128, "--batch-size"),
                      trials: int = typer.Option(20, "--trials"),
                      seed: int = typer.Option(0, "--seed"),
                      group_size: int = typer.Option(1, "--group-size"),
                      context: Optional[str] = typer.Option(None, "--context",
                                                            help="Comma separated context lengths to sweep."),
                      out: Optional[Path] = typer.Option(None, "--out", help="CSV or JSON file for raw rows.")):
    """Compare balancers on sampled sequence lengths."""
    if context:
        df = bench_context(_split(context, int), sigma=max(_split(sigmas, float)), method=_split(methods)[-1],
                           dp=dp, m=m, batch_size=batch_size, trials=trials, seed=seed, group_size=group_size)
        print_frame(df, "Speedup per context length")
    else:
        df = bench_balance(_split(sigmas, float), _split(methods), dp=dp, m=m, batch_size=batch_size,
                           trials=trials, seed=seed, group_size=group_size)
        print_frame(summarize_bench(df), "Balance benchmark")
        console.print(f"KK max load <= greedy on {kk_vs_greedy(df):.1%} of trials")
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_table(df, out)


@app.command()
@exits_on_error
def memory(access_state_mib: float = typer.Option(70.0, "--access-state-mib"),
           worker_ctx_mib: float = typer.Option(256.0, "--worker-ctx-mib"),
           out: Optional[Path] = typer.Option(None, "--out")):
    """Memory ledger along the source axis and the worker axis."""
    df = memory_sweep(access_state_bytes=int(access_state_mib * (1 << 20)),
                      worker_ctx_bytes=int(worker_ctx_mib * (1 << 20)))
    print_frame(df, "Memory ledger sweep")
    if out:
        write_table(df, out)


@app.command()
@exits_on_error
def ettr(mtbf: float = typer.Option(..., "--mtbf", help="Mean steps between failures."),
         steps: int = typer.Option(10000, "--steps"),
         shadows: int = typer.Option(1, "--shadows"),
         seed: int = typer.Option(0, "--seed")):
    """Effective training time ratio for shadow failover against cold restart."""
    print_summary(estimate_ettr(mtbf, steps=steps, shadows=shadows, seed=seed), "ETTR")


@app.command("replay")
@exits_on_error
def replay_cmd(config: Path = typer.Argument(..., help="Run config (YAML)."),
               checkpoint_dir: Path = typer.Option(..., "--checkpoint-dir"),
               seed: Optional[int] = typer.Option(None, "--seed")):
    """Restore planner and loaders from snapshots plus the plan log."""
    cfg = load_config(config, {"seed": seed})
    df = replay(cfg, str(checkpoint_dir))
    print_frame(df.assign(digest=df["digest"].str[:16]), "Recovered actors")


@app.command("report")
@exits_on_error
def report_cmd(metrics: Path = typer.Argument(..., help="metrics.json, or the directory holding it."),
               out: Path = typer.Option(..., "--out"),
               formats: str = typer.Option("csv,json", "--formats"),
               plots: bool = typer.Option(True, "--plots/--no-plots")):
    """Re-emit a saved MetricsFrame as CSV, JSON and heatmaps."""
    frame = load_metrics(metrics)
    written = report(frame, out, _split(formats), plots)
    print_summary(frame.summary)
    console.print(f"wrote {len(written)} files to {out}")


if __name__ == "__main__":
    app()
