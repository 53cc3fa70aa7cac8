"""Module that contains the command line app.

Why does this file exist, and why not put this in __main__?

  You might be tempted to import things from __main__ later, but that will cause
  problems: the code will get executed twice:

  - When you run `python -mfairbatch` python will execute
    ``__main__.py`` as a script. That means there won't be any
    ``fairbatch.__main__`` in ``sys.modules``.
  - When you import __main__ it will get executed again (as a module) because
    there's no ``fairbatch.__main__`` in ``sys.modules``.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import typer

from fairbatch.config import RunConfig, load_config
from fairbatch.console import configure_logging, print_error, print_normal, print_success, print_table, print_warning
from fairbatch.constants import ABLATION_CSV, DEFAULT_OUTPUT_DIR, REPORT_JSON, SUMMARY_JSON, SWEEP_ALPHA_CSV
from fairbatch.errors import ConfigError, FairbatchError
from fairbatch.experiments import (
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    calibrate,
    collect_summaries,
    run_ablation,
    run_experiment,
    sweep_alpha,
    train_predictor,
)

if TYPE_CHECKING:
    from collections.abc import Iterator

EXIT_RUNTIME = 1
EXIT_CONFIG = 2

app = typer.Typer(no_args_is_help=True)

# Options keep Optional[...]: older typer releases cannot parse "X | None"
CONFIG_OPTION = typer.Option(None, "--config", "-c", help="JSON run configuration (defaults apply to missing keys)")
OUT_OPTION = typer.Option(None, "--out", "-o", help="Output directory (overrides output_dir)")
SEED_OPTION = typer.Option(None, "--seed", "-s", help="Comma-separated seeds, e.g. 1,2,3 (overrides seeds)")
JOBS_OPTION = typer.Option(1, "--jobs", "-j", min=1, help="Simulations to run in parallel processes")
LOG_OPTION = typer.Option(False, "--log", help=f"Also write the event log of every run next to its {REPORT_JSON}")
ALPHAS_OPTION = typer.Option(None, "--alphas", help="Comma-separated alphas in [0, 1] (overrides alphas)")


@app.callback()
def fairbatch(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug messages to stderr")) -> None:
    """Fairbatch: simulate fair scheduling of multi-tenant LLM requests on a continuous-batching GPU."""
    configure_logging(verbose)


@contextmanager
def exit_on_error() -> Iterator[None]:
    """Print errors raised by the library and exit with the matching code."""
    try:
        yield
    except ConfigError as err:
        print_error("Invalid configuration:", str(err), join_nl=True)
        raise typer.Exit(EXIT_CONFIG) from err
    except FairbatchError as err:
        print_error(str(err))
        raise typer.Exit(EXIT_RUNTIME) from err


def parse_list(text: str | None, cast: type[float] | type[int], name: str) -> list | None:
    """Split ``1,2,3`` into numbers; ``None`` stays ``None``."""
    if text is None:
        return None
    try:
        return [cast(item) for item in text.split(",") if item.strip()]
    except ValueError as err:
        msg = f"{name}: expected comma-separated numbers, got {text!r}"
        raise ConfigError(msg) from err


def resolve_config(config: Path | None, out: Path | None = None, seed: str | None = None, **extra: object) -> RunConfig:
    """Load the config file and apply the command line overrides, validating the result."""
    return load_config(config).with_overrides(output_dir=out, seeds=parse_list(seed, int, "seed"), **extra)


@app.command()
def run(
    config: Optional[Path] = CONFIG_OPTION,  # noqa: UP007
    out: Optional[Path] = OUT_OPTION,  # noqa: UP007
    seed: Optional[str] = SEED_OPTION,  # noqa: UP007
    jobs: int = JOBS_OPTION,
    log: bool = LOG_OPTION,
) -> None:
    """Simulate every seed under the configured policy and predictor, then write per-seed and mean reports."""
    with exit_on_error():
        run_config = resolve_config(config, out, seed)
        outcomes = run_experiment(run_config, workers=jobs, log=log)
    print_table(SUMMARY_COLUMNS, [[outcome.row()[column] for column in SUMMARY_COLUMNS] for outcome in outcomes])
    print_success(f"Wrote {len(outcomes)} run(s) and {SUMMARY_JSON} to {run_config.output_dir / 'run'}")


@app.command()
def ablation(
    config: Optional[Path] = CONFIG_OPTION,  # noqa: UP007
    out: Optional[Path] = OUT_OPTION,  # noqa: UP007
    seed: Optional[str] = SEED_OPTION,  # noqa: UP007
    jobs: int = JOBS_OPTION,
    log: bool = LOG_OPTION,
) -> None:
    """Run every policy and predictor cell of the grid on the same traces and compare them."""
    with exit_on_error():
        run_config = resolve_config(config, out, seed)
        rows = run_ablation(run_config, workers=jobs, log=log)
    print_table(("label", *SUMMARY_COLUMNS), [[row.label, *(row.metrics[c] for c in SUMMARY_COLUMNS)] for row in rows])
    if any(len(set(row.trace_hashes)) != len(run_config.seeds) for row in rows):
        print_warning("Some seeds produced identical traces; is the scenario a replayed trace file?")
    print_success(f"Wrote {run_config.output_dir / ABLATION_CSV}")


@app.command("sweep-alpha")
def sweep_alpha_command(
    config: Optional[Path] = CONFIG_OPTION,  # noqa: UP007
    out: Optional[Path] = OUT_OPTION,  # noqa: UP007
    seed: Optional[str] = SEED_OPTION,  # noqa: UP007
    alphas: Optional[str] = ALPHAS_OPTION,  # noqa: UP007
    jobs: int = JOBS_OPTION,
) -> None:
    """Sweep the Equinox alpha (beta = 1 - alpha) and write normalized latency fairness against throughput."""
    with exit_on_error():
        run_config = resolve_config(config, out, seed, alphas=parse_list(alphas, float, "alphas"))
        rows = sweep_alpha(run_config, run_config.alphas, workers=jobs)
    print_table(SWEEP_COLUMNS, rows)
    print_success(f"Wrote {run_config.output_dir / SWEEP_ALPHA_CSV}")


@app.command(name="calibrate")
def calibrate_command(
    config: Optional[Path] = CONFIG_OPTION,  # noqa: UP007
    out: Optional[Path] = OUT_OPTION,  # noqa: UP007
) -> None:
    """Profile one request per output bucket on the idle cost model and write the GPU profile CSV."""
    with exit_on_error():
        run_config = resolve_config(config, out)
        profile, path = calibrate(run_config.perf, run_config.output_dir)
    rows = [[entry.bucket_upper, entry.latency_ms, entry.gpu_util, entry.tps] for entry in profile.entries]
    print_table(("bucket_upper", "latency_ms", "gpu_util", "tps"), rows)
    print_success(f"Wrote {path}")


@app.command()
def train(
    config: Optional[Path] = CONFIG_OPTION,  # noqa: UP007
    out: Optional[Path] = OUT_OPTION,  # noqa: UP007
    seed: int = typer.Option(1, "--seed", "-s", help="Seed of the training corpus (the next seed is held out)"),
) -> None:
    """Train the MoPE predictor on a synthetic corpus and save it for predictor.model_path."""
    with exit_on_error():
        run_config = resolve_config(config, out)
        report = train_predictor(run_config.predictor, run_config.scenario.tag_noise, seed, run_config.output_dir)
    print_normal(f"Held-out L1: MoPE {report.mope_l1:.1f} tokens, single proxy {report.single_proxy_l1:.1f} tokens")
    print_normal(f"Router accuracy {report.router_accuracy:.3f}, {report.router_fallbacks} fallback(s)")
    print_success(f"Wrote {report.path}")


@app.command()
def summary(
    results: Path = typer.Argument(
        DEFAULT_OUTPUT_DIR,
        help=f"Directory searched recursively for {REPORT_JSON} files",
        exists=True,
        dir_okay=True,
        file_okay=False,
        readable=True,
    ),
) -> None:
    """Print the scalar metrics of every run found below a results directory."""
    with exit_on_error():
        rows = collect_summaries(results)
    if not rows:
        print_error(f"No {REPORT_JSON} found below {results}")
        raise typer.Exit(EXIT_RUNTIME)
    columns = ("run", *SUMMARY_COLUMNS)
    print_table(columns, [[row.get(column) for column in columns] for row in rows])
