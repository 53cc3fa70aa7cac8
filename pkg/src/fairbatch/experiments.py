"""Wiring behind the command line: single runs, seed sets, the ablation grid, the alpha sweep and calibration.

Every run writes to its own directory. Every file carries the resolved configuration and the trace hash.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from more_itertools import chunked
from tqdm import tqdm

from fairbatch.constants import (
    ABLATION_CSV,
    COUNTERS_CSV,
    EVENTS_JSONL,
    MOPE_JSON,
    PROFILE_CSV,
    REPORT_JSON,
    SUMMARY_JSON,
    SWEEP_ALPHA_CSV,
    UTILIZATION_CSV,
)
from fairbatch.engine import run
from fairbatch.errors import FairbatchError
from fairbatch.gpu_model import GpuProfile, build_profile
from fairbatch.metrics import SimReport, build_report
from fairbatch.predictor import (
    MopePredictor,
    NoisyOraclePredictor,
    OraclePredictor,
    OutputPredictor,
    PredictionService,
    PredictorKind,
    SingleProxyPredictor,
    evaluate_l1,
    router_accuracy,
)
from fairbatch.workload import Trace, generate_length_corpus, generate_scenario, load_trace

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from pathlib import Path

    from fairbatch.config import PerfConfig, PolicyConfig, PredictorConfig, RunConfig, ScenarioConfig

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "policy",
    "predictor",
    "max_diff",
    "avg_diff",
    "var_diff",
    "jain_hf",
    "jain_ttft_p90",
    "throughput",
    "mean_util",
)
METRIC_COLUMNS = SUMMARY_COLUMNS[2:]
SWEEP_COLUMNS = ("alpha", "jain_ttft_p90_norm", "throughput_norm")
COUNTER_COLUMNS = ("time_s", "client_id", "ufc", "rfc", "hf", "service_cum")
UTILIZATION_COLUMNS = ("time_s", "gpu_util", "busy_ms", "overhead_ms")


def build_trace(scenario: ScenarioConfig, seed: int) -> Trace:
    """Replay the configured trace file, or generate the preset."""
    if scenario.trace is not None:
        return load_trace(scenario.trace, scenario.weights)
    return generate_scenario(
        scenario.preset, seed, scenario.duration, weights=scenario.weights, tag_noise=scenario.tag_noise,
    )


def build_predictor(predictor: PredictorConfig, seed: int, tag_noise: float) -> OutputPredictor:
    """Instantiate, and train when needed, the configured predictor."""
    if predictor.kind == PredictorKind.oracle:
        return OraclePredictor()
    if predictor.kind == PredictorKind.noisy_oracle:
        return NoisyOraclePredictor(predictor.target_l1, seed)
    if predictor.kind == PredictorKind.mope and predictor.model_path is not None:
        return MopePredictor.load(predictor.model_path)

    corpus = generate_length_corpus(seed, predictor.training_size, tag_noise).requests
    if predictor.kind == PredictorKind.single_proxy:
        return SingleProxyPredictor().fit(corpus)
    return MopePredictor(predictor.n_experts, predictor.bucket_percentiles).fit(corpus)


def build_service(predictor: PredictorConfig, perf: PerfConfig, seed: int, tag_noise: float) -> PredictionService:
    """Predictor plus the offline GPU profile it maps lengths through."""
    profile = build_profile(perf.params(), perf.bucket_bounds, perf.reference_input_tokens)
    return PredictionService(build_predictor(predictor, seed, tag_noise), profile, predictor.ema_alpha)


@dataclass(frozen=True)
class RunOutcome:
    """The product of one simulation, small enough to send back from a worker process."""

    label: str
    policy: str
    predictor: str
    seed: int
    trace_hash: str
    report: SimReport
    events_jsonl: str
    counters: list[tuple[float, str, float, float, float, float]]
    utilization: list[tuple[float, float, float, float]]

    def row(self) -> dict[str, Any]:
        """Summary columns of this run."""
        return {"policy": self.policy, "predictor": self.predictor, **self.report.summary()}


def simulate(
    config: RunConfig,
    seed: int,
    policy: PolicyConfig | None = None,
    predictor: PredictorConfig | None = None,
    label: str | None = None,
) -> RunOutcome:
    """Run one seed; ``policy`` and ``predictor`` override the config's own sections."""
    policy = policy or config.policy
    predictor = predictor or config.predictor
    trace = build_trace(config.scenario, seed)
    service = build_service(predictor, config.perf, seed, config.scenario.tag_noise)
    result = run(trace, policy.build(trace.weights), service, config.engine_config(predictor))
    report = build_report(result, output_weight=config.policy.output_weight, window=config.engine.report_window)
    return RunOutcome(
        label=label or f"{policy.label}+{predictor.label}",
        policy=policy.label,
        predictor=predictor.label,
        seed=seed,
        trace_hash=trace.content_hash(),
        report=report,
        events_jsonl=result.log.to_jsonl(),
        counters=[(s.time, s.client_id, s.ufc, s.rfc, s.hf, s.service_cum) for s in result.counters],
        utilization=[(s.time, s.gpu_util, s.busy_ms, s.overhead_ms) for s in result.utilization],
    )


@dataclass(frozen=True)
class _Job:
    config: RunConfig
    seed: int
    policy: PolicyConfig | None = None
    predictor: PredictorConfig | None = None
    label: str | None = None


def _run_job(job: _Job) -> RunOutcome:
    return simulate(job.config, job.seed, job.policy, job.predictor, job.label)


def run_jobs(jobs: Sequence[_Job], workers: int = 1, description: str = "Simulating") -> list[RunOutcome]:
    """Run jobs in order; with ``workers > 1`` each job runs in its own process."""
    progress = {"desc": description, "total": len(jobs), "unit": "run", "leave": False}
    if workers <= 1:
        return [_run_job(job) for job in tqdm(jobs, **progress)]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(tqdm(executor.map(_run_job, jobs), **progress))


def provenance(config: RunConfig, trace_hashes: Iterable[str], **extra: Any) -> dict[str, Any]:  # noqa: ANN401
    """Resolved configuration and trace hashes, attached to every output file."""
    return {"config": config.model_dump(mode="json"), "trace_sha256": sorted(set(trace_hashes)), **extra}


def _comment_lines(meta: dict[str, Any]) -> str:
    return "".join(f"# {key}={json.dumps(value, sort_keys=True)}\n" for key, value in meta.items())


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]], meta: dict[str, Any]) -> None:
    """CSV preceded by ``# key=json`` provenance lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as file:
        file.write(_comment_lines(meta))
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path: Path, data: Any) -> None:  # noqa: ANN401
    """Indented, key-sorted JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_outcome(outcome: RunOutcome, run_dir: Path, config: RunConfig, *, log: bool = False) -> None:
    """Report, counter and utilization series of one run; the event log too when ``log`` is set."""
    meta = provenance(config, [outcome.trace_hash], seed=outcome.seed, label=outcome.label)
    report = {"provenance": meta, "summary": outcome.row(), "report": outcome.report.to_dict()}
    write_json(run_dir / REPORT_JSON, report)
    write_csv(run_dir / COUNTERS_CSV, COUNTER_COLUMNS, outcome.counters, meta)
    write_csv(run_dir / UTILIZATION_CSV, UTILIZATION_COLUMNS, outcome.utilization, meta)
    logger.debug("Wrote run %s seed %d to %s", outcome.label, outcome.seed, run_dir)
    if log:
        (run_dir / EVENTS_JSONL).write_text(outcome.events_jsonl, encoding="utf-8")


def mean_row(outcomes: Sequence[RunOutcome]) -> dict[str, Any]:
    """Per-metric mean over seeds; metrics undefined in every seed stay ``None``."""
    first = outcomes[0]
    row: dict[str, Any] = {"policy": first.policy, "predictor": first.predictor}
    for column in METRIC_COLUMNS:
        values = [value for value in (outcome.row()[column] for outcome in outcomes) if value is not None]
        row[column] = float(np.mean(values)) if values else None
    return row


def run_experiment(config: RunConfig, *, workers: int = 1, log: bool = False) -> list[RunOutcome]:
    """Every configured seed under the configured policy and predictor."""
    outcomes = run_jobs([_Job(config, seed) for seed in config.seeds], workers)
    base = config.output_dir / "run"
    for outcome in outcomes:
        write_outcome(outcome, base / f"seed-{outcome.seed}", config, log=log)
    meta = provenance(config, [outcome.trace_hash for outcome in outcomes])
    summary = {"provenance": meta, "mean": mean_row(outcomes), "seeds": [outcome.row() for outcome in outcomes]}
    write_json(base / SUMMARY_JSON, summary)
    return outcomes


@dataclass(frozen=True)
class AblationRow:
    """Seed-averaged metrics of one grid cell."""

    label: str
    metrics: dict[str, Any]
    trace_hashes: tuple[str, ...]


def run_ablation(config: RunConfig, *, workers: int = 1, log: bool = False) -> list[AblationRow]:
    """Every grid cell on the same traces (one per seed)."""
    jobs = [
        _Job(config, seed, cell.policy, cell.predictor, cell.display) for cell in config.cells for seed in config.seeds
    ]
    outcomes = run_jobs(jobs, workers, "Ablation")
    base = config.output_dir / "ablation"
    rows = []
    for cell, cell_outcomes in zip(config.cells, chunked(outcomes, len(config.seeds))):
        for outcome in cell_outcomes:
            write_outcome(outcome, base / _slug(cell.display) / f"seed-{outcome.seed}", config, log=log)
        hashes = tuple(outcome.trace_hash for outcome in cell_outcomes)
        rows.append(AblationRow(cell.display, mean_row(cell_outcomes), hashes))

    header = ("label", *SUMMARY_COLUMNS, "trace_sha256")
    table = [
        (row.label, *(row.metrics[column] for column in SUMMARY_COLUMNS), ";".join(row.trace_hashes)) for row in rows
    ]
    meta = provenance(config, [trace_hash for row in rows for trace_hash in row.trace_hashes])
    write_csv(config.output_dir / ABLATION_CSV, header, table, meta)
    return rows


def normalize_to_max(values: Sequence[float]) -> list[float]:
    """Divide by the column maximum (a zero maximum leaves zeros)."""
    top = max(values, default=0.0)
    return [value / top if top > 0 else 0.0 for value in values]


def sweep_alpha(config: RunConfig, alphas: Sequence[float], *, workers: int = 1) -> list[tuple[float, float, float]]:
    """One seed set per alpha (beta = 1 - alpha); Jain over P90 TTFT and throughput, normalized to their maxima."""
    policies = [config.policy.model_copy(update={"alpha": alpha}) for alpha in alphas]
    jobs = [_Job(config, seed, policy) for policy in policies for seed in config.seeds]
    outcomes = run_jobs(jobs, workers, "Alpha sweep")
    base = config.output_dir / "sweep-alpha"
    jain, throughput = [], []
    for alpha, group in zip(alphas, chunked(outcomes, len(config.seeds))):
        for outcome in group:
            write_outcome(outcome, base / f"alpha-{alpha}" / f"seed-{outcome.seed}", config)
        means = mean_row(group)
        jain.append(means["jain_ttft_p90"] or 0.0)
        throughput.append(means["throughput"] or 0.0)

    rows = list(zip(alphas, normalize_to_max(jain), normalize_to_max(throughput)))
    meta = provenance(config, [outcome.trace_hash for outcome in outcomes], alphas=list(alphas))
    write_csv(config.output_dir / SWEEP_ALPHA_CSV, SWEEP_COLUMNS, rows, meta)
    return rows


def calibrate(perf: PerfConfig, output_dir: Path) -> tuple[GpuProfile, Path]:
    """Build the offline GPU profile and write it as CSV."""
    profile = build_profile(perf.params(), perf.bucket_bounds, perf.reference_input_tokens)
    path = output_dir / PROFILE_CSV
    output_dir.mkdir(parents=True, exist_ok=True)
    comment = _comment_lines({"perf": perf.model_dump(mode="json")})
    path.write_text(comment + profile.to_csv_text(), encoding="utf-8")
    return profile, path


def collect_summaries(results_dir: Path) -> list[dict[str, Any]]:
    """Summary rows of every report found below ``results_dir``, sorted by path."""
    rows = []
    for path in sorted(results_dir.rglob(REPORT_JSON)):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            rows.append({"run": str(path.parent.relative_to(results_dir)), **data["summary"]})
        except (json.JSONDecodeError, KeyError) as err:
            msg = f"{path}: not a report ({err})"
            raise FairbatchError(msg) from err
    return rows


def _slug(label: str) -> str:
    return "".join(char if char.isalnum() or char in "-_" else "-" for char in label).strip("-").lower()


@dataclass(frozen=True)
class TrainingReport:
    """Held-out quality of a freshly trained MoPE next to the single-proxy baseline."""

    path: Path
    mope_l1: float
    single_proxy_l1: float
    router_accuracy: float
    router_fallbacks: int


def train_predictor(predictor: PredictorConfig, tag_noise: float, seed: int, output_dir: Path) -> TrainingReport:
    """Train MoPE on one corpus, evaluate on a second one drawn with the next seed, and save the model."""
    corpus = generate_length_corpus(seed, predictor.training_size, tag_noise).requests
    held_out = generate_length_corpus(seed + 1, predictor.training_size, tag_noise).requests
    mope = MopePredictor(predictor.n_experts, predictor.bucket_percentiles).fit(corpus)
    baseline = SingleProxyPredictor().fit(corpus)

    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / MOPE_JSON
    mope.save(path)
    return TrainingReport(
        path=path,
        mope_l1=evaluate_l1(mope, held_out),
        single_proxy_l1=evaluate_l1(baseline, held_out),
        router_accuracy=router_accuracy(mope.model_.router, held_out, mope.model_.bucket_bounds),
        router_fallbacks=mope.stats_["router_fallbacks"],
    )
