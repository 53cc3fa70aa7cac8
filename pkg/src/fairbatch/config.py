"""Run configuration: one JSON document, strictly validated.

Every field has a default, so ``{}`` is a valid configuration (balanced preset, Equinox with the oracle predictor,
seed 1). Unknown keys are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from fairbatch.constants import (
    DEFAULT_ALPHA,
    DEFAULT_BUCKET_BOUNDS,
    DEFAULT_DECODE_BASE_MS,
    DEFAULT_DECODE_PER_CTX_TOKEN_MS,
    DEFAULT_DELTA,
    DEFAULT_DURATION_S,
    DEFAULT_EMA_ALPHA,
    DEFAULT_INPUT_WEIGHT,
    DEFAULT_MAX_BATCH,
    DEFAULT_MAX_SIM_TIME_S,
    DEFAULT_MEM_CAPACITY_BYTES,
    DEFAULT_MEM_PER_TOKEN_BYTES,
    DEFAULT_NOISY_L1,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_OUTPUT_WEIGHT,
    DEFAULT_PREFILL_LINEAR_MS,
    DEFAULT_PREFILL_QUAD_MS,
    DEFAULT_REFERENCE_INPUT_TOKENS,
    DEFAULT_REFRESH_OVERHEAD_MS,
    DEFAULT_REPORT_WINDOW_S,
    DEFAULT_TAG_NOISE,
    DEFAULT_TRAINING_SIZE,
    MIN_TRAINING_CORPUS,
)
from fairbatch.engine import EngineConfig
from fairbatch.errors import ConfigError
from fairbatch.gpu_model import PerfParams
from fairbatch.predictor import PredictorKind
from fairbatch.scheduler import EquinoxParams, NormMode, PolicyName, SchedulingPolicy, VtcCharge, make_policy
from fairbatch.workload import ScenarioName

Unit = Annotated[float, Field(ge=0, le=1)]

POLICY_LABELS = {PolicyName.fcfs: "FCFS", PolicyName.vtc: "VTC", PolicyName.equinox: "Equinox"}
PREDICTOR_LABELS = {
    PredictorKind.oracle: "Oracle",
    PredictorKind.noisy_oracle: "NoisyOracle",
    PredictorKind.single_proxy: "SingleProxy",
    PredictorKind.mope: "MoPE",
}


class StrictModel(BaseModel):
    """Immutable model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class ScenarioConfig(StrictModel):
    """Where requests come from: a synthetic preset or a trace file (the trace wins when both are set)."""

    preset: ScenarioName = ScenarioName.balanced
    trace: Path | None = None
    duration: float = Field(DEFAULT_DURATION_S, gt=0)
    weights: dict[str, Annotated[float, Field(gt=0)]] = Field(default_factory=dict)
    tag_noise: Unit = DEFAULT_TAG_NOISE


class PolicyConfig(StrictModel):
    """Scheduling policy and its parameters."""

    name: PolicyName = PolicyName.equinox
    alpha: Unit = DEFAULT_ALPHA
    delta: float = Field(DEFAULT_DELTA, ge=0)
    input_weight: float = Field(DEFAULT_INPUT_WEIGHT, gt=0)
    output_weight: float = Field(DEFAULT_OUTPUT_WEIGHT, gt=0)
    norm_mode: NormMode = NormMode.max_over_clients
    vtc_charge: VtcCharge = VtcCharge.incremental
    lift: bool = True

    @property
    def label(self) -> str:
        """Short display name."""
        return POLICY_LABELS[self.name]

    def equinox_params(self) -> EquinoxParams:
        """Equinox parameters of this section."""
        return EquinoxParams(self.alpha, self.delta, self.output_weight, self.norm_mode)

    def build(self, weights: dict[str, float]) -> SchedulingPolicy:
        """A fresh policy for the given clients."""
        return make_policy(
            self.name,
            weights,
            equinox=self.equinox_params(),
            input_weight=self.input_weight,
            output_weight=self.output_weight,
            vtc_charge=self.vtc_charge,
            lift=self.lift,
        )


class PredictorConfig(StrictModel):
    """Output-length predictor and the calibration of its metric map."""

    kind: PredictorKind = PredictorKind.oracle
    target_l1: float = Field(DEFAULT_NOISY_L1, ge=0)
    n_experts: Literal[1, 3, 5] = 3
    bucket_percentiles: list[float] | None = None
    training_size: int = Field(DEFAULT_TRAINING_SIZE, ge=MIN_TRAINING_CORPUS)
    model_path: Path | None = None
    ema_alpha: float = Field(DEFAULT_EMA_ALPHA, gt=0, le=1)
    overhead_ms: float = Field(0.0, ge=0)

    @field_validator("bucket_percentiles")
    @classmethod
    def percentiles_increase(cls, value: list[float] | None) -> list[float] | None:
        """Percentiles must be strictly increasing inside (0, 100)."""
        if value is not None:
            if any(not 0 < item < 100 for item in value):  # noqa: PLR2004
                msg = "percentiles must be within (0, 100)"
                raise ValueError(msg)
            if any(later <= earlier for earlier, later in zip(value, value[1:])):
                msg = "percentiles must be strictly increasing"
                raise ValueError(msg)
        return value

    @property
    def label(self) -> str:
        """Short display name."""
        return PREDICTOR_LABELS[self.kind]


class PerfConfig(StrictModel):
    """GPU cost model and offline profile buckets."""

    prefill_linear: float = Field(DEFAULT_PREFILL_LINEAR_MS, gt=0)
    prefill_quad: float = Field(DEFAULT_PREFILL_QUAD_MS, gt=0)
    decode_base: float = Field(DEFAULT_DECODE_BASE_MS, gt=0)
    decode_per_ctx_token: float = Field(DEFAULT_DECODE_PER_CTX_TOKEN_MS, gt=0)
    refresh_overhead: float = Field(DEFAULT_REFRESH_OVERHEAD_MS, gt=0)
    mem_per_token: int = Field(DEFAULT_MEM_PER_TOKEN_BYTES, gt=0)
    mem_capacity: int = Field(DEFAULT_MEM_CAPACITY_BYTES, gt=0)
    max_batch: int = Field(DEFAULT_MAX_BATCH, gt=0)
    bucket_bounds: list[Annotated[int, Field(gt=0)]] = Field(default_factory=lambda: list(DEFAULT_BUCKET_BOUNDS))
    reference_input_tokens: int = Field(DEFAULT_REFERENCE_INPUT_TOKENS, gt=0)

    @field_validator("bucket_bounds")
    @classmethod
    def bounds_increase(cls, value: list[int]) -> list[int]:
        """Bucket bounds must be non-empty and strictly increasing."""
        if not value or any(later <= earlier for earlier, later in zip(value, value[1:])):
            msg = "bucket bounds must be non-empty and strictly increasing"
            raise ValueError(msg)
        return value

    def params(self) -> PerfParams:
        """Cost model parameters."""
        return PerfParams(
            prefill_linear=self.prefill_linear,
            prefill_quad=self.prefill_quad,
            decode_base=self.decode_base,
            decode_per_ctx_token=self.decode_per_ctx_token,
            refresh_overhead=self.refresh_overhead,
            mem_per_token=self.mem_per_token,
            mem_capacity=self.mem_capacity,
            max_batch=self.max_batch,
        )


class EngineSection(StrictModel):
    """Event loop settings."""

    report_window: float = Field(DEFAULT_REPORT_WINDOW_S, gt=0)
    max_sim_time: float = Field(DEFAULT_MAX_SIM_TIME_S, gt=0)
    backfill: bool = False


class CellConfig(StrictModel):
    """One row of the ablation grid."""

    label: str | None = None
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)

    @property
    def display(self) -> str:
        """The explicit label, or ``Policy+Predictor``."""
        return self.label or f"{self.policy.label}+{self.predictor.label}"


def default_cells() -> list[CellConfig]:
    """FCFS, VTC, VTC with MoPE, Equinox with MoPE and Equinox with the oracle."""
    mope = PredictorConfig(kind=PredictorKind.mope)
    return [
        CellConfig(label="FCFS", policy=PolicyConfig(name=PolicyName.fcfs)),
        CellConfig(label="VTC", policy=PolicyConfig(name=PolicyName.vtc)),
        CellConfig(
            label="VTC+MoPE",
            policy=PolicyConfig(name=PolicyName.vtc, vtc_charge=VtcCharge.predicted),
            predictor=mope,
        ),
        CellConfig(label="Equinox+MoPE", predictor=mope),
        CellConfig(label="Equinox+Oracle"),
    ]


class RunConfig(StrictModel):
    """Everything a run, an ablation grid or an alpha sweep needs."""

    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    perf: PerfConfig = Field(default_factory=PerfConfig)
    engine: EngineSection = Field(default_factory=EngineSection)
    seeds: list[int] = Field(default_factory=lambda: [1], min_length=1)
    output_dir: Path = DEFAULT_OUTPUT_DIR
    cells: list[CellConfig] = Field(default_factory=default_cells, min_length=1)
    alphas: list[Unit] = Field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8, 0.9], min_length=1)

    def engine_config(self, predictor: PredictorConfig | None = None) -> EngineConfig:
        """Engine settings, with the prediction overhead of ``predictor`` (default: this config's)."""
        return EngineConfig(
            perf=self.perf.params(),
            report_window=self.engine.report_window,
            max_sim_time=self.engine.max_sim_time,
            backfill=self.engine.backfill,
            prediction_overhead_ms=(predictor or self.predictor).overhead_ms,
        )

    def with_overrides(self, **changes: Any) -> RunConfig:  # noqa: ANN401
        """Copy with top-level fields replaced, validated again."""
        data = self.model_dump()
        data.update({key: value for key, value in changes.items() if value is not None})
        return validate_config(data)


def format_validation_error(err: ValidationError) -> str:
    """One ``dotted.path: message`` line per problem."""
    lines = []
    for error in err.errors():
        location = ".".join(str(part) for part in error["loc"]) or "<root>"
        lines.append(f"{location}: {error['msg']}")
    return "\n".join(lines)


def validate_config(data: Any) -> RunConfig:  # noqa: ANN401
    """Validate parsed JSON; problems are raised as one :class:`ConfigError`."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(format_validation_error(err)) from err


def _resolve(path: Path | None, base: Path) -> Path | None:
    if path is None or path.is_absolute():
        return path
    return base / path


def load_config(path: Path | None) -> RunConfig:
    """Read a config file; relative trace and model paths are taken relative to the file."""
    if path is None:
        return RunConfig()
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        msg = f"Config file not found: {path}"
        raise ConfigError(msg) from err
    except json.JSONDecodeError as err:
        msg = f"{path}: invalid JSON ({err})"
        raise ConfigError(msg) from err

    config = validate_config(data)
    base = path.parent
    scenario = config.scenario.model_copy(update={"trace": _resolve(config.scenario.trace, base)})
    predictor = config.predictor.model_copy(update={"model_path": _resolve(config.predictor.model_path, base)})
    return config.model_copy(update={"scenario": scenario, "predictor": predictor})
