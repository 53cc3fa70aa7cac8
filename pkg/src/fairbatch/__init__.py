"""Fair scheduling of multi-tenant LLM requests, simulated on a continuous-batching GPU model.

A run goes workload -> predictor -> scheduler -> engine -> metrics:

- :func:`generate_scenario` or :func:`load_trace` produce a :class:`Trace`;
- a :class:`PredictionService` guesses each request's output length and maps it to latency and utilization;
- a :class:`SchedulingPolicy` (FCFS, VTC or Equinox) picks which client's request enters the batch next;
- :func:`run` drives the discrete-event engine and :func:`build_report` turns its log and token deliveries into
  fairness metrics.
"""

from __future__ import annotations

from fairbatch.config import RunConfig, load_config
from fairbatch.engine import Delivery, EngineConfig, EventLog, SimResult, run
from fairbatch.errors import (
    CapacityError,
    ConfigError,
    ConsistencyError,
    FairbatchError,
    MetricsError,
    TraceError,
    TrainingError,
)
from fairbatch.gpu_model import GpuProfile, PerfParams, build_profile
from fairbatch.metrics import SimReport, build_report, jain_index
from fairbatch.predictor import (
    MopePredictor,
    NoisyOraclePredictor,
    OraclePredictor,
    PredictionService,
    SingleProxyPredictor,
)
from fairbatch.scheduler import EquinoxParams, SchedulingPolicy, make_policy
from fairbatch.workload import Request, Trace, generate_scenario, load_trace

__all__ = [
    # keep-sorted start
    "CapacityError",
    "ConfigError",
    "ConsistencyError",
    "Delivery",
    "EngineConfig",
    "EquinoxParams",
    "EventLog",
    "FairbatchError",
    "GpuProfile",
    "MetricsError",
    "MopePredictor",
    "NoisyOraclePredictor",
    "OraclePredictor",
    "PerfParams",
    "PredictionService",
    "Request",
    "RunConfig",
    "SchedulingPolicy",
    "SimReport",
    "SimResult",
    "SingleProxyPredictor",
    "Trace",
    "TraceError",
    "TrainingError",
    "build_profile",
    "build_report",
    "generate_scenario",
    "jain_index",
    "load_config",
    "load_trace",
    "make_policy",
    "run",
    # keep-sorted end
]
