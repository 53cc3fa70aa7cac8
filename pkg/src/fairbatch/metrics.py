"""Fairness and performance metrics computed from the event log and the token deliveries of a run."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from fairbatch.constants import DEFAULT_OUTPUT_WEIGHT, DEFAULT_REPORT_WINDOW_S
from fairbatch.engine import LogEventType
from fairbatch.errors import MetricsError

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from fairbatch.engine import Delivery, EventLog, SimResult

logger = logging.getLogger(__name__)


def jain_index(values: Sequence[float]) -> float:
    """Jain's fairness index: 1 for an equal allocation, ``1/n`` when one client gets everything."""
    if not values:
        msg = "Jain's index needs at least one value"
        raise MetricsError(msg)
    array = np.asarray(values, dtype=float)
    if np.any(array < 0):
        msg = f"Jain's index is defined for non-negative values, got {list(values)}"
        raise MetricsError(msg)
    squares = float(np.sum(array**2))
    if squares == 0:
        logger.info("All %d values are zero; Jain's index taken as 1", len(values))
        return 1.0
    return float(np.sum(array)) ** 2 / (len(values) * squares)


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Smallest value with at least ``percentile`` percent of the values at or below it."""
    return float(np.percentile(np.asarray(values, dtype=float), percentile, method="inverted_cdf"))


@dataclass(frozen=True)
class Percentiles:
    """Nearest-rank percentiles of a sample."""

    p50: float
    p90: float
    p99: float
    count: int

    @classmethod
    def of(cls, values: Sequence[float]) -> Percentiles:
        """Percentiles of a non-empty sample."""
        return cls(nearest_rank(values, 50), nearest_rank(values, 90), nearest_rank(values, 99), len(values))


@dataclass(frozen=True)
class LatencyStats:
    """Per-client and overall percentiles."""

    per_client: dict[str, Percentiles]
    overall: Percentiles


def _latency_stats(samples: Mapping[str, list[float]], what: str) -> LatencyStats:
    everything = [value for values in samples.values() for value in values]
    if not everything:
        msg = f"No {what} samples in the log"
        raise MetricsError(msg)
    per_client = {client_id: Percentiles.of(values) for client_id, values in sorted(samples.items()) if values}
    return LatencyStats(per_client, Percentiles.of(everything))


def _arrivals(log: EventLog) -> dict[int, float]:
    return {event.request_id: event.time for event in log.of_type(LogEventType.arrived)}


def ttft_stats(log: EventLog) -> LatencyStats:
    """Time to first token (first_token minus arrival), per client and overall."""
    arrivals = _arrivals(log)
    samples: dict[str, list[float]] = defaultdict(list)
    for event in log.of_type(LogEventType.first_token):
        samples[event.client_id].append(event.time - arrivals[event.request_id])
    return _latency_stats(samples, "first token")


def e2e_stats(log: EventLog) -> LatencyStats:
    """End-to-end latency (completion minus arrival), per client and overall."""
    arrivals = _arrivals(log)
    samples: dict[str, list[float]] = defaultdict(list)
    for event in log.of_type(LogEventType.completed):
        samples[event.client_id].append(event.time - arrivals[event.request_id])
    return _latency_stats(samples, "completion")


def window_ends(duration: float, window: float) -> list[float]:
    """Sampling instants: every window boundary up to and including the end of the run."""
    count = math.floor(duration / window + 1e-9) if duration > 0 else 0
    ends = [index * window for index in range(1, count + 1)]
    if not ends or ends[-1] < duration:
        ends.append(duration)
    return ends


def weighted_service(delivery: Delivery, weight: float, output_weight: float) -> float:
    """Weighted tokens of one delivery."""
    return weight * (delivery.input_tokens + output_weight * delivery.output_tokens)


@dataclass(frozen=True)
class ServiceDifference:
    """Largest gap in accumulated weighted service between any two clients, sampled per window."""

    max: float
    avg: float
    var: float
    series: list[tuple[float, float]]


def service_difference(
    deliveries: Sequence[Delivery],
    weights: Mapping[str, float],
    duration: float,
    *,
    output_weight: float = DEFAULT_OUTPUT_WEIGHT,
    window: float = DEFAULT_REPORT_WINDOW_S,
) -> ServiceDifference:
    """Max, mean and variance of ``max_i S_i(t) - min_j S_j(t)`` over the window boundaries."""
    if len(weights) < 2:  # noqa: PLR2004
        msg = f"Service difference needs at least two clients, got {len(weights)}"
        raise MetricsError(msg)
    ordered = sorted(deliveries, key=lambda delivery: delivery.time)
    totals = dict.fromkeys(weights, 0.0)
    series = []
    position = 0
    for end in window_ends(duration, window):
        while position < len(ordered) and ordered[position].time <= end:
            delivery = ordered[position]
            totals[delivery.client_id] += weighted_service(delivery, weights[delivery.client_id], output_weight)
            position += 1
        series.append((end, max(totals.values()) - min(totals.values())))
    gaps = np.array([gap for _, gap in series])
    return ServiceDifference(float(gaps.max()), float(gaps.mean()), float(gaps.var()), series)


def _rate(start: float, end: float, amount: float) -> tuple[float, float]:
    return end, amount / (end - start) if end > start else 0.0


def service_rate_series(
    deliveries: Sequence[Delivery],
    weights: Mapping[str, float],
    duration: float,
    *,
    output_weight: float = DEFAULT_OUTPUT_WEIGHT,
    window: float = DEFAULT_REPORT_WINDOW_S,
) -> dict[str, list[tuple[float, float]]]:
    """Weighted tokens delivered per second, per client and window."""
    ends = window_ends(duration, window)
    served = {client_id: [0.0] * len(ends) for client_id in weights}
    for delivery in deliveries:
        index = min(max(0, math.ceil(delivery.time / window) - 1), len(ends) - 1)
        served[delivery.client_id][index] += weighted_service(delivery, weights[delivery.client_id], output_weight)
    starts = [0.0, *ends[:-1]]
    return {
        client_id: [_rate(start, end, value) for start, end, value in zip(starts, ends, values)]
        for client_id, values in sorted(served.items())
    }


def request_rate_series(
    log: EventLog,
    client_ids: Sequence[str],
    duration: float,
    window: float = DEFAULT_REPORT_WINDOW_S,
) -> dict[str, list[tuple[float, float]]]:
    """Arrivals per second, per client and window."""
    ends = window_ends(duration, window)
    counts = {client_id: [0] * len(ends) for client_id in client_ids}
    for event in log.of_type(LogEventType.arrived):
        index = min(math.floor(event.time / window), len(ends) - 1)
        counts[event.client_id][index] += 1
    starts = [0.0, *ends[:-1]]
    return {
        client_id: [_rate(start, end, count) for start, end, count in zip(starts, ends, values)]
        for client_id, values in sorted(counts.items())
    }


def delivered_tokens(deliveries: Sequence[Delivery]) -> int:
    """Input plus output tokens delivered, in-flight requests included."""
    return sum(delivery.input_tokens + delivery.output_tokens for delivery in deliveries)


def throughput(deliveries: Sequence[Delivery], duration: float) -> float:
    """Delivered tokens per simulated second."""
    return delivered_tokens(deliveries) / duration if duration > 0 else 0.0


@dataclass
class SimReport:
    """Summary and time series of one run."""

    duration: float
    completed: int
    rejected: int
    throughput: float
    mean_util: float
    jain_hf: float
    jain_ttft_p90: float | None
    max_diff: float | None
    avg_diff: float | None
    var_diff: float | None
    ttft: LatencyStats | None
    e2e: LatencyStats | None
    service_difference: list[tuple[float, float]] = field(default_factory=list)
    service_rate: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    request_rate: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    jain_hf_series: list[tuple[float, float]] = field(default_factory=list)

    def summary(self) -> dict[str, float | int | None]:
        """The scalar part of the report."""
        return {
            "duration": self.duration,
            "completed": self.completed,
            "rejected": self.rejected,
            "throughput": self.throughput,
            "mean_util": self.mean_util,
            "jain_hf": self.jain_hf,
            "jain_ttft_p90": self.jain_ttft_p90,
            "max_diff": self.max_diff,
            "avg_diff": self.avg_diff,
            "var_diff": self.var_diff,
        }

    def to_dict(self) -> dict[str, Any]:
        """Plain data, ready for JSON."""
        return asdict(self)

    def to_json(self) -> str:
        """Indented, key-sorted JSON."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_report(
    result: SimResult,
    *,
    output_weight: float = DEFAULT_OUTPUT_WEIGHT,
    window: float = DEFAULT_REPORT_WINDOW_S,
) -> SimReport:
    """Compute every metric of a finished run."""
    log, weights, duration = result.log, result.weights, result.duration
    completed = log.of_type(LogEventType.completed)
    ttft = ttft_stats(log) if log.of_type(LogEventType.first_token) else None
    e2e = e2e_stats(log) if completed else None

    difference = None
    if len(weights) >= 2:  # noqa: PLR2004
        difference = service_difference(
            result.deliveries, weights, duration, output_weight=output_weight, window=window,
        )

    by_time: dict[float, list[float]] = defaultdict(list)
    for sample in result.counters:
        by_time[sample.time].append(sample.hf)
    total_ms = result.busy_ms + result.overhead_ms

    return SimReport(
        duration=duration,
        completed=len(completed),
        rejected=result.rejected,
        throughput=throughput(result.deliveries, duration),
        mean_util=result.busy_ms / (duration * 1000) if duration > 0 and total_ms > 0 else 0.0,
        jain_hf=jain_index([client.hf for client in result.final_clients]) if result.final_clients else 1.0,
        jain_ttft_p90=jain_index([stats.p90 for stats in ttft.per_client.values()]) if ttft else None,
        max_diff=difference.max if difference else None,
        avg_diff=difference.avg if difference else None,
        var_diff=difference.var if difference else None,
        ttft=ttft,
        e2e=e2e,
        service_difference=difference.series if difference else [],
        service_rate=service_rate_series(
            result.deliveries, weights, duration, output_weight=output_weight, window=window,
        ),
        request_rate=request_rate_series(log, list(weights), duration, window),
        jain_hf_series=[(time, jain_index(values)) for time, values in sorted(by_time.items())],
    )
