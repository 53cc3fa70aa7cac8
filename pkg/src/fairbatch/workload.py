"""Requests, clients and the arrival streams that feed a simulation.

Synthetic traces come from named scenario presets (fixed request lengths, constant, Poisson or piecewise
arrivals); real workloads are replayed from a CSV file with the header::

    client_id,arrival_time_s,input_tokens,output_tokens,category_tag
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import zlib
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

import numpy as np
from more_itertools import unique_everseen

from fairbatch.constants import (
    BUCKET_LABELS,
    CORPUS_INPUT_LOG_MEAN,
    CORPUS_INPUT_LOG_SIGMA,
    CORPUS_MAX_TOKENS,
    CORPUS_OUTPUT_LOG_MEAN,
    CORPUS_OUTPUT_LOG_SIGMA,
    DEFAULT_DURATION_S,
    DEFAULT_TAG_NOISE,
    TAG_BOUNDARIES,
)
from fairbatch.errors import ConfigError, TraceError

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

logger = logging.getLogger(__name__)

TRACE_HEADER = ("client_id", "arrival_time_s", "input_tokens", "output_tokens", "category_tag")
TAG_LABELS = BUCKET_LABELS[3]

# Independent random streams per client, so one stream never shifts another
STREAM_ARRIVALS = 0
STREAM_INPUT = 1
STREAM_OUTPUT = 2
STREAM_TAGS = 3


@dataclass(frozen=True)
class Request:
    """One inference request. ``true_output_tokens`` is hidden from every predictor except the oracle."""

    id: int
    client_id: str
    arrival_time: float
    input_tokens: int
    true_output_tokens: int
    category_tag: str | None = None

    def __post_init__(self) -> None:
        if self.input_tokens < 1:
            msg = f"Request {self.id}: input_tokens must be >= 1, got {self.input_tokens}"
            raise ValueError(msg)
        if self.true_output_tokens < 1:
            msg = f"Request {self.id}: true_output_tokens must be >= 1, got {self.true_output_tokens}"
            raise ValueError(msg)
        if self.arrival_time < 0:
            msg = f"Request {self.id}: arrival_time must be >= 0, got {self.arrival_time}"
            raise ValueError(msg)


class ArrivalProcess(Protocol):
    """Produces arrival instants in ``[0, duration)``."""

    def times(self, rng: np.random.Generator, duration: float) -> list[float]:
        """Arrival instants, sorted."""
        ...


def _check_rate(rate: float) -> None:
    if not rate > 0:
        msg = f"Arrival rates must be > 0, got {rate}"
        raise ConfigError(msg)


@dataclass(frozen=True)
class ConstantArrivals:
    """Deterministic arrivals every ``1 / rate`` seconds, starting at t=0."""

    rate: float

    def __post_init__(self) -> None:
        _check_rate(self.rate)

    def times(self, rng: np.random.Generator, duration: float) -> list[float]:  # noqa: ARG002
        """Arrival instants ``k / rate`` below ``duration``."""
        return _evenly_spaced(0.0, duration, self.rate)

    def rate_at(self, time: float) -> float:  # noqa: ARG002
        """Configured rate at ``time``."""
        return self.rate


@dataclass(frozen=True)
class PoissonArrivals:
    """Poisson arrivals: exponential inter-arrival gaps with mean ``1 / rate``."""

    rate: float

    def __post_init__(self) -> None:
        _check_rate(self.rate)

    def times(self, rng: np.random.Generator, duration: float) -> list[float]:
        """Arrival instants below ``duration``."""
        return _poisson_between(rng, 0.0, duration, self.rate)

    def rate_at(self, time: float) -> float:  # noqa: ARG002
        """Configured mean rate at ``time``."""
        return self.rate


@dataclass(frozen=True)
class PiecewiseArrivals:
    """Rate changes at given instants: ``segments`` is a list of ``(start_s, rate)``."""

    segments: tuple[tuple[float, float], ...]
    poisson: bool = False

    def __post_init__(self) -> None:
        if not self.segments:
            msg = "Piecewise arrivals need at least one (start_s, rate) segment"
            raise ConfigError(msg)
        starts = [start for start, _ in self.segments]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            msg = f"Piecewise segment starts must be strictly increasing, got {starts}"
            raise ConfigError(msg)
        for _, rate in self.segments:
            _check_rate(rate)

    def times(self, rng: np.random.Generator, duration: float) -> list[float]:
        """Arrival instants below ``duration``, restarting the pattern at every segment start."""
        result: list[float] = []
        for index, (start, rate) in enumerate(self.segments):
            end = self.segments[index + 1][0] if index + 1 < len(self.segments) else duration
            end = min(end, duration)
            if start >= end:
                continue
            if self.poisson:
                result.extend(_poisson_between(rng, start, end, rate))
            else:
                result.extend(_evenly_spaced(start, end, rate))
        return result

    def rate_at(self, time: float) -> float:
        """Rate of the segment active at ``time`` (0 before the first segment)."""
        rate = 0.0
        for start, segment_rate in self.segments:
            if start <= time:
                rate = segment_rate
        return rate


@dataclass(frozen=True)
class ReplayedArrivals:
    """Arrival instants taken verbatim from a trace file."""

    instants: tuple[float, ...]

    def times(self, rng: np.random.Generator, duration: float) -> list[float]:  # noqa: ARG002
        """Recorded instants below ``duration``."""
        return [instant for instant in self.instants if instant < duration]


def _evenly_spaced(start: float, end: float, rate: float) -> list[float]:
    count = max(0, math.ceil((end - start) * rate))
    return [start + step / rate for step in range(count) if start + step / rate < end]


def _poisson_between(rng: np.random.Generator, start: float, end: float, rate: float) -> list[float]:
    result = []
    now = start
    while True:
        now += float(rng.exponential(1.0 / rate))
        if now >= end:
            return result
        result.append(now)


class LengthDistribution(Protocol):
    """A distribution over positive token counts."""

    def sample(self, rng: np.random.Generator, size: int) -> list[int]:
        """Draw ``size`` token counts."""
        ...

    def supports(self, tokens: int) -> bool:
        """Return True if ``tokens`` can be drawn."""
        ...


@dataclass(frozen=True)
class PointMass:
    """Always the same length, as in the synthetic scenarios."""

    tokens: int

    def __post_init__(self) -> None:
        if self.tokens < 1:
            msg = f"Token counts must be >= 1, got {self.tokens}"
            raise ConfigError(msg)

    def sample(self, rng: np.random.Generator, size: int) -> list[int]:  # noqa: ARG002
        """Repeat the fixed length."""
        return [self.tokens] * size

    def supports(self, tokens: int) -> bool:
        """Only the fixed length is supported."""
        return tokens == self.tokens


@dataclass(frozen=True)
class EmpiricalLengths:
    """Uniform resampling of observed lengths."""

    values: tuple[int, ...]

    def sample(self, rng: np.random.Generator, size: int) -> list[int]:
        """Resample observed lengths with replacement."""
        return [int(value) for value in rng.choice(np.asarray(self.values), size=size)]

    def supports(self, tokens: int) -> bool:
        """Only observed lengths are supported."""
        return tokens in self.values


@dataclass(frozen=True)
class LogNormalLengths:
    """Rounded log-normal lengths clipped to ``[1, max_tokens]``."""

    log_mean: float
    log_sigma: float
    max_tokens: int = CORPUS_MAX_TOKENS

    def sample(self, rng: np.random.Generator, size: int) -> list[int]:
        """Draw, round and clip."""
        raw = rng.lognormal(self.log_mean, self.log_sigma, size=size)
        return [int(value) for value in np.clip(np.rint(raw), 1, self.max_tokens)]

    def supports(self, tokens: int) -> bool:
        """Every length within the clip range."""
        return 1 <= tokens <= self.max_tokens


@dataclass(frozen=True)
class ClientSpec:
    """A tenant: its priority weight, arrival process and request length distributions."""

    client_id: str
    arrivals: ArrivalProcess
    input_lengths: LengthDistribution
    output_lengths: LengthDistribution
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.weight > 0:
            msg = f"Client {self.client_id!r}: weight must be > 0, got {self.weight}"
            raise ConfigError(msg)


@dataclass(frozen=True)
class Trace:
    """Time-ordered requests plus the clients that sent them."""

    requests: tuple[Request, ...]
    clients: tuple[ClientSpec, ...]
    duration: float
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        known = {client.client_id for client in self.clients}
        unknown = sorted({req.client_id for req in self.requests} - known)
        if unknown:
            msg = f"Requests reference unknown clients: {unknown}"
            raise ValueError(msg)
        arrivals = [req.arrival_time for req in self.requests]
        if any(later < earlier for earlier, later in zip(arrivals, arrivals[1:])):
            msg = "Trace requests must be sorted by arrival_time"
            raise ValueError(msg)

    @property
    def client_ids(self) -> list[str]:
        """Client ids, in declaration order."""
        return [client.client_id for client in self.clients]

    @property
    def weights(self) -> dict[str, float]:
        """Priority weight per client."""
        return {client.client_id: client.weight for client in self.clients}

    def to_csv_text(self) -> str:
        """Render the trace with the replay CSV schema."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for req in self.requests:
            writer.writerow(
                [
                    req.client_id,
                    repr(req.arrival_time),
                    req.input_tokens,
                    req.true_output_tokens,
                    req.category_tag or "",
                ],
            )
        return buffer.getvalue()

    def to_csv(self, path: Path) -> None:
        """Write the trace so that :func:`load_trace` can replay it."""
        path.write_text(self.to_csv_text(), encoding="utf-8")

    def content_hash(self) -> str:
        """SHA-256 of the CSV rendering, used for provenance."""
        return hashlib.sha256(self.to_csv_text().encode("utf-8")).hexdigest()


class ScenarioName(str, Enum):
    """Synthetic scenario presets."""

    balanced = "balanced"
    poisson = "poisson"
    overload = "overload"
    dynamic_increase = "dynamic_increase"


def client_rng(seed: int, client_id: str, stream: int) -> np.random.Generator:
    """Random generator for one client and one purpose; independent of every other client."""
    key = zlib.crc32(client_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key, stream)))


def noisy_category_tag(output_tokens: int, rng: np.random.Generator, noise: float) -> str:
    """Tag derived from the output-length bucket; with probability ``noise`` it is one of the other tags."""
    label = bisect_left(TAG_BOUNDARIES, output_tokens)
    if noise > 0 and rng.random() < noise:
        others = [index for index in range(len(TAG_LABELS)) if index != label]
        label = others[int(rng.integers(len(others)))]
    return TAG_LABELS[label]


def generate_trace(
    clients: Sequence[ClientSpec],
    seed: int,
    duration: float,
    tag_noise: float = DEFAULT_TAG_NOISE,
) -> Trace:
    """Draw arrivals and lengths for every client and merge them into one trace."""
    if not duration > 0:
        msg = f"duration must be > 0, got {duration}"
        raise ConfigError(msg)
    if not 0 <= tag_noise <= 1:
        msg = f"tag_noise must be within [0, 1], got {tag_noise}"
        raise ConfigError(msg)

    rows: list[tuple[float, str, int, int, int, str]] = []
    for spec in clients:
        times = spec.arrivals.times(client_rng(seed, spec.client_id, STREAM_ARRIVALS), duration)
        inputs = spec.input_lengths.sample(client_rng(seed, spec.client_id, STREAM_INPUT), len(times))
        outputs = spec.output_lengths.sample(client_rng(seed, spec.client_id, STREAM_OUTPUT), len(times))
        tag_rng = client_rng(seed, spec.client_id, STREAM_TAGS)
        for index, (time, tokens_in, tokens_out) in enumerate(zip(times, inputs, outputs)):
            tag = noisy_category_tag(tokens_out, tag_rng, tag_noise)
            rows.append((time, spec.client_id, index, tokens_in, tokens_out, tag))

    rows.sort(key=lambda row: (row[0], row[1], row[2]))
    requests = tuple(
        Request(request_id, client_id, time, tokens_in, tokens_out, tag)
        for request_id, (time, client_id, _, tokens_in, tokens_out, tag) in enumerate(rows)
    )
    return Trace(requests, tuple(clients), duration)


def scenario_clients(preset: ScenarioName | str, duration: float = DEFAULT_DURATION_S) -> list[ClientSpec]:
    """Client specs of a preset, with its fixed rates and request lengths."""
    try:
        name = ScenarioName(preset)
    except ValueError as err:
        choices = ", ".join(member.value for member in ScenarioName)
        msg = f"Unknown scenario preset {preset!r}; choose one of: {choices}"
        raise ConfigError(msg) from err

    if name == ScenarioName.balanced:
        return [
            ClientSpec("client1", ConstantArrivals(2.0), PointMass(100), PointMass(400)),
            ClientSpec("client2", ConstantArrivals(1.0), PointMass(100), PointMass(900)),
        ]
    if name == ScenarioName.poisson:
        return [
            ClientSpec("client1", PoissonArrivals(16.0), PointMass(512), PointMass(32)),
            ClientSpec("client2", PoissonArrivals(3.0), PointMass(32), PointMass(512)),
        ]
    if name == ScenarioName.overload:
        return [
            ClientSpec("client1", ConstantArrivals(20.0), PointMass(20), PointMass(180)),
            ClientSpec("client2", ConstantArrivals(2.0), PointMass(200), PointMass(1800)),
        ]
    return [
        ClientSpec("client1", ConstantArrivals(1.0), PointMass(100), PointMass(400)),
        ClientSpec("client2", PiecewiseArrivals(((0.0, 1.0), (duration / 2, 4.0))), PointMass(100), PointMass(400)),
    ]


def generate_scenario(
    preset: ScenarioName | str,
    seed: int,
    duration: float = DEFAULT_DURATION_S,
    *,
    weights: Mapping[str, float] | None = None,
    tag_noise: float = DEFAULT_TAG_NOISE,
) -> Trace:
    """Generate the trace of a scenario preset. Same arguments, same trace."""
    clients = scenario_clients(preset, duration)
    if weights:
        clients = [dataclasses.replace(spec, weight=weights.get(spec.client_id, spec.weight)) for spec in clients]
    return generate_trace(clients, seed, duration, tag_noise)


def generate_dynamic_increase(seed: int, duration: float = DEFAULT_DURATION_S) -> Trace:
    """Client 2 quadruples its rate (1 -> 4 req/s) halfway through the run."""
    return generate_scenario(ScenarioName.dynamic_increase, seed, duration)


def generate_length_corpus(seed: int, size: int, tag_noise: float = DEFAULT_TAG_NOISE) -> Trace:
    """A predictor training corpus: log-normal output lengths, uninformative input lengths, noisy tags."""
    spec = ClientSpec(
        "corpus",
        ReplayedArrivals(()),
        LogNormalLengths(CORPUS_INPUT_LOG_MEAN, CORPUS_INPUT_LOG_SIGMA),
        LogNormalLengths(CORPUS_OUTPUT_LOG_MEAN, CORPUS_OUTPUT_LOG_SIGMA),
    )
    inputs = spec.input_lengths.sample(client_rng(seed, spec.client_id, STREAM_INPUT), size)
    outputs = spec.output_lengths.sample(client_rng(seed, spec.client_id, STREAM_OUTPUT), size)
    tag_rng = client_rng(seed, spec.client_id, STREAM_TAGS)
    requests = tuple(
        Request(index, spec.client_id, 0.0, tokens_in, tokens_out, noisy_category_tag(tokens_out, tag_rng, tag_noise))
        for index, (tokens_in, tokens_out) in enumerate(zip(inputs, outputs))
    )
    return Trace(requests, (spec,), 0.0)


def _parse_row(row: list[str], line: int) -> tuple[str, float, int, int, str | None]:
    if len(row) != len(TRACE_HEADER):
        msg = f"expected {len(TRACE_HEADER)} columns, got {len(row)}"
        raise TraceError(msg, line)
    client_id, raw_time, raw_in, raw_out, raw_tag = (value.strip() for value in row)
    if not client_id:
        msg = "client_id is empty"
        raise TraceError(msg, line)
    try:
        arrival = float(raw_time)
        tokens_in = int(raw_in)
        tokens_out = int(raw_out)
    except ValueError as err:
        raise TraceError(str(err), line) from err
    if not math.isfinite(arrival) or arrival < 0:
        msg = f"arrival_time_s must be a non-negative number, got {raw_time!r}"
        raise TraceError(msg, line)
    if tokens_in < 1 or tokens_out < 1:
        msg = f"token counts must be positive, got input_tokens={tokens_in} output_tokens={tokens_out}"
        raise TraceError(msg, line)
    return client_id, arrival, tokens_in, tokens_out, raw_tag or None


def load_trace(path: Path | str, weights: Mapping[str, float] | None = None) -> Trace:
    """Replay a trace CSV file. Unsorted rows are sorted by arrival time and a warning is recorded."""
    path = Path(path)
    if not path.is_file():
        msg = f"Trace file not found: {path}"
        raise TraceError(msg)

    with path.open(encoding="utf-8", newline="") as file:
        reader = csv.reader(file)
        header = next(reader, None)
        if header is None or tuple(column.strip() for column in header) != TRACE_HEADER:
            msg = f"expected header {','.join(TRACE_HEADER)}, got {','.join(header or [])!r}"
            raise TraceError(msg, 1)
        rows = [_parse_row(row, line) for line, row in enumerate(reader, start=2) if any(cell.strip() for cell in row)]

    warnings: list[str] = []
    arrivals = [row[1] for row in rows]
    if any(later < earlier for earlier, later in zip(arrivals, arrivals[1:])):
        rows.sort(key=lambda row: row[1])
        message = f"{path.name}: arrivals were not sorted; {len(rows)} rows sorted by arrival_time_s"
        logger.warning(message)
        warnings.append(message)

    requests = tuple(
        Request(index, client_id, arrival, tokens_in, tokens_out, tag)
        for index, (client_id, arrival, tokens_in, tokens_out, tag) in enumerate(rows)
    )
    client_ids = list(unique_everseen(req.client_id for req in requests))
    clients = tuple(_replayed_client(client_id, requests, weights or {}) for client_id in client_ids)
    duration = max(arrivals, default=0.0)
    return Trace(requests, clients, duration, tuple(warnings))


def _replayed_client(client_id: str, requests: Sequence[Request], weights: Mapping[str, float]) -> ClientSpec:
    own = [req for req in requests if req.client_id == client_id]
    return ClientSpec(
        client_id,
        ReplayedArrivals(tuple(req.arrival_time for req in own)),
        EmpiricalLengths(tuple(req.input_tokens for req in own)),
        EmpiricalLengths(tuple(req.true_output_tokens for req in own)),
        weights.get(client_id, 1.0),
    )
