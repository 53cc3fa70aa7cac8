"""Parametric cost and memory model of one GPU serving engine with continuous batching."""

from __future__ import annotations

import csv
import io
import math
from bisect import bisect_left
from dataclasses import dataclass, field, fields, replace
from typing import TYPE_CHECKING

import humanize

from fairbatch.constants import (
    DEFAULT_BUCKET_BOUNDS,
    DEFAULT_DECODE_BASE_MS,
    DEFAULT_DECODE_PER_CTX_TOKEN_MS,
    DEFAULT_MAX_BATCH,
    DEFAULT_MEM_CAPACITY_BYTES,
    DEFAULT_MEM_PER_TOKEN_BYTES,
    DEFAULT_PREFILL_LINEAR_MS,
    DEFAULT_PREFILL_QUAD_MS,
    DEFAULT_REFERENCE_INPUT_TOKENS,
    DEFAULT_REFRESH_OVERHEAD_MS,
)
from fairbatch.errors import CapacityError, ConfigError, ConsistencyError

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from fairbatch.workload import Request

PROFILE_HEADER = ("bucket_upper", "latency_ms", "gpu_util", "tps")


@dataclass(frozen=True)
class PerfParams:
    """Cost model coefficients. Times are in milliseconds, memory in bytes."""

    prefill_linear: float = DEFAULT_PREFILL_LINEAR_MS
    prefill_quad: float = DEFAULT_PREFILL_QUAD_MS
    decode_base: float = DEFAULT_DECODE_BASE_MS
    decode_per_ctx_token: float = DEFAULT_DECODE_PER_CTX_TOKEN_MS
    refresh_overhead: float = DEFAULT_REFRESH_OVERHEAD_MS
    mem_per_token: int = DEFAULT_MEM_PER_TOKEN_BYTES
    mem_capacity: int = DEFAULT_MEM_CAPACITY_BYTES
    max_batch: int = DEFAULT_MAX_BATCH

    def __post_init__(self) -> None:
        for param in fields(self):
            value = getattr(self, param.name)
            if not value > 0:
                msg = f"PerfParams.{param.name} must be > 0, got {value}"
                raise ConfigError(msg)

    @property
    def capacity_tokens(self) -> int:
        """How many KV-cache tokens fit in GPU memory."""
        return self.mem_capacity // self.mem_per_token


@dataclass
class BatchMember:
    """A running request inside the batch."""

    request_id: int
    input_tokens: int
    predicted_out: int
    generated: int = 0

    @property
    def resident_tokens(self) -> int:
        """KV-cache tokens currently held."""
        return self.input_tokens + self.generated

    @property
    def reserved_tokens(self) -> int:
        """KV-cache tokens reserved at admission, grown if the prediction was too short."""
        return self.input_tokens + max(self.predicted_out, self.generated)


@dataclass
class BatchState:
    """The running set of a continuous batch."""

    members: dict[int, BatchMember] = field(default_factory=dict)
    composition_changed: bool = False

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, request_id: object) -> bool:
        return request_id in self.members

    @property
    def resident_kv_tokens(self) -> int:
        """Sum of input and generated tokens over all members."""
        return sum(member.resident_tokens for member in self.members.values())

    @property
    def reserved_kv_tokens(self) -> int:
        """Sum of the per-member reservations used by :func:`can_fit`."""
        return sum(member.reserved_tokens for member in self.members.values())

    def admit(self, request_id: int, input_tokens: int, predicted_out: int) -> BatchMember:
        """Add a request with nothing generated yet."""
        if request_id in self.members:
            msg = f"Request {request_id} is already in the batch"
            raise ConsistencyError(msg)
        member = BatchMember(request_id, input_tokens, predicted_out)
        self.members[request_id] = member
        self.composition_changed = True
        return member

    def release(self, request_id: int) -> BatchMember:
        """Remove a finished request."""
        try:
            member = self.members.pop(request_id)
        except KeyError as err:
            msg = f"Request {request_id} is not in the batch"
            raise ConsistencyError(msg) from err
        self.composition_changed = True
        return member


def iteration_time(batch: BatchState, new_prefill_tokens: int, params: PerfParams) -> float:
    """Milliseconds taken by one engine iteration.

    Prefill cost is superlinear in the newly admitted input tokens; decode cost grows with the resident KV cache;
    any change of batch composition since the previous iteration pays the refresh overhead.
    """
    prefill = params.prefill_linear * new_prefill_tokens + params.prefill_quad * new_prefill_tokens**2
    decode = params.decode_base + params.decode_per_ctx_token * batch.resident_kv_tokens
    overhead = params.refresh_overhead if batch.composition_changed else 0.0
    return prefill + decode + overhead


def can_fit(batch: BatchState, candidate: Request, predicted_out: int, params: PerfParams) -> bool:
    """Return True if the batch has a free slot and memory for the candidate's predicted footprint."""
    if len(batch) + 1 > params.max_batch:
        return False
    needed = batch.reserved_kv_tokens + candidate.input_tokens + predicted_out
    return needed * params.mem_per_token <= params.mem_capacity


def check_memory(batch: BatchState, params: PerfParams) -> None:
    """Raise :class:`CapacityError` if resident KV memory exceeds the GPU capacity."""
    used = batch.resident_kv_tokens * params.mem_per_token
    if used > params.mem_capacity:
        msg = (
            f"KV cache needs {humanize.naturalsize(used, binary=True)} for {len(batch)} requests,"
            f" capacity is {humanize.naturalsize(params.mem_capacity, binary=True)}"
        )
        raise CapacityError(msg)


@dataclass(frozen=True)
class SingleRun:
    """Outcome of serving one request alone."""

    latency_ms: float
    busy_ms: float
    overhead_ms: float
    tokens: int

    @property
    def gpu_util(self) -> float:
        """Share of the run spent computing rather than refreshing the batch."""
        return self.busy_ms / (self.busy_ms + self.overhead_ms)

    @property
    def tps(self) -> float:
        """Input plus output tokens per wall-clock second."""
        return self.tokens / (self.latency_ms / 1000)


def simulate_single_request(params: PerfParams, input_tokens: int, output_tokens: int) -> SingleRun:
    """Serve one request on an idle engine: a prefill iteration, then one decode iteration per further token."""
    prefill = params.prefill_linear * input_tokens + params.prefill_quad * input_tokens**2
    # Iteration k (1-based) sees input_tokens + k - 1 resident tokens
    decode = output_tokens * params.decode_base + params.decode_per_ctx_token * (
        output_tokens * input_tokens + output_tokens * (output_tokens - 1) / 2
    )
    busy = prefill + decode
    return SingleRun(busy + params.refresh_overhead, busy, params.refresh_overhead, input_tokens + output_tokens)


@dataclass(frozen=True)
class ProfileEntry:
    """Expected metrics of requests whose output length falls in ``(previous bucket, bucket_upper]``."""

    bucket_upper: int
    latency_ms: float
    gpu_util: float
    tps: float


@dataclass(frozen=True)
class GpuProfile:
    """Lookup from output-token buckets to expected latency, utilization and throughput."""

    entries: tuple[ProfileEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            msg = "A GPU profile needs at least one bucket"
            raise ValueError(msg)
        uppers = self.bucket_uppers
        if any(later <= earlier for earlier, later in zip(uppers, uppers[1:])):
            msg = f"Profile buckets must be strictly increasing, got {uppers}"
            raise ValueError(msg)
        for entry in self.entries:
            if not 0 <= entry.gpu_util <= 1 or entry.tps <= 0 or entry.latency_ms <= 0:
                msg = f"Invalid profile entry {entry}"
                raise ValueError(msg)

    @property
    def bucket_uppers(self) -> list[int]:
        """Upper bound of every bucket."""
        return [entry.bucket_upper for entry in self.entries]

    def bucket_index(self, output_tokens: int) -> int:
        """Index of the bucket holding ``output_tokens``, clamped to the last bucket."""
        return min(bisect_left(self.bucket_uppers, output_tokens), len(self.entries) - 1)

    def entry_for(self, output_tokens: int) -> ProfileEntry:
        """Entry of the bucket holding ``output_tokens``."""
        return self.entries[self.bucket_index(output_tokens)]

    def with_entry(self, index: int, entry: ProfileEntry) -> GpuProfile:
        """A copy with one bucket replaced."""
        entries = list(self.entries)
        entries[index] = entry
        return replace(self, entries=tuple(entries))

    def to_csv_text(self) -> str:
        """Render as ``bucket_upper,latency_ms,gpu_util,tps``."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(PROFILE_HEADER)
        for entry in self.entries:
            writer.writerow([entry.bucket_upper, repr(entry.latency_ms), repr(entry.gpu_util), repr(entry.tps)])
        return buffer.getvalue()

    def to_csv(self, path: Path) -> None:
        """Write the profile CSV."""
        path.write_text(self.to_csv_text(), encoding="utf-8")

    @classmethod
    def from_csv(cls, path: Path) -> GpuProfile:
        """Read a profile written by :meth:`to_csv`; ``#`` comment lines are skipped."""
        with path.open(encoding="utf-8", newline="") as file:
            lines = [line for line in file if not line.startswith("#")]
        reader = csv.DictReader(lines)
        try:
            entries = tuple(
                ProfileEntry(
                    int(row["bucket_upper"]),
                    float(row["latency_ms"]),
                    float(row["gpu_util"]),
                    float(row["tps"]),
                )
                for row in reader
            )
        except (KeyError, TypeError, ValueError) as err:
            msg = f"{path}: not a GPU profile CSV ({err})"
            raise ConfigError(msg) from err
        return cls(entries)


def bucket_midpoints(bucket_bounds: Sequence[int]) -> list[int]:
    """Representative output length of each bucket ``(previous, upper]``, the first bucket starting at 0."""
    previous = [0, *bucket_bounds[:-1]]
    return [math.ceil((low + high) / 2) for low, high in zip(previous, bucket_bounds)]


def build_profile(
    params: PerfParams,
    bucket_bounds: Sequence[int] = DEFAULT_BUCKET_BOUNDS,
    reference_input_tokens: int = DEFAULT_REFERENCE_INPUT_TOKENS,
) -> GpuProfile:
    """Offline profile: serve one request per bucket midpoint alone and record what was observed."""
    bounds = list(bucket_bounds)
    if not bounds or bounds[0] < 1 or any(later <= earlier for earlier, later in zip(bounds, bounds[1:])):
        msg = f"Bucket bounds must be positive and strictly increasing, got {bounds}"
        raise ConfigError(msg)
    if reference_input_tokens < 1:
        msg = f"reference_input_tokens must be >= 1, got {reference_input_tokens}"
        raise ConfigError(msg)

    entries = []
    for upper, midpoint in zip(bounds, bucket_midpoints(bounds)):
        run = simulate_single_request(params, reference_input_tokens, midpoint)
        entries.append(ProfileEntry(upper, run.latency_ms, run.gpu_util, run.tps))
    return GpuProfile(tuple(entries))
