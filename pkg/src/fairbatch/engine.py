"""Discrete-event simulation of one continuously batched GPU serving a multi-tenant trace.

Events are kept in a heap ordered by ``(time, kind, sequence)``. At the start of every iteration the policy admits
head requests while they fit; the iteration then runs for :func:`~fairbatch.gpu_model.iteration_time` and yields
one token for every member whose KV cache can still grow. A new request's first token appears at the end of its
admission (prefill) iteration. Members that would overflow GPU memory stall until a completion frees space.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import TYPE_CHECKING, Any

from fairbatch.constants import DEFAULT_MAX_SIM_TIME_S, DEFAULT_REPORT_WINDOW_S
from fairbatch.errors import ConfigError, ConsistencyError
from fairbatch.gpu_model import BatchState, PerfParams, can_fit, check_memory, iteration_time
from fairbatch.predictor import Observation
from fairbatch.scheduler import Actuals, Backlog, ClientSnapshot, QueuedRequest, ScheduleContext

if TYPE_CHECKING:
    from collections.abc import Iterator
    from pathlib import Path

    from fairbatch.gpu_model import BatchMember
    from fairbatch.predictor import PredictionService
    from fairbatch.scheduler import SchedulingPolicy
    from fairbatch.workload import Request, Trace

logger = logging.getLogger(__name__)


class EventKind(IntEnum):
    """Simulator event kinds; at equal times lower values are processed first."""

    ARRIVAL = 0
    PREDICTION_READY = 1
    REQUEST_COMPLETE = 2
    ITERATION_COMPLETE = 3
    WINDOW_TICK = 4


class LogEventType(str, Enum):
    """Request lifecycle events recorded in the :class:`EventLog`."""

    arrived = "arrived"
    admitted = "admitted"
    first_token = "first_token"
    completed = "completed"
    rejected = "rejected"


@dataclass(frozen=True)
class EngineConfig:
    """Engine knobs; the policy and the predictor are passed to :func:`run` separately."""

    perf: PerfParams = field(default_factory=PerfParams)
    report_window: float = DEFAULT_REPORT_WINDOW_S
    max_sim_time: float = DEFAULT_MAX_SIM_TIME_S
    backfill: bool = False
    prediction_overhead_ms: float = 0.0

    def __post_init__(self) -> None:
        if not self.report_window > 0:
            msg = f"report_window must be > 0, got {self.report_window}"
            raise ConfigError(msg)
        if not self.max_sim_time > 0:
            msg = f"max_sim_time must be > 0, got {self.max_sim_time}"
            raise ConfigError(msg)
        if self.prediction_overhead_ms < 0:
            msg = f"prediction_overhead_ms must be >= 0, got {self.prediction_overhead_ms}"
            raise ConfigError(msg)


@dataclass(frozen=True)
class LogEvent:
    """One line of the event log."""

    time: float
    request_id: int
    client_id: str
    event: LogEventType
    payload: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        """Compact, key-sorted JSON."""
        record = {
            "time": self.time,
            "request_id": self.request_id,
            "client_id": self.client_id,
            "event": self.event.value,
            "payload": self.payload,
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":"))


@dataclass
class EventLog:
    """Append-only request lifecycle log."""

    events: list[LogEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[LogEvent]:
        return iter(self.events)

    def append(self, event: LogEvent) -> None:
        """Record an event."""
        self.events.append(event)

    def of_type(self, kind: LogEventType) -> list[LogEvent]:
        """Events of one type, in log order."""
        return [event for event in self.events if event.event == kind]

    def for_request(self, request_id: int) -> dict[LogEventType, LogEvent]:
        """Lifecycle events of one request, keyed by type."""
        return {event.event: event for event in self.events if event.request_id == request_id}

    def to_jsonl(self) -> str:
        """Newline-delimited JSON, one event per line."""
        return "".join(event.to_json() + "\n" for event in self.events)

    def write(self, path: Path) -> None:
        """Write :meth:`to_jsonl` to a file."""
        path.write_text(self.to_jsonl(), encoding="utf-8")


@dataclass(frozen=True)
class CounterSample:
    """Fairness counters of one client at a window boundary."""

    time: float
    client_id: str
    ufc: float
    rfc: float
    hf: float
    service_cum: float


@dataclass(frozen=True)
class Delivery:
    """Tokens delivered to one client at one instant."""

    time: float
    client_id: str
    input_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class UtilizationSample:
    """GPU activity in the window ending at ``time``."""

    time: float
    gpu_util: float
    busy_ms: float
    overhead_ms: float


@dataclass
class SimResult:
    """Everything a run produced."""

    trace: Trace
    log: EventLog
    counters: list[CounterSample]
    utilization: list[UtilizationSample]
    final_clients: list[ClientSnapshot]
    deliveries: list[Delivery]
    duration: float
    busy_ms: float
    overhead_ms: float
    rejected: int

    @property
    def weights(self) -> dict[str, float]:
        """Priority weight per client."""
        return self.trace.weights


@dataclass
class _Running:
    item: QueuedRequest
    admitted_at: float
    busy_ms: float = 0.0
    overhead_ms: float = 0.0

    @property
    def residency_util(self) -> float:
        total = self.busy_ms + self.overhead_ms
        return self.busy_ms / total if total > 0 else 1.0


def measure_actuals(req: Request, log: EventLog) -> Actuals:
    """Metrics of a completed request, as recorded in the log."""
    events = log.for_request(req.id)
    try:
        admitted = events[LogEventType.admitted].time
        completed = events[LogEventType.completed]
    except KeyError as err:
        msg = f"Request {req.id} has not completed"
        raise ConsistencyError(msg) from err
    out = int(completed.payload["output_tokens"])
    service = completed.time - admitted
    return Actuals(
        output_tokens=out,
        latency_s=completed.time - req.arrival_time,
        service_s=service,
        gpu_util=float(completed.payload["gpu_util"]),
        tps=(req.input_tokens + out) / service,
    )


class Engine:
    """Runs one trace under one policy and one prediction service."""

    def __init__(
        self,
        trace: Trace,
        policy: SchedulingPolicy,
        service: PredictionService,
        config: EngineConfig,
    ) -> None:
        self.trace = trace
        self.policy = policy
        self.service = service
        self.config = config
        self.perf = config.perf

        self.now = 0.0
        self.end_time = 0.0
        self.log = EventLog()
        self.backlog = Backlog()
        self.batch = BatchState()
        self.running: dict[int, _Running] = {}
        self.iterating = False
        self.rejected = 0
        self.counters: list[CounterSample] = []
        self.utilization: list[UtilizationSample] = []
        self._heap: list[tuple[float, EventKind, int, Any]] = []
        self._sequence = 0
        self._windows: dict[int, list[float]] = {}
        self._last_tick = 0.0
        self._delivered: dict[tuple[float, str], list[int]] = {}
        self._stall_warned = False

    def _push(self, time: float, kind: EventKind, payload: Any = None) -> None:  # noqa: ANN401
        heapq.heappush(self._heap, (time, kind, self._sequence, payload))
        self._sequence += 1

    def _record(self, time: float, req: Request, kind: LogEventType, **payload: Any) -> None:  # noqa: ANN401
        self.log.append(LogEvent(time, req.id, req.client_id, kind, payload))

    def run(self) -> SimResult:
        """Process events until none are left or ``max_sim_time`` is reached."""
        for req in self.trace.requests:
            self._push(req.arrival_time, EventKind.ARRIVAL, req)
        if self._heap:
            self._push(self.config.report_window, EventKind.WINDOW_TICK, 1)

        while self._heap:
            time, kind, _, payload = heapq.heappop(self._heap)
            if time > self.config.max_sim_time:
                logger.info("Stopped at %ss with %d requests in flight", self.config.max_sim_time, len(self.running))
                self.end_time = self.config.max_sim_time
                break
            self.now = time
            if kind == EventKind.WINDOW_TICK:
                self._on_tick(payload)
                continue
            self.end_time = time
            if kind == EventKind.ARRIVAL:
                self._on_arrival(payload)
            elif kind == EventKind.PREDICTION_READY:
                self._on_prediction_ready(payload)
            elif kind == EventKind.REQUEST_COMPLETE:
                self._on_request_complete(payload)
            else:
                self._on_iteration_complete(payload)

        if self.end_time > self._last_tick:
            self._sample(self.end_time, math.floor(self.end_time / self.config.report_window))
        return SimResult(
            trace=self.trace,
            log=self.log,
            counters=self.counters,
            utilization=self.utilization,
            final_clients=self.policy.snapshot(),
            deliveries=[
                Delivery(time, client_id, input_tokens, output_tokens)
                for (time, client_id), (input_tokens, output_tokens) in self._delivered.items()
            ],
            duration=self.end_time,
            busy_ms=sum(slot[0] for slot in self._windows.values()),
            overhead_ms=sum(slot[1] for slot in self._windows.values()),
            rejected=self.rejected,
        )

    def _on_arrival(self, req: Request) -> None:
        self._record(self.now, req, LogEventType.arrived, input_tokens=req.input_tokens)
        if self.config.prediction_overhead_ms > 0:
            self._push(self.now + self.config.prediction_overhead_ms / 1000, EventKind.PREDICTION_READY, req)
        else:
            self._on_prediction_ready(req)

    def _on_prediction_ready(self, req: Request) -> None:
        prediction = self.service.predict(req)
        worst_case = max(prediction.predicted_output_tokens, req.true_output_tokens)
        if not can_fit(BatchState(), req, worst_case, self.perf):
            self.rejected += 1
            needed = req.input_tokens + worst_case
            logger.warning("Request %s needs %d KV tokens alone and can never fit; rejected", req.id, needed)
            self._record(self.now, req, LogEventType.rejected, reason="capacity", kv_tokens=needed)
            return

        if self.backlog.push(QueuedRequest(req, prediction)):
            self.policy.on_backlogged(req.client_id)
        if not self.iterating:
            # Start after every arrival sharing this instant has been queued
            self.iterating = True
            self._push(self.now, EventKind.ITERATION_COMPLETE, ())

    def _admit(self) -> list[int]:
        admitted: list[int] = []
        excluded: set[str] = set()
        while True:
            choice = self.policy.select_next(self.backlog, self.now, frozenset(excluded))
            if choice is None:
                return admitted
            client_id, item = choice
            req, prediction = item.request, item.prediction
            if not can_fit(self.batch, req, prediction.predicted_output_tokens, self.perf):
                if not self.config.backfill:
                    return admitted
                excluded.add(client_id)
                continue

            self.backlog.pop(client_id)
            if not self.backlog.is_backlogged(client_id):
                self.policy.on_idle(client_id)
            self.batch.admit(req.id, req.input_tokens, prediction.predicted_output_tokens)
            ctx = ScheduleContext.at(self.now, req, prediction)
            self.policy.on_admit(item, ctx)
            self.running[req.id] = _Running(item, self.now)
            self._record(
                self.now,
                req,
                LogEventType.admitted,
                predicted_output_tokens=prediction.predicted_output_tokens,
                wait_s=ctx.wait_time,
            )
            admitted.append(req.id)

    def _start_iteration(self) -> None:
        admitted = self._admit()
        if not self.batch.members:
            self.iterating = False
            return
        advancing = self._advancing()
        if not advancing:
            # Nothing can complete without preemption; the next arrival retries
            logger.warning("KV cache full at %.3fs with %d requests stalled", self.now, len(self.batch))
            self.iterating = False
            return

        prefill = sum(self.running[request_id].item.request.input_tokens for request_id in admitted)
        overhead_ms = self.perf.refresh_overhead if self.batch.composition_changed else 0.0
        duration_ms = iteration_time(self.batch, prefill, self.perf)
        busy_ms = duration_ms - overhead_ms
        end = self.now + duration_ms / 1000
        self._account(self.now, self.now + overhead_ms / 1000, 1)
        self._account(self.now + overhead_ms / 1000, end, 0)
        self.batch.composition_changed = False

        for running in (self.running[request_id] for request_id in self.batch.members):
            running.busy_ms += busy_ms
            running.overhead_ms += overhead_ms
        for request_id in advancing:
            if self.batch.members[request_id].generated + 1 == self.running[request_id].item.request.true_output_tokens:
                self._push(end, EventKind.REQUEST_COMPLETE, request_id)
        self._push(end, EventKind.ITERATION_COMPLETE, advancing)

    def _advancing(self) -> tuple[int, ...]:
        """Members that decode this iteration.

        Scanning in admission order, a member decodes when the rest of its output fits in the memory left over by
        the older decoding members; the others stall with their cache kept. If no member can run to completion,
        the oldest members decode while their next token fits.
        """
        members = tuple(self.batch.members)
        free = self.perf.capacity_tokens - self.batch.resident_kv_tokens
        advancing = []
        for request_id in members:
            target = self.running[request_id].item.request.true_output_tokens
            remaining = target - self.batch.members[request_id].generated
            if remaining <= free:
                advancing.append(request_id)
                free -= remaining
        if not advancing:
            room = max(0, self.perf.capacity_tokens - self.batch.resident_kv_tokens)
            advancing = list(members[:room])
        if len(advancing) < len(members):
            stalled = len(members) - len(advancing)
            logger.debug("KV cache short at %.6fs: %d of %d requests stalled", self.now, stalled, len(members))
            if not self._stall_warned:
                self._stall_warned = True
                logger.warning("Running requests outgrew the KV cache at %.3fs; stalling the youngest", self.now)
        return tuple(advancing)

    def _on_iteration_complete(self, advancing: tuple[int, ...]) -> None:
        for request_id in advancing:
            member = self.batch.members.get(request_id)
            if member is None:
                continue
            self._deliver(member, self.running[request_id])
        check_memory(self.batch, self.perf)
        self._start_iteration()

    def _on_request_complete(self, request_id: int) -> None:
        try:
            running = self.running.pop(request_id)
        except KeyError as err:
            msg = f"Request {request_id} completed twice or was never admitted"
            raise ConsistencyError(msg) from err
        member = self.batch.release(request_id)
        req = running.item.request
        self._deliver(member, running)

        service_s = self.now - running.admitted_at
        actuals = Actuals(
            output_tokens=member.generated,
            latency_s=self.now - req.arrival_time,
            service_s=service_s,
            gpu_util=running.residency_util,
            tps=(req.input_tokens + member.generated) / service_s,
        )
        self._record(
            self.now,
            req,
            LogEventType.completed,
            output_tokens=actuals.output_tokens,
            input_tokens=req.input_tokens,
            gpu_util=actuals.gpu_util,
            tps=actuals.tps,
        )
        self.policy.on_complete(running.item, actuals)
        self.service.observe(Observation(actuals.output_tokens, service_s * 1000, actuals.gpu_util, actuals.tps))

    def _deliver(self, member: BatchMember, running: _Running) -> None:
        """One more output token; the input counts as served together with the first one."""
        req = running.item.request
        member.generated += 1
        input_tokens = req.input_tokens if member.generated == 1 else 0
        if member.generated == 1:
            self._record(self.now, req, LogEventType.first_token)
        delivered = self._delivered.setdefault((self.now, req.client_id), [0, 0])
        delivered[0] += input_tokens
        delivered[1] += 1
        self.policy.on_tokens(running.item, 1)
        self.policy.record_service(req.client_id, input_tokens, 1)

    def _account(self, start: float, end: float, slot: int) -> None:
        """Spread ``[start, end)`` of busy (slot 0) or overhead (slot 1) time over the report windows."""
        window = self.config.report_window
        end = min(end, self.config.max_sim_time)
        index = math.floor(start / window)
        while start < end:
            stop = min(end, (index + 1) * window)
            if stop > start:
                self._windows.setdefault(index, [0.0, 0.0])[slot] += (stop - start) * 1000
            start = max(start, stop)
            index += 1

    def _on_tick(self, tick: int) -> None:
        self._sample(self.now, tick - 1)
        if self._heap:
            self._push((tick + 1) * self.config.report_window, EventKind.WINDOW_TICK, tick + 1)

    def _sample(self, time: float, index: int) -> None:
        """Counters at ``time`` and GPU activity of window ``index`` up to ``time``."""
        window = self.config.report_window
        busy, overhead = self._windows.get(index, [0.0, 0.0])
        length_ms = (time - index * window) * 1000
        util = busy / length_ms if length_ms > 0 else 0.0
        self.utilization.append(UtilizationSample(time, min(1.0, util), busy, overhead))
        self.counters.extend(
            CounterSample(time, snap.client_id, snap.ufc, snap.rfc, snap.hf, snap.service_cum)
            for snap in self.policy.snapshot()
        )
        self._last_tick = time


def run(
    trace: Trace,
    policy: SchedulingPolicy,
    service: PredictionService,
    config: EngineConfig | None = None,
) -> SimResult:
    """Simulate ``trace``; identical inputs give an identical event log."""
    return Engine(trace, policy, service, config or EngineConfig()).run()
