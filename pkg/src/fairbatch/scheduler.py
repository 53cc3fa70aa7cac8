"""Scheduling policies: first come first served, virtual token counters and Equinox holistic fairness.

A policy owns one :class:`ClientState` per client and is driven by the engine through ``on_backlogged``,
``select_next``, ``on_admit``, ``on_tokens``, ``record_service`` and ``on_complete``.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, ClassVar

from fairbatch.constants import DEFAULT_ALPHA, DEFAULT_DELTA, DEFAULT_INPUT_WEIGHT, DEFAULT_OUTPUT_WEIGHT
from fairbatch.errors import ConfigError, ConsistencyError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

    from fairbatch.predictor import PredictionRecord
    from fairbatch.workload import Request

logger = logging.getLogger(__name__)


class PolicyName(str, Enum):
    """Available scheduling policies."""

    fcfs = "fcfs"
    vtc = "vtc"
    equinox = "equinox"


class NormMode(str, Enum):
    """How UFC and RFC are normalized before they are combined."""

    max_over_clients = "max_over_clients"
    none = "none"


class VtcCharge(str, Enum):
    """When the virtual token counter is charged for output tokens."""

    incremental = "incremental"
    predicted = "predicted"


@dataclass(frozen=True)
class EquinoxParams:
    """Weights of the holistic fairness score and of the user-fairness counter."""

    alpha: float = DEFAULT_ALPHA
    delta: float = DEFAULT_DELTA
    output_weight: float = DEFAULT_OUTPUT_WEIGHT
    norm_mode: NormMode = NormMode.max_over_clients

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            msg = f"alpha must be within [0, 1], got {self.alpha}"
            raise ConfigError(msg)
        if self.delta < 0:
            msg = f"delta must be >= 0, got {self.delta}"
            raise ConfigError(msg)
        if not self.output_weight > 0:
            msg = f"output_weight must be > 0, got {self.output_weight}"
            raise ConfigError(msg)

    @property
    def beta(self) -> float:
        """Weight of the resource-fairness counter."""
        return 1 - self.alpha


@dataclass
class ClientState:
    """Fairness ledger of one client."""

    client_id: str
    weight: float = 1.0
    ufc: float = 0.0
    rfc: float = 0.0
    tokens: float = 0.0
    accumulated_service: float = 0.0
    backlogged: bool = False


@dataclass(frozen=True)
class ScheduleContext:
    """What the scheduler knows about a request when it is admitted."""

    now: float
    wait_time: float
    prediction: PredictionRecord

    def __post_init__(self) -> None:
        if self.wait_time < 0:
            msg = f"wait_time must be >= 0, got {self.wait_time}"
            raise ValueError(msg)

    @classmethod
    def at(cls, now: float, req: Request, prediction: PredictionRecord) -> ScheduleContext:
        """Context of ``req`` admitted at ``now``."""
        return cls(now, max(0.0, now - req.arrival_time), prediction)


@dataclass(frozen=True)
class Actuals:
    """Metrics measured once a request completes."""

    output_tokens: int
    latency_s: float
    service_s: float
    gpu_util: float
    tps: float


@dataclass(frozen=True)
class QueuedRequest:
    """A waiting request and the prediction made when it arrived."""

    request: Request
    prediction: PredictionRecord


@dataclass(frozen=True)
class ClientSnapshot:
    """Counter values of one client at one instant."""

    client_id: str
    ufc: float
    rfc: float
    hf: float
    service_cum: float


def _ufc_value(
    weight: float,
    input_tokens: int,
    output_tokens: float,
    waited_s: float,
    took_s: float,
    params: EquinoxParams,
) -> float:
    return weight * (input_tokens + params.output_weight * output_tokens) / (1 + params.delta * (waited_s + took_s))


def ufc_increment(req: Request, ctx: ScheduleContext, weight: float, params: EquinoxParams) -> float:
    """User-fairness charge: weighted tokens, discounted by how long the request waited and is expected to run."""
    return _ufc_value(
        weight,
        req.input_tokens,
        ctx.prediction.predicted_output_tokens,
        ctx.wait_time,
        ctx.prediction.predicted_latency_ms / 1000,
        params,
    )


def rfc_increment(prediction: PredictionRecord, weight: float) -> float:
    """Resource-fairness charge: expected throughput scaled by expected GPU utilization."""
    return weight * prediction.predicted_tps * prediction.predicted_gpu_util


def holistic_score(client: ClientState, all_clients: Iterable[ClientState], params: EquinoxParams) -> float:
    """Weighted combination of UFC and RFC; normalized by the maxima over backlogged clients by default."""
    if params.norm_mode == NormMode.none:
        return params.alpha * client.ufc + params.beta * client.rfc

    pool = [other for other in all_clients if other.backlogged] or list(all_clients)
    max_ufc = max((other.ufc for other in pool), default=0.0)
    max_rfc = max((other.rfc for other in pool), default=0.0)
    ufc = client.ufc / max_ufc if max_ufc > 0 else 0.0
    rfc = client.rfc / max_rfc if max_rfc > 0 else 0.0
    return params.alpha * ufc + params.beta * rfc


@dataclass
class Backlog:
    """FIFO queue of waiting requests per client."""

    queues: dict[str, deque[QueuedRequest]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(queue) for queue in self.queues.values())

    def push(self, item: QueuedRequest) -> bool:
        """Enqueue; return True if the client's queue was empty before."""
        queue = self.queues.setdefault(item.request.client_id, deque())
        queue.append(item)
        return len(queue) == 1

    def head(self, client_id: str) -> QueuedRequest:
        """Oldest waiting request of a client."""
        return self.queues[client_id][0]

    def pop(self, client_id: str) -> QueuedRequest:
        """Dequeue the head request of a client."""
        return self.queues[client_id].popleft()

    def is_backlogged(self, client_id: str) -> bool:
        """Return True if the client has waiting requests."""
        return bool(self.queues.get(client_id))

    def backlogged_clients(self) -> list[str]:
        """Clients with waiting requests, sorted by id."""
        return sorted(client_id for client_id, queue in self.queues.items() if queue)


class SchedulingPolicy(ABC):
    """Chooses which client's head request joins the batch next."""

    name: ClassVar[PolicyName]
    lifted_counters: ClassVar[tuple[str, ...]] = ()

    def __init__(
        self,
        weights: Mapping[str, float],
        *,
        output_weight: float = DEFAULT_OUTPUT_WEIGHT,
        lift: bool = True,
    ) -> None:
        self.clients = {client_id: ClientState(client_id, weight) for client_id, weight in weights.items()}
        self.output_weight = output_weight
        self.lift = lift

    def state(self, client_id: str) -> ClientState:
        """Ledger of a known client."""
        try:
            return self.clients[client_id]
        except KeyError as err:
            msg = f"Unknown client {client_id!r}"
            raise ConsistencyError(msg) from err

    def on_backlogged(self, client_id: str) -> None:
        """Client went from idle to backlogged: lift its counters up to the backlogged minimum."""
        state = self.state(client_id)
        others = [other for other in self.clients.values() if other.backlogged and other.client_id != client_id]
        if self.lift and others:
            for counter in self.lifted_counters:
                floor = min(getattr(other, counter) for other in others)
                setattr(state, counter, max(getattr(state, counter), floor))
        state.backlogged = True

    def on_idle(self, client_id: str) -> None:
        """Client has no waiting request left."""
        self.state(client_id).backlogged = False

    @abstractmethod
    def score(self, client_id: str) -> float:
        """Lower scores are served first."""

    def select_next(
        self,
        backlog: Backlog,
        now: float,  # noqa: ARG002
        exclude: frozenset[str] = frozenset(),
    ) -> tuple[str, QueuedRequest] | None:
        """Head request of the backlogged client with the lowest score, ties by head arrival then client id."""
        candidates = [client_id for client_id in backlog.backlogged_clients() if client_id not in exclude]
        if not candidates:
            return None
        chosen = min(
            candidates,
            key=lambda client_id: (self.score(client_id), backlog.head(client_id).request.arrival_time, client_id),
        )
        return chosen, backlog.head(chosen)

    def on_admit(self, item: QueuedRequest, ctx: ScheduleContext) -> None:  # noqa: B027
        """The request was placed into the batch."""

    def on_tokens(self, item: QueuedRequest, tokens: int) -> None:  # noqa: B027
        """The request generated ``tokens`` more output tokens."""

    def on_complete(self, item: QueuedRequest, actuals: Actuals) -> None:  # noqa: B027
        """The request finished with the measured ``actuals``."""

    def record_service(self, client_id: str, input_tokens: int, output_tokens: int) -> None:
        """Credit tokens delivered to the client: its input with the first output token, then one per iteration."""
        state = self.state(client_id)
        state.accumulated_service += state.weight * (input_tokens + self.output_weight * output_tokens)

    def snapshot(self) -> list[ClientSnapshot]:
        """Counter values of every client, sorted by client id."""
        return [
            ClientSnapshot(
                state.client_id, state.ufc, state.rfc, self.score(state.client_id), state.accumulated_service,
            )
            for state in sorted(self.clients.values(), key=lambda state: state.client_id)
        ]


class FcfsPolicy(SchedulingPolicy):
    """Globally earliest arrival first."""

    name = PolicyName.fcfs

    def score(self, client_id: str) -> float:  # noqa: ARG002
        """Every client scores the same, so head arrival time decides."""
        return 0.0


class VtcPolicy(SchedulingPolicy):
    """Virtual token counter: the client that received the fewest weighted tokens goes first."""

    name = PolicyName.vtc
    lifted_counters = ("tokens",)

    def __init__(
        self,
        weights: Mapping[str, float],
        *,
        input_weight: float = DEFAULT_INPUT_WEIGHT,
        output_weight: float = DEFAULT_OUTPUT_WEIGHT,
        charge: VtcCharge = VtcCharge.incremental,
        lift: bool = True,
    ) -> None:
        super().__init__(weights, output_weight=output_weight, lift=lift)
        if not input_weight > 0 or not output_weight > 0:
            msg = f"VTC token weights must be > 0, got input={input_weight} output={output_weight}"
            raise ConfigError(msg)
        self.input_weight = input_weight
        self.charge = VtcCharge(charge)
        self._charged_output: dict[int, int] = {}

    def score(self, client_id: str) -> float:
        """Weighted tokens charged so far."""
        return self.state(client_id).tokens

    def on_admit(self, item: QueuedRequest, ctx: ScheduleContext) -> None:
        """Charge the input now; with predicted charging also the predicted output."""
        req = item.request
        state = self.state(req.client_id)
        charged = ctx.prediction.predicted_output_tokens if self.charge == VtcCharge.predicted else 0
        self._charged_output[req.id] = charged
        state.tokens += state.weight * (self.input_weight * req.input_tokens + self.output_weight * charged)

    def on_tokens(self, item: QueuedRequest, tokens: int) -> None:
        """Charge generated output tokens as they are produced."""
        if self.charge == VtcCharge.incremental:
            state = self.state(item.request.client_id)
            state.tokens += state.weight * self.output_weight * tokens

    def on_complete(self, item: QueuedRequest, actuals: Actuals) -> None:
        """Reconcile the predicted output charge with the actual length."""
        super().on_complete(item, actuals)
        req = item.request
        try:
            charged = self._charged_output.pop(req.id)
        except KeyError as err:
            msg = f"Completion of request {req.id} that was never admitted"
            raise ConsistencyError(msg) from err
        if self.charge == VtcCharge.predicted:
            state = self.state(req.client_id)
            correction = state.weight * self.output_weight * (actuals.output_tokens - charged)
            state.tokens = max(0.0, state.tokens + correction)

    def snapshot(self) -> list[ClientSnapshot]:
        """The token counter is reported in the UFC column."""
        return [
            ClientSnapshot(state.client_id, state.tokens, 0.0, state.tokens, state.accumulated_service)
            for state in sorted(self.clients.values(), key=lambda state: state.client_id)
        ]


@dataclass(frozen=True)
class _Contribution:
    ufc: float
    rfc: float
    wait_time: float


class EquinoxPolicy(SchedulingPolicy):
    """Holistic fairness: lowest combination of user-fairness and resource-fairness counters first."""

    name = PolicyName.equinox
    lifted_counters = ("ufc", "rfc")

    def __init__(self, weights: Mapping[str, float], params: EquinoxParams | None = None, *, lift: bool = True) -> None:
        self.params = params or EquinoxParams()
        super().__init__(weights, output_weight=self.params.output_weight, lift=lift)
        self._contributions: dict[int, _Contribution] = {}

    def score(self, client_id: str) -> float:
        """Holistic fairness score of the client."""
        return holistic_score(self.state(client_id), self.clients.values(), self.params)

    def on_admit(self, item: QueuedRequest, ctx: ScheduleContext) -> None:
        """Charge both counters from the prediction."""
        req = item.request
        state = self.state(req.client_id)
        ufc = ufc_increment(req, ctx, state.weight, self.params)
        rfc = rfc_increment(ctx.prediction, state.weight)
        self._contributions[req.id] = _Contribution(ufc, rfc, ctx.wait_time)
        state.ufc += ufc
        state.rfc += rfc

    def on_complete(self, item: QueuedRequest, actuals: Actuals) -> None:
        """Replace the predicted charges with charges computed from the measured metrics."""
        super().on_complete(item, actuals)
        req = item.request
        try:
            charged = self._contributions.pop(req.id)
        except KeyError as err:
            msg = f"Completion of request {req.id} that was never admitted"
            raise ConsistencyError(msg) from err
        state = self.state(req.client_id)
        ufc = _ufc_value(
            state.weight, req.input_tokens, actuals.output_tokens, charged.wait_time, actuals.service_s, self.params,
        )
        rfc = state.weight * actuals.tps * actuals.gpu_util
        state.ufc = self._corrected(state, "ufc", ufc - charged.ufc)
        state.rfc = self._corrected(state, "rfc", rfc - charged.rfc)

    @staticmethod
    def _corrected(state: ClientState, counter: str, correction: float) -> float:
        value = getattr(state, counter) + correction
        if value < 0:
            logger.warning("Client %s: %s correction %.3f clamped at 0", state.client_id, counter, correction)
            return 0.0
        return value


def make_policy(
    name: PolicyName | str,
    weights: Mapping[str, float],
    *,
    equinox: EquinoxParams | None = None,
    input_weight: float = DEFAULT_INPUT_WEIGHT,
    output_weight: float = DEFAULT_OUTPUT_WEIGHT,
    vtc_charge: VtcCharge = VtcCharge.incremental,
    lift: bool = True,
) -> SchedulingPolicy:
    """Build a policy by name."""
    policy = PolicyName(name)
    if policy == PolicyName.fcfs:
        return FcfsPolicy(weights, output_weight=output_weight, lift=lift)
    if policy == PolicyName.vtc:
        return VtcPolicy(weights, input_weight=input_weight, output_weight=output_weight, charge=vtc_charge, lift=lift)
    return EquinoxPolicy(weights, equinox, lift=lift)
