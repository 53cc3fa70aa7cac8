from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import pytest

from fairbatch.constants import MB
from fairbatch.engine import Delivery, EngineConfig, LogEventType, SimResult, measure_actuals, run
from fairbatch.gpu_model import PerfParams, build_profile, simulate_single_request
from fairbatch.predictor import NoisyOraclePredictor, OraclePredictor, OutputPredictor, PredictionService
from fairbatch.scheduler import (
    EquinoxParams,
    EquinoxPolicy,
    FcfsPolicy,
    NormMode,
    SchedulingPolicy,
    VtcCharge,
    VtcPolicy,
)
from fairbatch.workload import (
    ClientSpec,
    ConstantArrivals,
    PointMass,
    ReplayedArrivals,
    Request,
    ScenarioName,
    Trace,
    generate_scenario,
    generate_trace,
)


def oracle_service(params: PerfParams | None = None, predictor: OutputPredictor | None = None) -> PredictionService:
    return PredictionService(predictor or OraclePredictor(), build_profile(params or PerfParams()))


def make_trace(*rows: tuple[str, float, int, int], weights: dict[str, float] | None = None) -> Trace:
    """Trace from ``(client_id, arrival, input_tokens, output_tokens)`` rows sorted by arrival."""
    requests = tuple(Request(index, *row) for index, row in enumerate(rows))
    client_ids = list(dict.fromkeys(req.client_id for req in requests))
    clients = tuple(
        ClientSpec(client_id, ReplayedArrivals(()), PointMass(1), PointMass(1), (weights or {}).get(client_id, 1.0))
        for client_id in client_ids
    )
    return Trace(requests, clients, max(req.arrival_time for req in requests))


def simulate(trace: Trace, policy: SchedulingPolicy, **config: object) -> SimResult:
    params = config.pop("perf", PerfParams())
    return run(trace, policy, oracle_service(params), EngineConfig(perf=params, **config))  # type: ignore[arg-type]


def admitted_order(result: SimResult) -> list[int]:
    return [event.request_id for event in result.log.of_type(LogEventType.admitted)]


@dataclass(frozen=True)
class FixedPredictor:
    """Predicts the same output length for every request."""

    tokens: int

    def predict(self, req: Request) -> int:  # noqa: ARG002
        return self.tokens


def test_empty_trace() -> None:
    trace = Trace((), (), 10.0)
    result = run(trace, FcfsPolicy({}), oracle_service())
    assert len(result.log) == 0
    assert result.busy_ms == 0
    assert result.duration == 0


def test_single_request_matches_the_closed_form() -> None:
    trace = make_trace(("a", 0.0, 100, 3))
    result = simulate(trace, FcfsPolicy(trace.weights))
    events = result.log.for_request(0)
    assert list(events) == [
        LogEventType.arrived,
        LogEventType.admitted,
        LogEventType.first_token,
        LogEventType.completed,
    ]
    expected = simulate_single_request(PerfParams(), 100, 3)
    assert events[LogEventType.completed].time == pytest.approx(expected.latency_ms / 1000)
    # first token at the end of the prefill iteration: 5.01 + 5 + 0.2 + 15 ms
    assert events[LogEventType.first_token].time == pytest.approx(0.02521)
    assert result.busy_ms == pytest.approx(expected.busy_ms)
    assert result.overhead_ms == pytest.approx(15.0)


def test_single_token_request() -> None:
    trace = make_trace(("a", 0.0, 100, 1))
    result = simulate(trace, FcfsPolicy(trace.weights))
    first_tokens = result.log.of_type(LogEventType.first_token)
    assert len(first_tokens) == 1
    actuals = measure_actuals(trace.requests[0], result.log)
    assert actuals.output_tokens == 1
    assert actuals.tps == pytest.approx(101 / 0.02521)


def test_request_alone_reproduces_its_profile_bucket() -> None:
    params = PerfParams()
    profile = build_profile(params)
    trace = make_trace(("a", 0.0, 1, 17))
    result = simulate(trace, FcfsPolicy(trace.weights), perf=params)
    actuals = measure_actuals(trace.requests[0], result.log)
    assert actuals.tps == pytest.approx(profile.entry_for(17).tps, rel=0.01)
    assert actuals.gpu_util == pytest.approx(profile.entry_for(17).gpu_util, rel=0.01)
    assert actuals.latency_s == pytest.approx(actuals.service_s)


def test_lifecycle_order_and_conservation() -> None:
    trace = generate_scenario(ScenarioName.overload, seed=3, duration=5)
    result = simulate(trace, EquinoxPolicy(trace.weights), max_sim_time=1000)
    order = [
        LogEventType.arrived,
        LogEventType.admitted,
        LogEventType.first_token,
        LogEventType.completed,
    ]
    completed = result.log.of_type(LogEventType.completed)
    assert len(completed) == len(trace.requests)
    assert len({event.request_id for event in completed}) == len(completed)
    for req in trace.requests:
        events = result.log.for_request(req.id)
        times = [events[kind].time for kind in order]
        assert times == sorted(times)
        assert events[LogEventType.completed].payload["output_tokens"] == req.true_output_tokens
    produced = sum(event.payload["output_tokens"] for event in completed)
    assert produced == sum(req.true_output_tokens for req in trace.requests)


def test_same_inputs_same_log() -> None:
    trace = generate_scenario(ScenarioName.poisson, seed=9, duration=3)
    first = run(trace, EquinoxPolicy(trace.weights), oracle_service(predictor=NoisyOraclePredictor(33, seed=2)))
    second = run(trace, EquinoxPolicy(trace.weights), oracle_service(predictor=NoisyOraclePredictor(33, seed=2)))
    assert first.log.to_jsonl() == second.log.to_jsonl()
    assert first.counters == second.counters


def test_event_log_lines_are_json() -> None:
    trace = make_trace(("a", 0.0, 10, 2))
    line = simulate(trace, FcfsPolicy(trace.weights)).log.to_jsonl().splitlines()[0]
    assert json.loads(line) == {
        "client_id": "a",
        "event": "arrived",
        "payload": {"input_tokens": 10},
        "request_id": 0,
        "time": 0.0,
    }


def test_request_that_never_fits_is_rejected() -> None:
    params = PerfParams(mem_per_token=MB, mem_capacity=100 * MB)
    trace = make_trace(("a", 0.0, 100, 10), ("a", 0.5, 10, 10))
    result = simulate(trace, FcfsPolicy(trace.weights), perf=params)
    assert result.rejected == 1
    rejected = result.log.of_type(LogEventType.rejected)
    assert [event.request_id for event in rejected] == [0]
    assert rejected[0].payload == {"reason": "capacity", "kv_tokens": 110}
    assert [event.request_id for event in result.log.of_type(LogEventType.completed)] == [1]


@pytest.mark.parametrize(("backfill", "b_before_a"), [(False, False), (True, True)])
def test_backfill_skips_a_head_that_does_not_fit(backfill: bool, b_before_a: bool) -> None:
    params = PerfParams(mem_per_token=MB, mem_capacity=300 * MB)
    trace = make_trace(("a", 0.0, 200, 50), ("a", 0.001, 100, 10), ("b", 0.002, 10, 10))
    result = simulate(trace, FcfsPolicy(trace.weights), perf=params, backfill=backfill)
    order = admitted_order(result)
    assert order[0] == 0
    assert (order.index(2) < order.index(1)) is b_before_a


def test_tokens_are_delivered_as_they_are_generated() -> None:
    trace = make_trace(("a", 0.0, 100, 3))
    result = simulate(trace, FcfsPolicy(trace.weights))
    events = result.log.for_request(0)
    tokens = [(delivery.input_tokens, delivery.output_tokens) for delivery in result.deliveries]
    assert tokens == [(100, 1), (0, 1), (0, 1)]
    assert result.deliveries[0] == Delivery(events[LogEventType.first_token].time, "a", 100, 1)
    assert result.deliveries[-1].time == events[LogEventType.completed].time
    assert result.final_clients[0].service_cum == 100 + 4 * 3


def test_under_predicted_requests_stall_instead_of_overflowing(caplog: pytest.LogCaptureFixture) -> None:
    params = PerfParams(mem_per_token=MB, mem_capacity=300 * MB)
    trace = make_trace(*[("a", 0.0, 10, 100)] * 4)
    service = PredictionService(FixedPredictor(10), build_profile(params))
    with caplog.at_level(logging.WARNING, logger="fairbatch.engine"):
        result = run(trace, FcfsPolicy(trace.weights), service, EngineConfig(perf=params))
    assert "stalling the youngest" in caplog.text
    completed = {event.request_id: event for event in result.log.of_type(LogEventType.completed)}
    assert sorted(completed) == [0, 1, 2, 3]
    assert all(event.payload["output_tokens"] == 100 for event in completed.values())
    # 2 x 110 tokens fit next to the other two prompts, 4 x 110 do not
    assert max(completed[0].time, completed[1].time) < min(completed[2].time, completed[3].time)


def test_prediction_overhead_delays_scheduling() -> None:
    trace = make_trace(("a", 0.0, 10, 2))
    result = simulate(trace, FcfsPolicy(trace.weights), prediction_overhead_ms=100)
    events = result.log.for_request(0)
    assert events[LogEventType.arrived].time == 0
    assert events[LogEventType.admitted].time == pytest.approx(0.1)
    assert events[LogEventType.admitted].payload["wait_s"] == pytest.approx(0.1)


def test_event_log_is_time_ordered_with_prediction_overhead() -> None:
    trace = make_trace(("a", 0.0, 10, 50), ("b", 0.05, 10, 2), ("a", 0.3, 10, 2))
    result = simulate(trace, FcfsPolicy(trace.weights), prediction_overhead_ms=100)
    times = [event.time for event in result.log]
    assert times == sorted(times)
    assert [event.time for event in result.log.of_type(LogEventType.arrived)] == [0.0, 0.05, 0.3]


def test_simulation_stops_at_max_sim_time() -> None:
    trace = make_trace(("a", 0.0, 10, 5000), ("a", 0.1, 10, 5))
    result = simulate(trace, FcfsPolicy(trace.weights), max_sim_time=2.0)
    assert result.duration == 2.0
    assert result.log.of_type(LogEventType.completed)[0].request_id == 1
    assert len(result.log.of_type(LogEventType.completed)) == 1
    # the unfinished request still counts for what it generated
    assert sum(delivery.output_tokens for delivery in result.deliveries) > 5


def test_window_samples() -> None:
    trace = generate_scenario(ScenarioName.balanced, seed=1, duration=3)
    result = simulate(trace, EquinoxPolicy(trace.weights), report_window=0.5)
    times = [sample.time for sample in result.utilization]
    assert times[:4] == pytest.approx([0.5, 1.0, 1.5, 2.0])
    assert all(0 <= sample.gpu_util <= 1 for sample in result.utilization)
    assert max(sample.gpu_util for sample in result.utilization) > 0.5
    assert {sample.client_id for sample in result.counters} == {"client1", "client2"}


def test_flooding_client_starves_others_under_fcfs_only() -> None:
    rows = [("flood", 0.0, 10, 20)] * 40 + [("meek", 0.001, 10, 20)]
    trace = make_trace(*rows)
    params = PerfParams(max_batch=2)
    fcfs = admitted_order(simulate(trace, FcfsPolicy(trace.weights), perf=params))
    vtc = admitted_order(simulate(trace, VtcPolicy(trace.weights), perf=params))
    meek = len(rows) - 1
    assert fcfs.index(meek) == meek
    assert vtc.index(meek) <= 3


def test_identical_clients_receive_equal_service() -> None:
    clients = [ClientSpec(name, ConstantArrivals(4.0), PointMass(100), PointMass(50)) for name in ("c1", "c2")]
    trace = generate_trace(clients, seed=1, duration=10)
    result = simulate(trace, EquinoxPolicy(trace.weights))
    per_time: dict[float, dict[str, float]] = {}
    for sample in result.counters:
        per_time.setdefault(sample.time, {})[sample.client_id] = sample.service_cum
    one_request = 100 + 4 * 50
    assert all(abs(values["c1"] - values["c2"]) <= one_request for values in per_time.values())


def micro_trace(rng: np.random.Generator) -> Trace:
    n_clients = int(rng.integers(2, 5))
    rows = []
    for client in range(n_clients):
        for _ in range(int(rng.integers(1, 6))):
            arrival = float(rng.integers(0, 20)) / 100
            rows.append((f"c{client}", arrival, int(rng.integers(1, 60)), int(rng.integers(1, 30))))
    rows.sort(key=lambda row: row[1])
    weights = {f"c{client}": float(rng.integers(1, 4)) for client in range(n_clients)}
    return make_trace(*rows, weights=weights)


def test_equinox_reduces_to_vtc() -> None:
    """alpha=1, delta=0, no normalization and an oracle make Equinox select exactly like predicted-charge VTC."""
    rng = np.random.default_rng(2024)
    params = PerfParams(max_batch=3)
    config = EngineConfig(perf=params)
    profile = build_profile(params)
    for _ in range(1000):
        trace = micro_trace(rng)
        equinox = EquinoxPolicy(trace.weights, EquinoxParams(alpha=1.0, delta=0.0, norm_mode=NormMode.none))
        vtc = VtcPolicy(trace.weights, input_weight=1.0, output_weight=4.0, charge=VtcCharge.predicted)
        expected = admitted_order(run(trace, vtc, PredictionService(OraclePredictor(), profile), config))
        assert admitted_order(run(trace, equinox, PredictionService(OraclePredictor(), profile), config)) == expected


def test_oracle_counters_match_the_actual_charges() -> None:
    trace = generate_scenario(ScenarioName.poisson, seed=4, duration=3)
    params = EquinoxParams()
    result = simulate(trace, EquinoxPolicy(trace.weights, params, lift=False))
    expected = dict.fromkeys(trace.client_ids, 0.0)
    for req in trace.requests:
        events = result.log.for_request(req.id)
        admitted, completed = events[LogEventType.admitted], events[LogEventType.completed]
        took = completed.time - admitted.time
        charge = req.input_tokens + params.output_weight * req.true_output_tokens
        expected[req.client_id] += trace.weights[req.client_id] * charge / (
            1 + params.delta * (admitted.payload["wait_s"] + took)
        )
    assert {client.client_id: client.ufc for client in result.final_clients} == pytest.approx(expected)
