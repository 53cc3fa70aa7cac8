import logging

import pytest

from fairbatch.errors import ConfigError, ConsistencyError
from fairbatch.predictor import PredictionRecord
from fairbatch.scheduler import (
    Actuals,
    Backlog,
    ClientState,
    EquinoxParams,
    EquinoxPolicy,
    FcfsPolicy,
    NormMode,
    PolicyName,
    QueuedRequest,
    ScheduleContext,
    VtcCharge,
    VtcPolicy,
    holistic_score,
    make_policy,
    rfc_increment,
    ufc_increment,
)
from fairbatch.workload import Request


def prediction(
    output_tokens: int = 400,
    latency_ms: float = 0.0,
    util: float = 0.9,
    tps: float = 1000.0,
) -> PredictionRecord:
    return PredictionRecord(output_tokens, latency_ms, util, tps)


def queued(
    request_id: int,
    client_id: str,
    arrival: float = 0.0,
    tokens_in: int = 100,
    tokens_out: int = 400,
) -> QueuedRequest:
    req = Request(request_id, client_id, arrival, tokens_in, tokens_out)
    return QueuedRequest(req, prediction(tokens_out))


def actuals(output_tokens: int, service_s: float = 0.0, util: float = 0.9, tps: float = 1000.0) -> Actuals:
    return Actuals(output_tokens, service_s, service_s, util, tps)


def test_ufc_increment_without_waiting() -> None:
    req = Request(0, "client1", 0.0, 100, 400)
    assert ufc_increment(req, ScheduleContext(0.0, 0.0, prediction()), 1.0, EquinoxParams()) == pytest.approx(1700)


def test_ufc_increment_discounts_wait_and_predicted_time() -> None:
    req = Request(0, "client1", 0.0, 100, 400)
    ctx = ScheduleContext.at(5.0, req, prediction(latency_ms=5000))
    assert ctx.wait_time == 5.0
    assert ufc_increment(req, ctx, 1.0, EquinoxParams()) == pytest.approx(850)


def test_ufc_increment_ignores_time_without_delta() -> None:
    req = Request(0, "client1", 0.0, 100, 400)
    ctx = ScheduleContext(30.0, 30.0, prediction(latency_ms=9000))
    assert ufc_increment(req, ctx, 2.0, EquinoxParams(delta=0)) == pytest.approx(3400)


def test_rfc_increment() -> None:
    assert rfc_increment(prediction(), 1.0) == pytest.approx(900)
    assert rfc_increment(prediction(util=0.0), 1.0) == 0
    assert rfc_increment(prediction(), 2.0) == pytest.approx(1800)


def test_holistic_score_normalizes_over_backlogged_clients() -> None:
    first = ClientState("c1", ufc=1000, rfc=100, backlogged=True)
    second = ClientState("c2", ufc=500, rfc=100, backlogged=True)
    idle = ClientState("c3", ufc=1_000_000, rfc=1_000_000)
    clients = [first, second, idle]
    params = EquinoxParams(alpha=0.7)
    assert holistic_score(first, clients, params) == pytest.approx(1.0)
    assert holistic_score(second, clients, params) == pytest.approx(0.65)


def test_holistic_score_with_zero_counters() -> None:
    clients = [ClientState("c1", backlogged=True), ClientState("c2", backlogged=True)]
    assert holistic_score(clients[0], clients, EquinoxParams()) == 0


def test_holistic_score_without_normalization() -> None:
    client = ClientState("c1", ufc=10, rfc=20)
    assert holistic_score(client, [client], EquinoxParams(alpha=0.5, norm_mode=NormMode.none)) == pytest.approx(15)


@pytest.mark.parametrize(
    ("alpha", "delta", "output_weight"),
    [(1.2, 0.1, 4), (-0.1, 0.1, 4), (0.5, -1, 4), (0.5, 0.1, 0)],
)
def test_equinox_params_validation(alpha: float, delta: float, output_weight: float) -> None:
    with pytest.raises(ConfigError):
        EquinoxParams(alpha, delta, output_weight)


def test_beta_complements_alpha() -> None:
    assert EquinoxParams(alpha=0.7).beta == pytest.approx(0.3)


def test_backlog_is_fifo_per_client() -> None:
    backlog = Backlog()
    assert backlog.push(queued(0, "b"))
    assert not backlog.push(queued(1, "b"))
    assert backlog.push(queued(2, "a"))
    assert len(backlog) == 3
    assert backlog.backlogged_clients() == ["a", "b"]
    assert backlog.pop("b").request.id == 0
    assert backlog.head("b").request.id == 1
    backlog.pop("a")
    assert not backlog.is_backlogged("a")


def test_empty_backlog_selects_nothing() -> None:
    assert FcfsPolicy({"a": 1.0}).select_next(Backlog(), 0.0) is None


@pytest.mark.parametrize("name", list(PolicyName))
def test_single_backlogged_client_is_served(name: PolicyName) -> None:
    policy = make_policy(name, {"a": 1.0, "b": 1.0})
    backlog = Backlog()
    backlog.push(queued(0, "b"))
    policy.on_backlogged("b")
    assert policy.select_next(backlog, 0.0) == ("b", backlog.head("b"))


def test_fcfs_serves_the_earliest_head() -> None:
    policy = FcfsPolicy({"a": 1.0, "b": 1.0})
    backlog = Backlog()
    backlog.push(queued(0, "b", arrival=1.0))
    backlog.push(queued(1, "a", arrival=2.0))
    selected = policy.select_next(backlog, 3.0)
    assert selected is not None
    assert selected[0] == "b"


def test_ties_break_by_client_id() -> None:
    policy = FcfsPolicy({"a": 1.0, "b": 1.0})
    backlog = Backlog()
    backlog.push(queued(0, "b"))
    backlog.push(queued(1, "a"))
    assert policy.select_next(backlog, 0.0)[0] == "a"  # type: ignore[index]
    assert policy.select_next(backlog, 0.0, exclude=frozenset({"a"}))[0] == "b"  # type: ignore[index]


def test_vtc_charges_input_then_output_per_token() -> None:
    policy = VtcPolicy({"a": 1.0}, input_weight=1, output_weight=2)
    item = queued(0, "a", tokens_in=10, tokens_out=5)
    policy.on_admit(item, ScheduleContext(0.0, 0.0, item.prediction))
    assert policy.score("a") == 10
    policy.on_tokens(item, 1)
    policy.on_tokens(item, 1)
    assert policy.score("a") == 14
    policy.on_complete(item, actuals(5))
    assert policy.score("a") == 14


def test_vtc_predicted_charge_is_reconciled() -> None:
    policy = VtcPolicy({"a": 1.0}, output_weight=4, charge=VtcCharge.predicted)
    item = QueuedRequest(Request(0, "a", 0.0, 100, 200), prediction(100))
    policy.on_admit(item, ScheduleContext(0.0, 0.0, item.prediction))
    assert policy.score("a") == 500
    policy.on_tokens(item, 1)
    assert policy.score("a") == 500
    policy.on_complete(item, actuals(200))
    assert policy.score("a") == 900


def test_equinox_correction_with_perfect_prediction_is_zero() -> None:
    policy = EquinoxPolicy({"a": 1.0})
    item = queued(0, "a")
    policy.on_admit(item, ScheduleContext(0.0, 0.0, item.prediction))
    before = (policy.state("a").ufc, policy.state("a").rfc)
    policy.on_complete(item, actuals(400))
    assert (policy.state("a").ufc, policy.state("a").rfc) == pytest.approx(before)


def test_equinox_correction_for_an_underestimate() -> None:
    policy = EquinoxPolicy({"a": 1.0}, EquinoxParams(delta=0))
    item = QueuedRequest(Request(0, "a", 0.0, 100, 200), prediction(100))
    policy.on_admit(item, ScheduleContext(0.0, 0.0, item.prediction))
    assert policy.state("a").ufc == pytest.approx(500)
    policy.on_complete(item, actuals(200, service_s=3.0))
    assert policy.state("a").ufc == pytest.approx(500 + 4 * 100)
    assert policy.state("a").accumulated_service == 0


@pytest.mark.parametrize("name", list(PolicyName))
def test_service_is_credited_per_delivery(name: PolicyName) -> None:
    policy = make_policy(name, {"a": 2.0, "b": 1.0})
    policy.record_service("a", 100, 1)
    policy.record_service("a", 0, 1)
    policy.record_service("b", 50, 1)
    services = {snap.client_id: snap.service_cum for snap in policy.snapshot()}
    assert services == pytest.approx({"a": 2 * (100 + 4 * 2), "b": 50 + 4})


def test_equinox_correction_is_clamped(caplog: pytest.LogCaptureFixture) -> None:
    policy = EquinoxPolicy({"a": 1.0}, EquinoxParams(delta=0))
    item = QueuedRequest(Request(0, "a", 0.0, 100, 200), prediction(100))
    policy.on_admit(item, ScheduleContext(0.0, 0.0, item.prediction))
    policy.state("a").ufc = 10.0
    with caplog.at_level(logging.WARNING, logger="fairbatch.scheduler"):
        policy.on_complete(item, actuals(1))
    assert policy.state("a").ufc == 0
    assert "clamped at 0" in caplog.text


@pytest.mark.parametrize("policy", [EquinoxPolicy({"a": 1.0}), VtcPolicy({"a": 1.0})])
def test_completing_an_unknown_request(policy: EquinoxPolicy | VtcPolicy) -> None:
    with pytest.raises(ConsistencyError, match="never admitted"):
        policy.on_complete(queued(99, "a"), actuals(400))


def test_unknown_client() -> None:
    with pytest.raises(ConsistencyError, match="Unknown client"):
        FcfsPolicy({"a": 1.0}).state("z")


def test_returning_client_is_lifted_to_the_backlogged_minimum() -> None:
    policy = EquinoxPolicy({"a": 1.0, "b": 1.0, "c": 1.0})
    for client_id, ufc in (("a", 300.0), ("b", 500.0)):
        policy.state(client_id).ufc = ufc
        policy.state(client_id).rfc = ufc / 10
        policy.on_backlogged(client_id)
    policy.on_backlogged("c")
    assert policy.state("c").ufc == 300
    assert policy.state("c").rfc == 30


def test_lift_never_lowers_a_counter() -> None:
    policy = VtcPolicy({"a": 1.0, "b": 1.0})
    policy.state("a").tokens = 10
    policy.on_backlogged("a")
    policy.state("b").tokens = 50
    policy.on_backlogged("b")
    assert policy.state("b").tokens == 50


def test_lift_can_be_disabled() -> None:
    policy = VtcPolicy({"a": 1.0, "b": 1.0}, lift=False)
    policy.state("a").tokens = 10
    policy.on_backlogged("a")
    policy.on_backlogged("b")
    assert policy.state("b").tokens == 0


def test_equinox_prefers_the_client_that_waited() -> None:
    """Equal resource use; the client whose earlier request waited longer has the lower user-fairness charge."""
    vtc = VtcPolicy({"user0": 1.0, "user1": 1.0}, charge=VtcCharge.predicted, lift=False)
    equinox = EquinoxPolicy({"user0": 1.0, "user1": 1.0}, lift=False)
    quick = QueuedRequest(Request(0, "user0", 0.0, 100, 100), prediction(100))
    slow = QueuedRequest(Request(1, "user1", 0.0, 100, 125), prediction(125))
    for policy in (vtc, equinox):
        policy.on_admit(quick, ScheduleContext(0.0, 0.0, quick.prediction))
        policy.on_admit(slow, ScheduleContext(10.0, 10.0, slow.prediction))

    backlog = Backlog()
    for item in (queued(2, "user0"), queued(3, "user1")):
        backlog.push(item)
        vtc.on_backlogged(item.request.client_id)
        equinox.on_backlogged(item.request.client_id)
    assert vtc.select_next(backlog, 10.0)[0] == "user0"  # type: ignore[index]
    assert equinox.select_next(backlog, 10.0)[0] == "user1"  # type: ignore[index]


def test_selection_is_scale_invariant_under_normalization() -> None:
    policy = EquinoxPolicy({"a": 1.0, "b": 1.0})
    backlog = Backlog()
    for index, client_id in enumerate(("a", "b")):
        backlog.push(queued(index, client_id))
        policy.on_backlogged(client_id)
    policy.state("a").ufc, policy.state("a").rfc = 400.0, 10.0
    policy.state("b").ufc, policy.state("b").rfc = 300.0, 30.0
    choice = policy.select_next(backlog, 0.0)
    for state in policy.clients.values():
        state.ufc *= 7.5
        state.rfc *= 7.5
    assert policy.select_next(backlog, 0.0) == choice


def test_snapshot_is_sorted_and_reports_scores() -> None:
    policy = VtcPolicy({"b": 1.0, "a": 1.0})
    policy.state("a").tokens = 3.0
    snapshot = policy.snapshot()
    assert [entry.client_id for entry in snapshot] == ["a", "b"]
    assert snapshot[0].hf == 3.0


def test_make_policy_by_name() -> None:
    assert isinstance(make_policy("fcfs", {"a": 1.0}), FcfsPolicy)
    vtc = make_policy(PolicyName.vtc, {"a": 1.0}, input_weight=1, output_weight=2, vtc_charge=VtcCharge.predicted)
    assert isinstance(vtc, VtcPolicy)
    assert vtc.charge == VtcCharge.predicted
    equinox = make_policy("equinox", {"a": 1.0}, equinox=EquinoxParams(alpha=0.9))
    assert isinstance(equinox, EquinoxPolicy)
    assert equinox.params.alpha == 0.9
    with pytest.raises(ValueError, match="'lottery' is not a valid PolicyName"):
        make_policy("lottery", {"a": 1.0})
