from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from fairbatch.config import CellConfig, PolicyConfig, PredictorConfig, validate_config
from fairbatch.experiments import run_experiment, simulate, sweep_alpha
from fairbatch.predictor import PredictorKind
from fairbatch.scheduler import PolicyName, VtcCharge

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from pytest_mock import MockerFixture

POISSON_SEEDS = range(1, 21)
GRID = {
    "Equinox+Oracle": CellConfig(),
    "Equinox+Noisy": CellConfig(predictor=PredictorConfig(kind=PredictorKind.noisy_oracle, target_l1=33)),
    "Equinox+MoPE": CellConfig(predictor=PredictorConfig(kind=PredictorKind.mope, training_size=2000)),
    "VTC+Oracle": CellConfig(policy=PolicyConfig(name=PolicyName.vtc, vtc_charge=VtcCharge.predicted)),
    "VTC": CellConfig(policy=PolicyConfig(name=PolicyName.vtc)),
    "FCFS": CellConfig(policy=PolicyConfig(name=PolicyName.fcfs)),
}


def inversions(values: Sequence[float], *, rising: bool, tolerance: float = 0.01) -> int:
    """Adjacent steps that go against the expected direction by more than ``tolerance``."""
    steps = np.diff(values) if rising else -np.diff(values)
    return int(np.sum(steps < -tolerance))


@pytest.fixture(scope="module")
def poisson_avg_diff() -> dict[str, np.ndarray]:
    """Average service difference of every grid cell on the poisson preset, one value per seed."""
    config = validate_config({"scenario": {"preset": "poisson"}})
    return {
        label: np.array([simulate(config, seed, cell.policy, cell.predictor).report.avg_diff for seed in POISSON_SEEDS])
        for label, cell in GRID.items()
    }


def test_inversions() -> None:
    assert inversions([0.5, 0.7, 0.69, 1.0], rising=True) == 1
    assert inversions([0.5, 0.7, 0.695, 1.0], rising=True) == 0
    assert inversions([1.0, 0.9, 0.95, 0.8], rising=False) == 1


@pytest.mark.parametrize(
    ("fairer", "other"),
    [("Equinox+Oracle", "Equinox+Noisy"), ("Equinox+Noisy", "VTC+Oracle"), ("VTC+Oracle", "VTC")],
)
def test_fairness_ordering_on_poisson_arrivals(
    poisson_avg_diff: dict[str, np.ndarray],
    fairer: str,
    other: str,
) -> None:
    assert poisson_avg_diff[fairer].mean() < poisson_avg_diff[other].mean()
    assert np.mean(poisson_avg_diff[fairer] < poisson_avg_diff[other]) >= 0.8


def test_fcfs_is_no_fairer_than_vtc(poisson_avg_diff: dict[str, np.ndarray]) -> None:
    vtc, fcfs = poisson_avg_diff["VTC"], poisson_avg_diff["FCFS"]
    assert vtc.mean() <= fcfs.mean() * 1.05
    assert np.mean(vtc <= fcfs * 1.05) >= 0.8


def test_oracle_predictions_are_fairer_than_mope(poisson_avg_diff: dict[str, np.ndarray]) -> None:
    assert poisson_avg_diff["Equinox+Oracle"].mean() <= poisson_avg_diff["Equinox+MoPE"].mean()


def test_overload_service_difference_stays_bounded_under_fair_policies() -> None:
    config = validate_config({"scenario": {"preset": "overload"}})
    final = {
        name: simulate(config, 1, PolicyConfig(name=name)).report.service_difference[-1][1] for name in PolicyName
    }
    # client2 sends 200 input and 1800 output tokens per request
    bound = 2 * (200 + 4 * 1800) * config.perf.max_batch
    assert final[PolicyName.vtc] < bound
    assert final[PolicyName.equinox] < bound
    assert final[PolicyName.fcfs] > 2 * final[PolicyName.equinox]


def test_alpha_sweep_trades_throughput_for_latency_fairness(tmp_path: Path) -> None:
    config = validate_config({"scenario": {"preset": "poisson"}, "seeds": [1, 2, 3], "output_dir": str(tmp_path)})
    rows = sweep_alpha(config, config.alphas)
    _, jain, throughput = zip(*rows)
    assert inversions(jain, rising=True) <= 1
    assert inversions(throughput, rising=False) <= 1


def test_parallel_runs_use_a_process_pool(mocker: MockerFixture, tmp_path: Path) -> None:
    pool = mocker.patch("fairbatch.experiments.ProcessPoolExecutor")
    pool.return_value.__enter__.return_value.map.side_effect = map
    config = validate_config({"scenario": {"duration": 2}, "seeds": [1, 2], "output_dir": str(tmp_path)})
    outcomes = run_experiment(config, workers=2)
    pool.assert_called_once_with(max_workers=2)
    assert [outcome.seed for outcome in outcomes] == [1, 2]


def test_a_single_worker_runs_in_process(mocker: MockerFixture, tmp_path: Path) -> None:
    pool = mocker.patch("fairbatch.experiments.ProcessPoolExecutor")
    config = validate_config({"scenario": {"duration": 2}, "output_dir": str(tmp_path)})
    assert len(run_experiment(config)) == 1
    pool.assert_not_called()
