"""Output-length predictors and the mapping from predicted lengths to expected GPU metrics.

Every predictor answers ``predict(request) -> output tokens``; :class:`PredictionService` then maps the
prediction through a :class:`~fairbatch.gpu_model.GpuProfile` and keeps the profile calibrated with the
metrics observed when requests complete.
"""

from __future__ import annotations

import itertools
import json
import logging
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.metrics import mean_absolute_error
from sklearn.utils.validation import check_is_fitted

from fairbatch.constants import (
    BUCKET_LABELS,
    DEFAULT_BUCKET_PERCENTILES,
    DEFAULT_EMA_ALPHA,
    DEFAULT_INPUT_BINS,
    DEFAULT_NOISY_L1,
    MIN_TRAINING_CORPUS,
    MIX_WEIGHT_GRID,
    THRESHOLD_CANDIDATE_PERCENTILES,
)
from fairbatch.errors import ConfigError, TrainingError
from fairbatch.gpu_model import GpuProfile, ProfileEntry

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from fairbatch.workload import Request

logger = logging.getLogger(__name__)


class PredictorKind(str, Enum):
    """Available output-length predictors."""

    oracle = "oracle"
    noisy_oracle = "noisy_oracle"
    single_proxy = "single_proxy"
    mope = "mope"


class OutputPredictor(Protocol):
    """Anything that estimates a request's output length."""

    def predict(self, req: Request) -> int:
        """Predicted output tokens, at least 1."""
        ...


@dataclass(frozen=True)
class PredictionRecord:
    """A predicted output length and the metrics the profile expects for it."""

    predicted_output_tokens: int
    predicted_latency_ms: float
    predicted_gpu_util: float
    predicted_tps: float


@dataclass(frozen=True)
class Observation:
    """Metrics measured for a completed request."""

    output_tokens: int
    latency_ms: float
    gpu_util: float
    tps: float


def map_metrics(predicted_out: int, profile: GpuProfile) -> PredictionRecord:
    """Look up the profile bucket holding ``predicted_out`` (clamped to the last bucket)."""
    entry = profile.entry_for(predicted_out)
    return PredictionRecord(predicted_out, entry.latency_ms, entry.gpu_util, entry.tps)


def update_map(profile: GpuProfile, observation: Observation, ema_alpha: float = DEFAULT_EMA_ALPHA) -> GpuProfile:
    """Move the bucket holding the observed length toward the observation by an exponential moving average."""
    if not 0 < ema_alpha <= 1:
        msg = f"ema_alpha must be within (0, 1], got {ema_alpha}"
        raise ConfigError(msg)
    index = profile.bucket_index(observation.output_tokens)
    old = profile.entries[index]

    def ema(previous: float, observed: float) -> float:
        return (1 - ema_alpha) * previous + ema_alpha * observed

    new = ProfileEntry(
        old.bucket_upper,
        ema(old.latency_ms, observation.latency_ms),
        min(1.0, max(0.0, ema(old.gpu_util, observation.gpu_util))),
        ema(old.tps, observation.tps),
    )
    return profile.with_entry(index, new)


class OraclePredictor:
    """Knows the true output length."""

    def predict(self, req: Request) -> int:
        """The true output length."""
        return req.true_output_tokens


@dataclass(frozen=True)
class NoisyOraclePredictor:
    """True length plus Laplace noise whose scale is the target mean absolute error.

    The noise of a request depends only on ``(seed, request id)``, so predictions are repeatable.
    """

    target_l1: float = DEFAULT_NOISY_L1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.target_l1 < 0:
            msg = f"target_l1 must be >= 0, got {self.target_l1}"
            raise ConfigError(msg)

    def predict(self, req: Request) -> int:
        """True length with noise, rounded and floored at 1."""
        if self.target_l1 == 0:
            return req.true_output_tokens
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(req.id,)))
        return max(1, round(req.true_output_tokens + float(rng.laplace(0.0, self.target_l1))))


@dataclass(frozen=True)
class ExpertModel:
    """Conditional-median table: input-length bins mapped to an output-length estimate."""

    bucket: str
    input_uppers: tuple[int, ...]
    predictions: tuple[int, ...]
    output_low: int
    output_high: int

    def __post_init__(self) -> None:
        if len(self.input_uppers) != len(self.predictions) or not self.predictions:
            msg = f"Expert {self.bucket!r}: bins and predictions must be non-empty and of equal length"
            raise ValueError(msg)

    def predict_tokens(self, input_tokens: int) -> int:
        """Estimate for a prompt of ``input_tokens``; beyond the last bin the last estimate applies."""
        index = min(bisect_left(self.input_uppers, input_tokens), len(self.predictions) - 1)
        return self.predictions[index]

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form."""
        return {
            "bucket": self.bucket,
            "bins": [[upper, prediction] for upper, prediction in zip(self.input_uppers, self.predictions)],
            "output_range": [self.output_low, self.output_high],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExpertModel:
        """Inverse of :meth:`to_dict`."""
        uppers, predictions = zip(*data["bins"])
        low, high = data["output_range"]
        return cls(data["bucket"], tuple(uppers), tuple(predictions), low, high)


def fit_expert(
    bucket: str,
    inputs: np.ndarray,
    outputs: np.ndarray,
    output_range: tuple[int, int],
    input_bins: int = DEFAULT_INPUT_BINS,
) -> ExpertModel:
    """Median output length per input-length quantile bin, clamped to the bucket's output range."""
    uppers = [int(inputs.max())]
    if input_bins > 1:
        quantiles = np.linspace(0, 100, input_bins + 1)[1:-1]
        edges = np.unique(np.percentile(inputs, quantiles, method="inverted_cdf").astype(int))
        uppers = [*edges.tolist(), *uppers]
    if len(uppers) > 1 and uppers[-1] <= uppers[-2]:
        uppers.pop()
    assigned = np.minimum(np.searchsorted(uppers, inputs, side="left"), len(uppers) - 1)
    fallback = float(np.median(outputs))
    low, high = output_range
    predictions = []
    for index in range(len(uppers)):
        members = outputs[assigned == index]
        median = float(np.median(members)) if members.size else fallback
        predictions.append(int(min(high, max(low, round(median)))))
    return ExpertModel(bucket, tuple(int(upper) for upper in uppers), tuple(predictions), low, high)


@dataclass(frozen=True)
class RouterModel:
    """Classifies a request into an output-length bucket from its input length and category tag."""

    labels: tuple[str, ...]
    input_len_thresholds: tuple[int, ...]
    keyword_scores: dict[str, tuple[float, ...]]
    mix_weight: float

    def __post_init__(self) -> None:
        thresholds = self.input_len_thresholds
        if len(thresholds) != len(self.labels) - 1:
            msg = f"A router over {len(self.labels)} buckets needs {len(self.labels) - 1} thresholds, got {thresholds}"
            raise ValueError(msg)
        if any(later <= earlier for earlier, later in zip(thresholds, thresholds[1:])):
            msg = f"Router thresholds must be strictly increasing, got {thresholds}"
            raise ValueError(msg)
        if not 0 <= self.mix_weight <= 1:
            msg = f"mix_weight must be within [0, 1], got {self.mix_weight}"
            raise ValueError(msg)

    def length_bucket(self, input_tokens: int) -> int:
        """Bucket chosen by input length alone."""
        return bisect_left(self.input_len_thresholds, input_tokens)

    def knows(self, tag: str | None) -> bool:
        """Return True if the tag was seen during training."""
        return tag is not None and tag in self.keyword_scores

    def scores(self, req: Request) -> list[float]:
        """Per-bucket score; unseen or missing tags fall back to the length signal alone."""
        length = [0.0] * len(self.labels)
        length[self.length_bucket(req.input_tokens)] = 1.0
        if not self.knows(req.category_tag):
            return length
        keyword = self.keyword_scores[req.category_tag]  # type: ignore[index]
        return [self.mix_weight * by_len + (1 - self.mix_weight) * by_tag for by_len, by_tag in zip(length, keyword)]

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form."""
        return {
            "labels": list(self.labels),
            "input_len_thresholds": list(self.input_len_thresholds),
            "keyword_scores": {tag: list(row) for tag, row in sorted(self.keyword_scores.items())},
            "mix_weight": self.mix_weight,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RouterModel:
        """Inverse of :meth:`to_dict`."""
        return cls(
            tuple(data["labels"]),
            tuple(data["input_len_thresholds"]),
            {tag: tuple(row) for tag, row in data["keyword_scores"].items()},
            float(data["mix_weight"]),
        )


def route(router: RouterModel, req: Request) -> str:
    """Bucket label with the highest score; ties go to the shorter bucket."""
    scores = router.scores(req)
    return router.labels[scores.index(max(scores))]


def _check_percentiles(percentiles: Sequence[float]) -> None:
    values = list(percentiles)
    if any(not 0 < value < 100 for value in values) or any(b <= a for a, b in zip(values, values[1:])):
        msg = f"Bucket percentiles must be strictly increasing within (0, 100), got {values}"
        raise ConfigError(msg)


def bucket_labels_for(n_buckets: int) -> tuple[str, ...]:
    """Readable bucket names for 1, 3 or 5 buckets; generic names otherwise."""
    return BUCKET_LABELS.get(n_buckets, tuple(f"bucket{index}" for index in range(n_buckets)))


def assign_buckets(outputs: np.ndarray, bucket_bounds: Sequence[int]) -> np.ndarray:
    """Bucket index per output length: ``out <= bounds[0]`` is bucket 0."""
    return np.searchsorted(np.asarray(bucket_bounds), outputs, side="left")


def _fit_thresholds(inputs: np.ndarray, truth: np.ndarray, n_buckets: int) -> tuple[int, ...]:
    if n_buckets == 1:
        return ()
    candidates = np.unique(np.percentile(inputs, THRESHOLD_CANDIDATE_PERCENTILES, method="inverted_cdf").astype(int))
    # Thresholds above every input keep the search feasible when inputs barely vary
    padding = [int(inputs.max()) + step for step in range(1, n_buckets)]
    candidates = sorted({*candidates.tolist(), *padding})
    best: tuple[int, ...] = tuple(padding)
    best_accuracy = -1.0
    for combo in itertools.combinations(candidates, n_buckets - 1):
        accuracy = float(np.mean(np.searchsorted(combo, inputs, side="left") == truth))
        if accuracy > best_accuracy:
            best, best_accuracy = combo, accuracy
    return tuple(int(value) for value in best)


def _keyword_scores(tags: Sequence[str | None], truth: np.ndarray, n_buckets: int) -> dict[str, tuple[float, ...]]:
    counts: dict[str, np.ndarray] = {}
    for tag, bucket in zip(tags, truth):
        if tag is None:
            continue
        counts.setdefault(tag, np.zeros(n_buckets))[bucket] += 1
    return {tag: tuple(float(value) for value in row / row.sum()) for tag, row in sorted(counts.items())}


def router_accuracy(router: RouterModel, requests: Sequence[Request], bucket_bounds: Sequence[int]) -> float:
    """Share of requests routed to the bucket their true output length belongs to."""
    truth = assign_buckets(np.array([req.true_output_tokens for req in requests]), bucket_bounds)
    routed = [router.labels.index(route(router, req)) for req in requests]
    return float(np.mean(np.asarray(routed) == truth))


def _fit_mix_weight(
    n_buckets: int,
    thresholds: tuple[int, ...],
    keyword_scores: dict[str, tuple[float, ...]],
    requests: Sequence[Request],
    truth: np.ndarray,
) -> float:
    length_onehot = np.eye(n_buckets)[np.searchsorted(thresholds, [req.input_tokens for req in requests], side="left")]
    known = np.array([req.category_tag in keyword_scores for req in requests])
    keyword = np.array([keyword_scores.get(req.category_tag or "", (0.0,) * n_buckets) for req in requests])
    best_weight, best_accuracy = MIX_WEIGHT_GRID[0], -1.0
    for weight in MIX_WEIGHT_GRID:
        scores = np.where(known[:, None], weight * length_onehot + (1 - weight) * keyword, length_onehot)
        accuracy = float(np.mean(np.argmax(scores, axis=1) == truth))
        if accuracy > best_accuracy:
            best_weight, best_accuracy = weight, accuracy
    logger.debug("Router mix weight %s reaches %.3f training accuracy", best_weight, best_accuracy)
    return best_weight


@dataclass(frozen=True)
class MopeModel:
    """A trained router, its experts and the output-length bucket bounds they were trained on."""

    router: RouterModel
    experts: tuple[ExpertModel, ...]
    bucket_bounds: tuple[int, ...]

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form."""
        return {
            "bucket_bounds": list(self.bucket_bounds),
            "router": self.router.to_dict(),
            "experts": [expert.to_dict() for expert in self.experts],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MopeModel:
        """Inverse of :meth:`to_dict`."""
        return cls(
            RouterModel.from_dict(data["router"]),
            tuple(ExpertModel.from_dict(expert) for expert in data["experts"]),
            tuple(data["bucket_bounds"]),
        )


def train_mope(
    corpus: Sequence[Request],
    bucket_percentiles: Sequence[float] = DEFAULT_BUCKET_PERCENTILES[3],
    input_bins: int = DEFAULT_INPUT_BINS,
) -> MopeModel:
    """Partition the corpus by output-length percentiles, fit a router and one expert per bucket."""
    _check_percentiles(bucket_percentiles)
    if len(corpus) < MIN_TRAINING_CORPUS:
        msg = f"Training needs at least {MIN_TRAINING_CORPUS} requests, got {len(corpus)}"
        raise TrainingError(msg)

    inputs = np.array([req.input_tokens for req in corpus])
    outputs = np.array([req.true_output_tokens for req in corpus])
    bounds: tuple[int, ...] = ()
    if bucket_percentiles:
        cuts = np.percentile(outputs, list(bucket_percentiles), method="inverted_cdf")
        bounds = tuple(int(value) for value in cuts)
    labels = bucket_labels_for(len(bounds) + 1)
    truth = assign_buckets(outputs, bounds)
    for index, label in enumerate(labels):
        if not np.any(truth == index):
            msg = f"Bucket {label!r} has no training requests (bounds {bounds})"
            raise TrainingError(msg)

    thresholds = _fit_thresholds(inputs, truth, len(labels))
    keyword_scores = _keyword_scores([req.category_tag for req in corpus], truth, len(labels))
    mix_weight = _fit_mix_weight(len(labels), thresholds, keyword_scores, corpus, truth)
    router = RouterModel(labels, thresholds, keyword_scores, mix_weight)

    experts = []
    for index, label in enumerate(labels):
        mask = truth == index
        low = bounds[index - 1] + 1 if index > 0 else 1
        high = bounds[index] if index < len(bounds) else int(outputs.max())
        experts.append(fit_expert(label, inputs[mask], outputs[mask], (low, high), input_bins))
    return MopeModel(router, tuple(experts), bounds)


class SingleProxyPredictor(BaseEstimator):
    """One conditional-median table over the whole corpus, with no partitioning."""

    def __init__(self, input_bins: int = DEFAULT_INPUT_BINS) -> None:
        self.input_bins = input_bins

    def fit(self, corpus: Sequence[Request]) -> SingleProxyPredictor:
        """Fit the table."""
        if len(corpus) < MIN_TRAINING_CORPUS:
            msg = f"Training needs at least {MIN_TRAINING_CORPUS} requests, got {len(corpus)}"
            raise TrainingError(msg)
        inputs = np.array([req.input_tokens for req in corpus])
        outputs = np.array([req.true_output_tokens for req in corpus])
        self.expert_ = fit_expert("all", inputs, outputs, (1, int(outputs.max())), self.input_bins)
        return self

    def predict(self, req: Request) -> int:
        """Global estimate for the request's input length."""
        check_is_fitted(self, "expert_")
        return self.expert_.predict_tokens(req.input_tokens)


class MopePredictor(BaseEstimator):
    """Mixture of prediction experts: route to an output-length bucket, then ask that bucket's expert."""

    def __init__(
        self,
        n_experts: int = 3,
        bucket_percentiles: Sequence[float] | None = None,
        input_bins: int = DEFAULT_INPUT_BINS,
    ) -> None:
        self.n_experts = n_experts
        self.bucket_percentiles = bucket_percentiles
        self.input_bins = input_bins

    def _percentiles(self) -> tuple[float, ...]:
        if self.bucket_percentiles is not None:
            return tuple(self.bucket_percentiles)
        if self.n_experts not in DEFAULT_BUCKET_PERCENTILES:
            msg = f"No default bucket percentiles for {self.n_experts} experts; pass bucket_percentiles"
            raise ConfigError(msg)
        return DEFAULT_BUCKET_PERCENTILES[self.n_experts]

    def fit(self, corpus: Sequence[Request]) -> MopePredictor:
        """Train the router and the experts."""
        return self._set_model(train_mope(corpus, self._percentiles(), self.input_bins))

    def _set_model(self, model: MopeModel) -> MopePredictor:
        self.model_ = model
        self.stats_: dict[str, int] = {"routed": 0, "router_fallbacks": 0}
        return self

    def route(self, req: Request) -> str:
        """Bucket chosen for the request; unseen tags are counted as fallbacks."""
        check_is_fitted(self, "model_")
        self.stats_["routed"] += 1
        if not self.model_.router.knows(req.category_tag):
            self.stats_["router_fallbacks"] += 1
            logger.debug("Request %s: tag %r unknown, routing by length", req.id, req.category_tag)
        return route(self.model_.router, req)

    def predict(self, req: Request) -> int:
        """Query the expert of the routed bucket."""
        label = self.route(req)
        return self.model_.experts[self.model_.router.labels.index(label)].predict_tokens(req.input_tokens)

    def save(self, path: Path) -> None:
        """Write router and experts as JSON."""
        check_is_fitted(self, "model_")
        path.write_text(json.dumps(self.model_.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> MopePredictor:
        """Read a model written by :meth:`save`."""
        try:
            model = MopeModel.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, KeyError, TypeError, ValueError) as err:
            msg = f"Cannot load a MoPE model from {path}: {err}"
            raise ConfigError(msg) from err
        predictor = cls(n_experts=len(model.experts))
        return predictor._set_model(model)  # noqa: SLF001


def evaluate_l1(predictor: OutputPredictor, requests: Sequence[Request]) -> float:
    """Mean absolute error in tokens over ``requests``."""
    truth = [req.true_output_tokens for req in requests]
    return float(mean_absolute_error(truth, [predictor.predict(req) for req in requests]))


@dataclass
class PredictionService:
    """Predicts lengths, maps them to expected metrics and recalibrates the map from observations."""

    predictor: OutputPredictor
    profile: GpuProfile
    ema_alpha: float = DEFAULT_EMA_ALPHA
    observations: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if not 0 < self.ema_alpha <= 1:
            msg = f"ema_alpha must be within (0, 1], got {self.ema_alpha}"
            raise ConfigError(msg)

    def predict(self, req: Request) -> PredictionRecord:
        """Predicted output length together with its mapped latency, utilization and throughput."""
        return map_metrics(max(1, self.predictor.predict(req)), self.profile)

    def observe(self, observation: Observation) -> None:
        """Fold a completed request's metrics into the profile."""
        self.profile = update_map(self.profile, observation, self.ema_alpha)
        self.observations += 1
