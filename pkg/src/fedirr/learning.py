"""Linear irrigation model, local gradient descent, and federated averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import (DimensionMismatch, Diverged, EmptyDataset, EmptyUpdateSet,
                     InvalidInput, RoundMismatch)


def _as_weights(values) -> tuple[float, ...]:
    weights = tuple(float(v) for v in values)
    if not all(math.isfinite(w) for w in weights):
        raise InvalidInput("weights must be finite")
    return weights


@dataclass(frozen=True)
class ModelParams:
    """Weights of a linear model; the last entry is the bias."""

    weights: tuple[float, ...]
    round: int = 0
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_weights(self.weights))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(self.weights) < 1:
            raise InvalidInput("weights must include at least the bias")
        if self.round < 0:
            raise InvalidInput(f"round must be >= 0, got {self.round}")
        if self.feature_names and len(self.feature_names) != self.dim:
            raise DimensionMismatch(
                f"{len(self.feature_names)} feature names for {self.dim} features")

    @property
    def dim(self) -> int:
        return len(self.weights) - 1

    @classmethod
    def zeros(cls, dim: int, feature_names: Sequence[str] = ()) -> "ModelParams":
        return cls(weights=(0.0,) * (dim + 1), round=0, feature_names=tuple(feature_names))

    def as_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=float)


@dataclass(frozen=True)
class TrainingExample:
    features: tuple[float, ...]
    target: float

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(f) for f in self.features))
        if not all(math.isfinite(f) for f in self.features) or not math.isfinite(self.target):
            raise InvalidInput("training example must be finite")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    round: int
    weights: tuple[float, ...]
    sample_count: int
    local_loss: float

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_weights(self.weights))
        if self.sample_count < 1:
            raise InvalidInput(f"sample_count must be >= 1, got {self.sample_count}")


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 20
    learning_rate: float = 0.1
    l2: float = 0.0
    convergence_tol: float = 1e-4
    max_rounds: int = 20

    def __post_init__(self):
        if self.local_epochs < 1:
            raise InvalidInput(f"local_epochs must be >= 1, got {self.local_epochs}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise InvalidInput(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (self.l2 >= 0 and math.isfinite(self.l2)):
            raise InvalidInput(f"l2 must be >= 0, got {self.l2}")
        if not (self.convergence_tol > 0 and math.isfinite(self.convergence_tol)):
            raise InvalidInput(f"convergence_tol must be > 0, got {self.convergence_tol}")
        if self.max_rounds < 1:
            raise InvalidInput(f"max_rounds must be >= 1, got {self.max_rounds}")


Dataset = Union[Sequence[TrainingExample], tuple]


def to_arrays(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Accept a list of examples or an ``(X, y)`` pair; return float arrays."""
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        X, y = dataset
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
    else:
        if len(dataset) == 0:
            raise EmptyDataset("dataset is empty")
        dims = {len(ex.features) for ex in dataset}
        if len(dims) != 1:
            raise DimensionMismatch(f"examples have mixed feature dimensions {sorted(dims)}")
        X = np.array([ex.features for ex in dataset], dtype=float)
        y = np.array([ex.target for ex in dataset], dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("dataset is empty")
    if y.shape != (X.shape[0],):
        raise DimensionMismatch(f"{X.shape[0]} feature rows but target shape {y.shape}")
    return X, y


def _check_dim(weights: np.ndarray, X: np.ndarray) -> None:
    if X.shape[1] + 1 != weights.shape[0]:
        raise DimensionMismatch(
            f"model has {weights.shape[0] - 1} features, data has {X.shape[1]}")


def predict(params: ModelParams, features: Sequence[float]) -> float:
    x = np.asarray(features, dtype=float)
    if x.shape != (params.dim,):
        raise DimensionMismatch(f"model expects {params.dim} features, got {x.shape}")
    w = params.as_array()
    return float(np.dot(w[:-1], x) + w[-1])


def _loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    r = X @ w[:-1] + w[-1] - y
    return float(np.mean(r * r) + l2 * np.dot(w[:-1], w[:-1]))


def _grad(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    n = X.shape[0]
    r = X @ w[:-1] + w[-1] - y
    g = np.empty_like(w)
    g[:-1] = (2.0 / n) * (X.T @ r) + 2.0 * l2 * w[:-1]
    g[-1] = (2.0 / n) * r.sum()
    return g


def mse_loss(params: ModelParams, dataset: Dataset, l2: float = 0.0) -> float:
    """Mean squared error plus ``l2 * ||w||^2`` (bias not regularized)."""
    X, y = to_arrays(dataset)
    w = params.as_array()
    _check_dim(w, X)
    return _loss(w, X, y, l2)


def gradient(params: ModelParams, dataset: Dataset, l2: float = 0.0) -> np.ndarray:
    """Analytic gradient of :func:`mse_loss`, bias component last."""
    X, y = to_arrays(dataset)
    w = params.as_array()
    _check_dim(w, X)
    return _grad(w, X, y, l2)


def local_train(start: ModelParams, dataset: Dataset, cfg: TrainConfig,
                client_id: str = "local") -> ClientUpdate:
    """Full-batch gradient descent for ``cfg.local_epochs`` steps."""
    X, y = to_arrays(dataset)
    w = start.as_array()
    _check_dim(w, X)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.local_epochs):
            w = w - cfg.learning_rate * _grad(w, X, y, cfg.l2)
            if not np.all(np.isfinite(w)):
                raise Diverged(
                    f"weights became non-finite; learning_rate={cfg.learning_rate} is too high")
    return ClientUpdate(client_id=client_id, round=start.round, weights=tuple(w.tolist()),
                        sample_count=int(X.shape[0]), local_loss=_loss(w, X, y, cfg.l2))


def aggregate(updates: Sequence[ClientUpdate], feature_names: Sequence[str] = ()) -> ModelParams:
    """Sample-count-weighted mean of client weights; round advances by one.

    Components are summed with ``math.fsum`` so the result does not depend on
    update order, then clipped to the clients' componentwise envelope to absorb
    the final rounding.
    """
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise RoundMismatch(f"updates from different rounds: {sorted(rounds)}")
    dims = {len(u.weights) for u in updates}
    if len(dims) != 1:
        raise DimensionMismatch(f"updates have different dimensions: {sorted(dims)}")

    total = sum(u.sample_count for u in updates)
    W = np.array([u.weights for u in updates], dtype=float)
    mean = np.array([math.fsum(u.sample_count * u.weights[j] for u in updates) / total
                     for j in range(W.shape[1])])
    mean = np.clip(mean, W.min(axis=0), W.max(axis=0))
    return ModelParams(weights=tuple(mean.tolist()), round=rounds.pop() + 1,
                       feature_names=tuple(feature_names))


def has_converged(prev: ModelParams, next: ModelParams, tol: float) -> bool:
    if prev.dim != next.dim:
        raise DimensionMismatch(f"cannot compare dims {prev.dim} and {next.dim}")
    return float(np.max(np.abs(next.as_array() - prev.as_array()))) < tol


def fit_least_squares(dataset: Dataset, l2: float = 0.0, round: int = 0,
                      feature_names: Sequence[str] = ()) -> ModelParams:
    """Closed-form minimizer of :func:`mse_loss` (used for reference models)."""
    X, y = to_arrays(dataset)
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = np.diag([l2] * X.shape[1] + [0.0]) * X.shape[0]
    w = np.linalg.solve(A.T @ A + reg, A.T @ y)
    return ModelParams(weights=tuple(w.tolist()), round=round, feature_names=tuple(feature_names))
