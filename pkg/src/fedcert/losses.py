"""Hypotheses and [0,1]-bounded losses.

Everything downstream (clients, certificates, verification oracles) talks to a
model only through ``loss`` / ``loss_gradient``, so no other module needs to
know what kind of predictor is being certified.  All losses are clipped to
[0, 1]; the certificate formulas rely on that range and nothing else.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

__all__ = [
    "LINEAR",
    "LOGISTIC",
    "LOOKUP",
    "ZERO_ONE",
    "CROSS_ENTROPY",
    "SQUARED",
    "LOSS_KINDS",
    "Sample",
    "Hypothesis",
    "LossFn",
    "DimensionMismatchError",
    "UnsupportedGradientError",
    "loss",
    "loss_values",
    "loss_gradient",
    "gradient_values",
    "curvature_bound",
]

LINEAR = "linear-classifier"
LOGISTIC = "logistic"
LOOKUP = "lookup-table"
HYPOTHESIS_KINDS = (LINEAR, LOGISTIC, LOOKUP)

ZERO_ONE = "zero-one"
CROSS_ENTROPY = "clipped-cross-entropy"
SQUARED = "clipped-squared"
LOSS_KINDS = (ZERO_ONE, CROSS_ENTROPY, SQUARED)

# floor for probabilities inside log(); keeps cross-entropy finite before the clip
_P_FLOOR = 1e-12


class DimensionMismatchError(ValueError):
    """Feature vector does not match the hypothesis' declared input width."""


class UnsupportedGradientError(ValueError):
    """Requested a feature gradient where none exists (e.g. zero-one loss)."""


@dataclass(frozen=True)
class Sample:
    """One labelled observation: real feature vector plus a label.

    Labels are integer class ids for classification losses and may be real
    values for the squared loss on score-valued hypotheses.
    """

    features: np.ndarray
    label: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 1:
            raise ValueError("sample features must be a 1-D vector")
        if not np.all(np.isfinite(feats)) or not np.isfinite(self.label):
            raise ValueError("sample contains non-finite entries")
        object.__setattr__(self, "features", feats)


@dataclass
class Hypothesis:
    """A fixed predictor under evaluation.

    kind:
      * ``linear-classifier`` -- weights (C, d), bias (C,); predicts argmax score.
      * ``logistic``          -- weights (d,), scalar bias; predicts P(label=1).
      * ``lookup-table``      -- ``grid`` (G, d) support points with one
        prediction per point; covers the whole declared discrete space.
    """

    kind: str
    weights: np.ndarray
    bias: np.ndarray | float = 0.0
    grid: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in HYPOTHESIS_KINDS:
            raise ValueError(f"unknown hypothesis kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("hypothesis weights must be finite")
        if self.kind == LINEAR:
            if self.weights.ndim != 2:
                raise ValueError("linear-classifier weights must be (C, d)")
            self.bias = np.broadcast_to(
                np.asarray(self.bias, dtype=float), (self.weights.shape[0],)
            ).copy()
        elif self.kind == LOGISTIC:
            if self.weights.ndim != 1:
                raise ValueError("logistic weights must be a vector")
            self.bias = float(self.bias)
        else:
            if self.grid is None:
                raise ValueError("lookup-table hypothesis needs a grid")
            self.grid = np.asarray(self.grid, dtype=float)
            if self.grid.ndim == 1:
                self.grid = self.grid[:, None]
            if self.weights.ndim != 1 or len(self.weights) != len(self.grid):
                raise ValueError("lookup-table needs one prediction per grid point")

    @property
    def n_features(self) -> int:
        if self.kind == LINEAR:
            return self.weights.shape[1]
        if self.kind == LOGISTIC:
            return self.weights.shape[0]
        return self.grid.shape[1]

    @property
    def n_classes(self) -> int:
        if self.kind == LINEAR:
            return self.weights.shape[0]
        return 2

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Raw decision scores: (n, C) for linear, (n,) log-odds otherwise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"expected {self.n_features} features, got {X.shape[1]}"
            )
        if self.kind == LINEAR:
            return X @ self.weights.T + self.bias
        if self.kind == LOGISTIC:
            return X @ self.weights + self.bias
        return self._table_rows(X).astype(float)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Hard labels; argmax for linear, threshold at 1/2 for the rest."""
        if self.kind == LINEAR:
            return np.argmax(self.scores(X), axis=1)
        if self.kind == LOGISTIC:
            return (self.scores(X) >= 0.0).astype(int)
        return (self.predicted_value(X) >= 0.5).astype(int)

    def predicted_value(self, X: np.ndarray) -> np.ndarray:
        """Real-valued output: probability of class 1, or the table entry."""
        if self.kind == LOGISTIC:
            return _sigmoid(self.scores(X))
        if self.kind == LOOKUP:
            X = np.atleast_2d(np.asarray(X, dtype=float))
            return self.weights[self._table_rows(X)]
        raise ValueError("linear-classifier has no scalar predicted value")

    def _table_rows(self, X: np.ndarray) -> np.ndarray:
        # every queried point must be a declared grid point, by contract
        d = np.linalg.norm(X[:, None, :] - self.grid[None, :, :], axis=2)
        rows = np.argmin(d, axis=1)
        if np.any(d[np.arange(len(X)), rows] > 1e-9):
            raise ValueError("lookup-table queried off its declared grid")
        return rows

    # binary margin direction: moving features along -u lowers the class-1 score
    def margin_direction(self) -> np.ndarray:
        if self.kind == LOGISTIC:
            return self.weights
        if self.kind == LINEAR and self.n_classes == 2:
            return self.weights[1] - self.weights[0]
        raise ValueError("margin direction defined for binary linear rules only")

    def to_json_dict(self) -> dict:
        out = {"kind": self.kind, "weights": self.weights.tolist(), "name": self.name}
        out["bias"] = self.bias.tolist() if isinstance(self.bias, np.ndarray) else self.bias
        if self.grid is not None:
            out["grid"] = self.grid.tolist()
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "Hypothesis":
        return cls(
            kind=d["kind"],
            weights=np.asarray(d["weights"], dtype=float),
            bias=np.asarray(d["bias"], dtype=float)
            if isinstance(d.get("bias"), list)
            else float(d.get("bias", 0.0)),
            grid=np.asarray(d["grid"], dtype=float) if "grid" in d else None,
            name=d.get("name", ""),
        )

    def cache_key(self) -> str:
        h = hashlib.sha1()
        h.update(json.dumps(self.to_json_dict(), sort_keys=True).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class LossFn:
    """A named [0,1]-bounded loss; ``kind`` is one of LOSS_KINDS."""

    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s, dtype=float)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def loss_values(loss_fn: LossFn, h: Hypothesis, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized per-sample losses, always inside [0, 1]."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if len(y) != len(X):
        raise DimensionMismatchError("feature/label counts differ")

    if loss_fn.kind == ZERO_ONE:
        return (h.predict(X) != y.astype(int)).astype(float)

    if loss_fn.kind == CROSS_ENTROPY:
        if h.kind == LINEAR:
            s = h.scores(X)
            s = s - s.max(axis=1, keepdims=True)
            logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
            raw = -logp[np.arange(len(X)), y.astype(int)]
        else:
            p = np.clip(h.predicted_value(X), _P_FLOOR, 1.0 - _P_FLOOR)
            raw = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
        return np.clip(raw, 0.0, 1.0)

    # clipped squared error against the scalar model output
    if h.kind == LINEAR:
        raise ValueError("clipped-squared needs a score-valued hypothesis "
                         "(logistic or lookup-table)")
    return np.clip((y - h.predicted_value(X)) ** 2, 0.0, 1.0)


def loss(loss_fn: LossFn, h: Hypothesis, z: Sample) -> float:
    return float(loss_values(loss_fn, h, z.features[None, :], np.array([z.label]))[0])


def gradient_values(loss_fn: LossFn, h: Hypothesis, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the clipped loss w.r.t. features, shape (n, d).

    The clip is honoured: where the unclipped loss sits outside (0, 1) the
    gradient is zero (the loss surface is flat there).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))

    if h.kind == LOOKUP:
        # a constant table makes every loss locally constant in the features
        if np.ptp(h.weights) == 0.0:
            return np.zeros_like(X)
        raise UnsupportedGradientError("lookup-table predictions are not differentiable")

    if loss_fn.kind == ZERO_ONE:
        raise UnsupportedGradientError("zero-one loss has no feature gradient")

    if loss_fn.kind == CROSS_ENTROPY:
        if h.kind == LINEAR:
            s = h.scores(X)
            s = s - s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            raw = -np.log(np.clip(p[np.arange(len(X)), y.astype(int)], _P_FLOOR, None))
            resid = p.copy()
            resid[np.arange(len(X)), y.astype(int)] -= 1.0
            g = resid @ h.weights
        else:
            p = _sigmoid(h.scores(X))
            raw = -(y * np.log(np.clip(p, _P_FLOOR, None))
                    + (1.0 - y) * np.log(np.clip(1.0 - p, _P_FLOOR, None)))
            g = (p - y)[:, None] * h.weights[None, :]
        active = ((raw > 0.0) & (raw < 1.0)).astype(float)
        return g * active[:, None]

    # clipped squared
    if h.kind == LINEAR:
        raise UnsupportedGradientError("clipped-squared undefined for linear-classifier")
    p = _sigmoid(h.scores(X))
    raw = (y - p) ** 2
    g = (2.0 * (p - y) * p * (1.0 - p))[:, None] * h.weights[None, :]
    active = (raw < 1.0).astype(float)
    return g * active[:, None]


def loss_gradient(loss_fn: LossFn, h: Hypothesis, z: Sample) -> np.ndarray:
    if len(z.features) != h.n_features:
        raise DimensionMismatchError(
            f"expected {h.n_features} features, got {len(z.features)}"
        )
    return gradient_values(loss_fn, h, z.features[None, :], np.array([z.label]))[0]


def curvature_bound(loss_fn: LossFn, h: Hypothesis) -> float:
    """Upper bound on the spectral norm of the loss Hessian in feature space.

    Used by the adversarial inner solver to pick a stable ascent step and to
    decide when the penalized surrogate is concave.
    """
    if loss_fn.kind == ZERO_ONE or h.kind == LOOKUP:
        return 0.0
    if h.kind == LOGISTIC:
        w2 = float(h.weights @ h.weights)
        # d2/ds2 of binary CE is p(1-p) <= 1/4; of (y - p)^2 it stays below 1/2
        return 0.25 * w2 if loss_fn.kind == CROSS_ENTROPY else 0.5 * w2
    # softmax CE: Hessian is W^T diag-adjusted W, crude but safe bound
    return float(np.linalg.norm(h.weights, ord=2) ** 2)
