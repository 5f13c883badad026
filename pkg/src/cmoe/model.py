"""The fitted mixture model: sparse linear experts behind softmax gates.

Coefficient layout convention used everywhere in the package: vectors
have length d + 1 with the intercept FIRST, matching a design matrix
augmented with a leading column of ones. The intercept is never
penalized. Prediction runs in auto-scaled space and is mapped back to
original target units; the per-context contributions g_c * yhat_c are
reported in scaled units, where they sum to the scaled prediction.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FormatVersionMismatch

FORMAT_VERSION = 1


def add_intercept(X):
    """Prepend a column of ones to a feature matrix."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected 2-D feature matrix, got {X.shape}")
    return np.hstack([np.ones((X.shape[0], 1)), X])


def softmax_rows(scores):
    """Row-wise softmax with max-subtraction; never returns NaN/Inf."""
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def active_set_of(theta):
    """Feature indices (0-based, intercept excluded) with nonzero weight."""
    return tuple(int(j) for j in np.flatnonzero(theta[1:] != 0.0))


@dataclass
class ExpertModel:
    """One context's linear predictor and noise variance."""

    theta: np.ndarray  # length d + 1, intercept first
    sigma2: float
    active_set: tuple = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        derived = active_set_of(self.theta)
        if self.active_set is None:
            self.active_set = derived
        elif tuple(self.active_set) != derived:
            raise ValueError("active_set inconsistent with theta nonzeros")

    def mean(self, x_aug):
        return float(np.dot(x_aug, self.theta))


@dataclass
class GateModel:
    """Softmax gate coefficients, one length-(d+1) vector per context."""

    v: np.ndarray  # shape (C, d + 1), intercept first

    def __post_init__(self):
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))

    @property
    def active_sets(self):
        return [active_set_of(vc) for vc in self.v]


@dataclass
class CmoeModel:
    """Experts, gates, scaling parameters and training provenance."""

    experts: list
    gates: GateModel
    context_labels: list
    scaler: object = None  # data.Scaler or None for identity scaling
    lambdas: list = field(default_factory=list)  # (lambda_e, lambda_g) per context
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ValueError("need at least one expert")
        if self.gates.v.shape[0] != len(self.experts):
            raise ValueError(
                f"{len(self.experts)} experts but {self.gates.v.shape[0]} gates"
            )
        if len(self.context_labels) != len(self.experts):
            raise ValueError("one label per context required")
        dims = {e.theta.shape[0] for e in self.experts} | {self.gates.v.shape[1]}
        if len(dims) != 1:
            raise ValueError(f"inconsistent coefficient lengths: {dims}")

    @property
    def n_contexts(self):
        return len(self.experts)

    @property
    def n_features(self):
        return self.experts[0].theta.shape[0] - 1

    # ----- scaled-space computations -------------------------------------
    def _check_dim(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.shape[0] != self.n_features:
            raise DimensionMismatch(
                f"expected feature vector of length {self.n_features}, "
                f"got shape {x.shape}"
            )
        return x

    def gate_probabilities(self, x):
        """Mixture proportions at one (scaled) feature vector; sums to 1."""
        x = self._check_dim(x)
        x_aug = np.concatenate([[1.0], x])
        g = softmax_rows(self.gates.v @ x_aug)
        return g / g.sum()

    def expert_mean(self, c, x):
        """Expert c's prediction at one (scaled) feature vector."""
        x = self._check_dim(x)
        return self.experts[c].mean(np.concatenate([[1.0], x]))

    def gate_matrix(self, X_aug):
        """Gate probabilities for an augmented design matrix, shape (N, C)."""
        return softmax_rows(X_aug @ self.gates.v.T)

    def expert_matrix(self, X_aug):
        """All experts' predictions for an augmented design, shape (N, C)."""
        return X_aug @ np.column_stack([e.theta for e in self.experts])

    # ----- original-unit prediction ---------------------------------------
    def predict(self, x_raw):
        """Predict one sample from raw features.

        Returns (y_hat, contributions): y_hat in original target units,
        contributions per context in scaled units (they sum to the
        scaled prediction).
        """
        y, h, _ = self.predict_batch(np.asarray(x_raw, dtype=float)[None, :])
        return float(y[0]), h[0]

    def predict_batch(self, X_raw):
        """Predict many samples from raw features.

        Returns (y_hat, contributions, gates) with shapes (N,), (N, C),
        (N, C). y_hat is in original units; contributions are scaled.
        """
        X_raw = np.asarray(X_raw, dtype=float)
        if X_raw.ndim != 2 or X_raw.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"expected (N, {self.n_features}) features, got {X_raw.shape}"
            )
        if self.scaler is not None:
            X = self.scaler.transform_features(X_raw)
        else:
            X = X_raw
        X_aug = add_intercept(X)
        gates = self.gate_matrix(X_aug)
        means = self.expert_matrix(X_aug)
        contributions = gates * means
        y_scaled = contributions.sum(axis=1)
        if self.scaler is not None:
            y = self.scaler.invert_target(y_scaled)
        else:
            y = y_scaled
        return y, contributions, gates


# ----- persistence ---------------------------------------------------------

def _scaler_to_dict(scaler):
    if scaler is None:
        return None
    return {
        "feature_names": list(scaler.feature_names),
        "feature_means": scaler.feature_means.tolist(),
        "feature_stds": scaler.feature_stds.tolist(),
        "target_mean": scaler.target_mean,
        "target_std": scaler.target_std,
    }


def _scaler_from_dict(d):
    if d is None:
        return None
    from .data import Scaler

    return Scaler(
        feature_names=list(d["feature_names"]),
        feature_means=np.asarray(d["feature_means"], dtype=float),
        feature_stds=np.asarray(d["feature_stds"], dtype=float),
        target_mean=float(d["target_mean"]),
        target_std=float(d["target_std"]),
    )


def save(model, path):
    """Write a model as a versioned JSON document (full float precision)."""
    doc = {
        "format_version": FORMAT_VERSION,
        "context_labels": list(model.context_labels),
        "scaler": _scaler_to_dict(model.scaler),
        "experts": [
            {"theta": e.theta.tolist(), "sigma2": e.sigma2} for e in model.experts
        ],
        "gates": {"v": model.gates.v.tolist()},
        "lambdas": [list(pair) for pair in model.lambdas],
        "meta": model.meta,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load(path):
    """Read a model written by save(); never returns a partial model."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatVersionMismatch(f"not a parseable model file: {exc}")
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FormatVersionMismatch("missing format_version field")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"unknown format version {doc['format_version']!r}"
        )
    try:
        experts = [
            ExpertModel(np.asarray(e["theta"], dtype=float), float(e["sigma2"]))
            for e in doc["experts"]
        ]
        gates = GateModel(np.asarray(doc["gates"]["v"], dtype=float))
        model = CmoeModel(
            experts=experts,
            gates=gates,
            context_labels=list(doc["context_labels"]),
            scaler=_scaler_from_dict(doc["scaler"]),
            lambdas=[tuple(pair) for pair in doc.get("lambdas", [])],
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError) as exc:
        raise FormatVersionMismatch(f"malformed model document: {exc}")
    return model
