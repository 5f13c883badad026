"""Closed-form approximate leave-one-out estimators and penalty selection.

For a weighted linear smoother the held-out prediction of sample i can
be recovered from the full fit and the hat-matrix diagonal,
yloo_i = (yhat_i - h_i * y_i) / (1 - h_i), without refitting. For the
sparse experts and gates the smoother is restricted to the active
columns (plus the intercept), which makes the estimator exact at zero
penalty and a cheap approximation elsewhere. Samples whose leverage
reaches one are skipped with a warning and the weighted sum is
rescaled to stay comparable across penalty values.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CmoeError, LeverageWarning
from .linalg import hat_diagonal
from .model import softmax_rows

LEVERAGE_LIMIT = 1.0 - 1e-10


@dataclass
class PressParts:
    """Held-out predictions from one smoother: loo values and leverage."""

    loo: np.ndarray        # held-out prediction per sample (NaN where skipped)
    leverage: np.ndarray
    skipped: np.ndarray    # bool mask of samples with leverage ~ 1


def active_design(X_aug, active_set):
    """Intercept column plus the active feature columns of a design."""
    cols = [0] + [j + 1 for j in active_set]
    return X_aug[:, cols]


def press_loo(y_obs, y_fit, leverage, literal_plus=False):
    """Held-out predictions from fitted values and hat diagonals.

    literal_plus flips the sign on the y_i term, reproducing a printed
    variant of the gate formula; the default (minus) is the form that
    matches brute-force leave-one-out exactly at zero penalty.
    """
    leverage = np.asarray(leverage, dtype=float)
    skipped = leverage >= LEVERAGE_LIMIT
    if np.any(skipped):
        warnings.warn(
            f"{int(skipped.sum())} leave-one-out terms skipped "
            "(leverage reached 1)",
            LeverageWarning,
            stacklevel=2,
        )
    denom = np.where(skipped, 1.0, 1.0 - leverage)
    sign = 1.0 if literal_plus else -1.0
    loo = (y_fit + sign * leverage * y_obs) / denom
    loo = np.where(skipped, np.nan, loo)
    return PressParts(loo=loo, leverage=leverage, skipped=skipped)


def _weighted_press_sum(weights, y_obs, parts):
    keep = ~parts.skipped
    total = float(weights.sum())
    kept = float(weights[keep].sum())
    if kept <= 0:
        raise CmoeError("all leave-one-out terms were skipped")
    raw = float(np.sum(weights[keep] * (y_obs[keep] - parts.loo[keep]) ** 2))
    # rescale so curves with different skip sets stay comparable
    return raw * (total / kept) if kept < total else raw


def expert_press(X_aug, y, weights, expert):
    """PressParts for one expert's weighted fit on its active columns."""
    Xs = active_design(X_aug, expert.active_set)
    h = hat_diagonal(Xs, weights)
    y_fit = X_aug @ expert.theta
    return press_loo(y, y_fit, h)


def loocv_expert(X_aug, y, weights, expert):
    """Weighted held-out squared error of one expert."""
    parts = expert_press(X_aug, y, weights, expert)
    return _weighted_press_sum(np.asarray(weights, dtype=float), y, parts)


def gate_press(X_aug, z, r, v, literal_plus=False):
    """PressParts for one gate's weighted working-response fit."""
    from .model import active_set_of

    Xs = active_design(X_aug, active_set_of(v))
    m = hat_diagonal(Xs, r)
    z_fit = X_aug @ v
    return press_loo(z, z_fit, m, literal_plus=literal_plus)


def loocv_gate(X_aug, z, r, v, literal_plus=False):
    """Weighted held-out squared error of one gate's working fit."""
    parts = gate_press(X_aug, z, r, v, literal_plus=literal_plus)
    return _weighted_press_sum(np.asarray(r, dtype=float), z, parts)


def loocv_model(y, expert_loo, gate_score_loo):
    """Estimated model-level leave-one-out error.

    expert_loo and gate_score_loo hold, per sample and context, the
    held-out expert predictions and held-out gate scores. Held-out
    mixture weights are the softmax of the held-out scores. Samples
    with any skipped (NaN) piece are excluded from the mean.
    """
    y = np.asarray(y, dtype=float)
    expert_loo = np.atleast_2d(np.asarray(expert_loo, dtype=float))
    gate_score_loo = np.atleast_2d(np.asarray(gate_score_loo, dtype=float))
    valid = np.isfinite(expert_loo).all(axis=1) & np.isfinite(
        gate_score_loo
    ).all(axis=1)
    if not np.any(valid):
        raise CmoeError("no sample has a complete set of leave-one-out pieces")
    g = softmax_rows(gate_score_loo[valid])
    mix = np.sum(g * expert_loo[valid], axis=1)
    return float(np.mean((y[valid] - mix) ** 2))


# ----- penalty selection -----------------------------------------------------

@dataclass
class CvCurve:
    """Per-penalty cross-validation estimates with the chosen point."""

    lambdas: np.ndarray       # descending
    cv: np.ndarray            # NaN where evaluation failed
    active_sizes: np.ndarray
    chosen_index: int

    @property
    def chosen_lambda(self):
        return float(self.lambdas[self.chosen_index])

    @property
    def chosen_cv(self):
        return float(self.cv[self.chosen_index])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "cv", "active_size", "chosen"])
            for i in range(len(self.lambdas)):
                writer.writerow(
                    [
                        repr(float(self.lambdas[i])),
                        repr(float(self.cv[i])),
                        int(self.active_sizes[i]),
                        int(i == self.chosen_index),
                    ]
                )


def select_lambda(grid, evaluator):
    """Scan a penalty grid and pick the minimizer of the CV estimate.

    evaluator(lam) -> (cv, active_size); it is called in descending
    penalty order so implementations can warm-start. Failed points are
    recorded as NaN and ignored; ties go to the larger penalty (the
    sparser model).
    """
    lambdas = np.asarray(sorted({float(g) for g in grid}, reverse=True))
    if lambdas.size == 0:
        raise ValueError("penalty grid must be nonempty")
    cv = np.full(lambdas.shape, np.nan)
    sizes = np.zeros(lambdas.shape, dtype=int)
    last_error = None
    for i, lam in enumerate(lambdas):
        try:
            cv[i], sizes[i] = evaluator(float(lam))
        except CmoeError as exc:
            last_error = exc
    if np.all(np.isnan(cv)):
        raise CmoeError(f"every penalty evaluation failed: {last_error}")
    chosen = None
    for i in range(len(lambdas)):
        if np.isnan(cv[i]):
            continue
        if chosen is None or cv[i] < cv[chosen]:
            chosen = i
    return CvCurve(lambdas, cv, sizes, chosen)
