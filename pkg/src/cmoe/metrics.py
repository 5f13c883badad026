"""Accuracy metrics and the paired randomization test for model comparison.

Note on naming: `mae` here is the MAXIMUM absolute error, the quantity
reported alongside RMSE and R^2 in the soft-sensor literature this
package follows. The conventional mean absolute error is available as
`mean_abs_error` to avoid confusion.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, ZeroVariance


def _paired(y, yhat):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape[0] != yhat.shape[0] or y.shape[0] == 0:
        raise LengthMismatch(
            f"got lengths {y.shape[0]} and {yhat.shape[0]}"
        )
    return y, yhat


def rmse(y, yhat):
    """Root mean squared error."""
    y, yhat = _paired(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r2(y, yhat):
    """Coefficient of determination, 1 - SSE/SST with SST about mean(y)."""
    y, yhat = _paired(y, yhat)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst <= 0:
        raise ZeroVariance("R^2 undefined: reference values are constant")
    sse = float(np.sum((y - yhat) ** 2))
    return 1.0 - sse / sst


def mae(y, yhat):
    """Maximum absolute error."""
    y, yhat = _paired(y, yhat)
    return float(np.max(np.abs(y - yhat)))


def mean_abs_error(y, yhat):
    """Mean absolute error (distinct from `mae`, which is the maximum)."""
    y, yhat = _paired(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def randomization_test(err_a, err_b, n_perm=2000, seed=None):
    """Paired sign-flip test on squared residual differences.

    The statistic is mean(err_a^2 - err_b^2); its sign distribution under
    the null (equal error) is sampled by flipping the sign of each paired
    difference. Returns the two-sided p-value with the add-one correction,
    (1 + #{|mean d*| >= |mean d|}) / (1 + n_perm). Deterministic for a
    given seed, and symmetric in its arguments under the same seed.
    """
    err_a, err_b = _paired(err_a, err_b)
    if err_a.shape[0] < 2:
        raise LengthMismatch("need at least two paired residuals")
    if n_perm < 100:
        raise ValueError(f"n_perm must be >= 100, got {n_perm}")
    d = err_a**2 - err_b**2
    stat = abs(d.mean())
    rng = np.random.default_rng(seed)
    flips = rng.integers(0, 2, size=(int(n_perm), d.shape[0])) * 2 - 1
    perm_stats = np.abs((flips * d).mean(axis=1))
    exceed = int(np.sum(perm_stats >= stat))
    return (1 + exceed) / (1 + int(n_perm))


@dataclass
class EvalReport:
    """Per-model metrics, pairwise p-values and optional per-batch tables."""

    models: dict  # name -> {"rmse": .., "r2": .., "mae": ..}
    p_values: dict = field(default_factory=dict)  # name -> p vs reference
    reference: str = None
    per_batch: dict = field(default_factory=dict)  # name -> BatchEvalReport

    def to_csv_rows(self):
        """Rows in the accuracy-table layout: metric rows, model columns."""
        names = list(self.models)
        rows = [["metric"] + names]
        for key, label in (("r2", "R2"), ("rmse", "RMSE"), ("mae", "MAE")):
            rows.append(
                [label] + [_fmt(self.models[n].get(key)) for n in names]
            )
        if self.p_values:
            rows.append(
                ["p-value"]
                + [_fmt(self.p_values.get(n)) for n in names]
            )
        return rows

    def format_table(self):
        rows = self.to_csv_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [
            "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
            for row in rows
        ]
        return "\n".join(lines)


def _fmt(value):
    if value is None:
        return "NA"
    return f"{value:.6g}"
