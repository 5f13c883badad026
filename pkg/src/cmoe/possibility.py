"""Possibility distributions encoding analyst knowledge about contexts.

A context is any analyst-defined operating condition (a phase, a peak
regime, a feedstock). Each context gets a row of possibility values
pi in [0, 1] over the training samples: 1 means "fully possible that
this sample belongs here", 0 means impossible, and intermediate values
encode partial certainty. Rows are built from a small family of shapes
(certain member set with a floor, trapezoid with a floor, all-ones
ignorance) and validated together as a ContextMatrix.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContextNormalizationWarning,
    IndexOutOfRange,
    NoFeasiblePoint,
    ShapeMismatch,
)


@dataclass(frozen=True)
class AlphaCertainSpec:
    """A trusted sample set with certainty alpha.

    Samples in `member_set` get possibility 1; everything else gets the
    floor 1 - alpha. alpha = 1 is the characteristic function of the
    set, alpha = 0 is total ignorance.
    """

    member_set: frozenset
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "member_set", frozenset(self.member_set))
        if not self.member_set:
            raise ValueError("member_set must be nonempty")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class TrapezoidSpec:
    """Trapezoidal possibility over a sample axis with certainty floor beta.

    Ramps up on [a, b], holds 1 on [b, c], ramps down on [c, d], and is
    clamped below at beta everywhere. Positions are sample indices by
    default; any monotone axis (e.g. timestamps) works since the shape
    is evaluated pointwise.
    """

    a: float
    b: float
    c: float
    d: float
    beta: float = 0.0

    def __post_init__(self):
        if not self.a < self.b < self.c < self.d:
            raise ValueError(
                f"breakpoints must satisfy a < b < c < d, got "
                f"({self.a}, {self.b}, {self.c}, {self.d})"
            )
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")


def alpha_certain(spec, n_samples):
    """Possibility row for an AlphaCertainSpec over n_samples samples."""
    idx = np.fromiter(spec.member_set, dtype=int)
    if idx.min() < 0 or idx.max() >= n_samples:
        raise IndexOutOfRange(
            f"member indices must lie in [0, {n_samples}), got "
            f"[{idx.min()}, {idx.max()}]"
        )
    row = np.full(n_samples, 1.0 - spec.alpha)
    row[idx] = 1.0
    return row


def beta_trapezoid(spec, sample_positions):
    """Evaluate a TrapezoidSpec at each sample position."""
    t = np.asarray(sample_positions, dtype=float)
    up = (t - spec.a) / (spec.b - spec.a)
    down = (spec.d - t) / (spec.d - spec.c)
    core = np.minimum(np.minimum(up, 1.0), down)
    return np.maximum(core, spec.beta)


def complete_ignorance(n_samples):
    """All-ones row: every sample is fully possible for this context."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return np.ones(n_samples)


@dataclass
class ContextMatrix:
    """Per-context possibility rows over the training samples.

    pi has shape (n_contexts, n_samples) with every entry in [0, 1].
    A row whose maximum never reaches 1 draws a warning rather than an
    error: a trapezoid plateau can legitimately fall between samples on
    sparse data.
    """

    pi: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        if not self.labels:
            self.labels = [f"context_{c + 1}" for c in range(self.pi.shape[0])]
        if len(self.labels) != self.pi.shape[0]:
            raise ShapeMismatch(
                f"{len(self.labels)} labels for {self.pi.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.pi)):
            raise ValueError("possibility values must be finite")
        if self.pi.min() < 0.0 or self.pi.max() > 1.0:
            raise ValueError("possibility values must lie in [0, 1]")
        row_max = self.pi.max(axis=1)
        for c, m in enumerate(row_max):
            if m < 1.0:
                warnings.warn(
                    f"context '{self.labels[c]}' never reaches possibility 1 "
                    f"(max {m:.3g})",
                    ContextNormalizationWarning,
                    stacklevel=2,
                )

    @property
    def n_contexts(self):
        return self.pi.shape[0]

    @property
    def n_samples(self):
        return self.pi.shape[1]

    def select_samples(self, indices):
        """Matrix restricted to the given sample columns (post row-drop)."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ContextNormalizationWarning)
            return ContextMatrix(self.pi[:, indices], list(self.labels))


def ignorance_contexts(n_contexts, n_samples, labels=None):
    """ContextMatrix of all-ones rows (no knowledge about any context)."""
    pi = np.ones((n_contexts, n_samples))
    return ContextMatrix(pi, labels or [])


def contexts_from_labels(labels, n_contexts, alpha=1.0, context_names=None):
    """Encode per-sample context labels as alpha-certain rows.

    labels[i] = c marks sample i as belonging to context c; each row gets
    possibility 1 on its own samples and 1 - alpha elsewhere.
    """
    labels = np.asarray(labels, dtype=int)
    rows = []
    for c in range(n_contexts):
        members = np.flatnonzero(labels == c)
        spec = AlphaCertainSpec(frozenset(members.tolist()), alpha)
        rows.append(alpha_certain(spec, labels.shape[0]))
    return ContextMatrix(np.vstack(rows), context_names or [])


def consistency_index(gates, ctx):
    """Fraction of samples where each gate stays below its possibility.

    gates has the same (n_contexts, n_samples) shape as ctx.pi; entry
    (c, i) is the trained gate probability of context c at sample i.
    Returns (per_context, overall) where overall is the geometric mean.
    A gate that never exceeds its possibility row scores 1 (complete
    agreement with the supplied knowledge).
    """
    gates = np.asarray(gates, dtype=float)
    if gates.shape != ctx.pi.shape:
        raise ShapeMismatch(
            f"gates shape {gates.shape} != contexts shape {ctx.pi.shape}"
        )
    per_context = (gates <= ctx.pi).mean(axis=1)
    overall = float(np.prod(per_context) ** (1.0 / ctx.n_contexts))
    return per_context, overall


@dataclass
class TuningResult:
    """Certainty sweep outcome: the chosen value plus the full table."""

    selected: float
    table: list  # (certainty, cv_error, consistency) triples in grid order

    def feasible(self, epsilon):
        return [row for row in self.table if row[2] >= epsilon]


def tune_certainty(grid, evaluate, epsilon, n_workers=1):
    """Pick the certainty value with the lowest cross-validation error.

    evaluate(certainty) must return (cv_error, consistency) and be safe
    to call concurrently on read-only data. Among grid points whose
    consistency reaches epsilon the one with minimum cv_error wins; ties
    go to the lower certainty (the more informative distribution).
    Raises NoFeasiblePoint (carrying the table) when nothing qualifies.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("certainty grid must be nonempty")
    if any(g < 0.0 or g > 1.0 for g in grid):
        raise ValueError("certainty values must lie in [0, 1]")
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(evaluate, grid))
    else:
        results = [evaluate(g) for g in grid]
    table = [(g, float(cv), float(ci)) for g, (cv, ci) in zip(grid, results)]
    feasible = [row for row in table if row[2] >= epsilon]
    if not feasible:
        raise NoFeasiblePoint(
            f"no certainty value reached consistency {epsilon}", table=table
        )
    best = min(feasible, key=lambda row: (row[1], row[0]))
    return TuningResult(selected=best[0], table=table)
