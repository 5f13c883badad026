"""CSV ingestion, auto-scaling, lag features and batch-wise evaluation.

Datasets keep an `index_map` back to the original sample numbering so
that possibility rows, which analysts specify against original sample
indices, can be re-aligned after rows are dropped (missing targets,
lag warm-up).
"""

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .errors import (
    DelayTooLarge,
    MissingColumn,
    NonNumericCell,
    ShapeMismatch,
    SingleBatch,
    StateError,
    ZeroVariance,
    ZeroVarianceFeature,
)

log = logging.getLogger("cmoe.data")


@dataclass
class Scaler:
    """Per-feature and target standardization parameters (train-derived)."""

    feature_names: list
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float

    def transform_features(self, X):
        return (np.asarray(X, dtype=float) - self.feature_means) / self.feature_stds

    def invert_features(self, X):
        return np.asarray(X, dtype=float) * self.feature_stds + self.feature_means

    def transform_target(self, y):
        return (np.asarray(y, dtype=float) - self.target_mean) / self.target_std

    def invert_target(self, y):
        return np.asarray(y, dtype=float) * self.target_std + self.target_mean


@dataclass
class Dataset:
    """A design matrix with target and optional batch/order metadata."""

    X: np.ndarray
    y: np.ndarray
    feature_names: list
    batch_ids: np.ndarray = None
    timestamps: np.ndarray = None
    scaled: bool = False
    scaler: Scaler = None
    index_map: np.ndarray = None  # original sample index per row
    dropped_rows: int = 0

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        if self.X.shape[0] != self.y.shape[0]:
            raise ShapeMismatch(
                f"{self.X.shape[0]} feature rows vs {self.y.shape[0]} targets"
            )
        if len(self.feature_names) != self.X.shape[1]:
            raise ShapeMismatch(
                f"{len(self.feature_names)} names for {self.X.shape[1]} columns"
            )
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains NaN/Inf after ingestion")
        if self.index_map is None:
            self.index_map = np.arange(self.X.shape[0])
        else:
            self.index_map = np.asarray(self.index_map, dtype=int)
        if self.batch_ids is not None:
            self.batch_ids = np.asarray(self.batch_ids)
            if self.batch_ids.shape[0] != self.n:
                raise ShapeMismatch("batch ids must cover every sample")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, indices):
        """Row subset preserving metadata and the original index map."""
        indices = np.asarray(indices)
        if indices.dtype == bool:
            indices = np.flatnonzero(indices)
        return replace(
            self,
            X=self.X[indices],
            y=self.y[indices],
            batch_ids=None if self.batch_ids is None else self.batch_ids[indices],
            timestamps=None if self.timestamps is None else self.timestamps[indices],
            index_map=self.index_map[indices],
        )


def load_csv(path, target, features=None, batch_column=None, delimiter=","):
    """Read a headered CSV into a Dataset.

    Rows with an empty/missing target are dropped (counted in
    `dropped_rows`); a non-numeric feature cell is an error naming the
    offending file line and column. `features=None` takes every column
    except the target and batch columns.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        if target not in header:
            raise MissingColumn(f"{path}: target column '{target}' not found")
        if batch_column is not None and batch_column not in header:
            raise MissingColumn(f"{path}: batch column '{batch_column}' not found")
        if features is None:
            features = [
                h for h in header if h != target and h != batch_column
            ]
        for name in features:
            if name not in header:
                raise MissingColumn(f"{path}: feature column '{name}' not found")
        t_idx = header.index(target)
        f_idx = [header.index(name) for name in features]
        b_idx = header.index(batch_column) if batch_column else None

        rows, targets, batches = [], [], []
        dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            t_cell = row[t_idx].strip() if t_idx < len(row) else ""
            if t_cell == "" or t_cell.lower() in ("nan", "na"):
                dropped += 1
                continue
            try:
                t_val = float(t_cell)
            except ValueError:
                raise NonNumericCell(
                    f"{path}:{line_no}: column '{target}' value {t_cell!r}"
                )
            if not np.isfinite(t_val):
                dropped += 1
                continue
            feats = []
            for name, j in zip(features, f_idx):
                cell = row[j].strip() if j < len(row) else ""
                try:
                    val = float(cell)
                except ValueError:
                    raise NonNumericCell(
                        f"{path}:{line_no}: column '{name}' value {cell!r}"
                    )
                if not np.isfinite(val):
                    raise NonNumericCell(
                        f"{path}:{line_no}: column '{name}' is not finite"
                    )
                feats.append(val)
            rows.append(feats)
            targets.append(t_val)
            if b_idx is not None:
                batches.append(row[b_idx].strip())
    if not rows:
        raise MissingColumn(f"{path}: no usable data rows")
    if dropped:
        log.info("%s: dropped %d rows with missing target", path, dropped)
    return Dataset(
        X=np.asarray(rows, dtype=float),
        y=np.asarray(targets, dtype=float),
        feature_names=list(features),
        batch_ids=np.asarray(batches) if batches else None,
        dropped_rows=dropped,
    )


# ----- auto-scaling ---------------------------------------------------------

def autoscale_fit(train):
    """Derive standardization parameters (ddof=1) from training data."""
    if train.n < 2:
        raise ZeroVariance("need at least two samples to estimate scale")
    stds = train.X.std(axis=0, ddof=1)
    for j, s in enumerate(stds):
        if s <= 0:
            raise ZeroVarianceFeature(
                f"feature '{train.feature_names[j]}' is constant on training data"
            )
    y_std = train.y.std(ddof=1)
    if y_std <= 0:
        raise ZeroVariance("target is constant on training data")
    return Scaler(
        feature_names=list(train.feature_names),
        feature_means=train.X.mean(axis=0),
        feature_stds=stds,
        target_mean=float(train.y.mean()),
        target_std=float(y_std),
    )


def autoscale_apply(scaler, data):
    """Standardize a dataset with stored training parameters."""
    if data.scaled:
        raise StateError("dataset is already scaled")
    if list(data.feature_names) != list(scaler.feature_names):
        raise ShapeMismatch("dataset features do not match scaler features")
    return replace(
        data,
        X=scaler.transform_features(data.X),
        y=scaler.transform_target(data.y),
        scaled=True,
        scaler=scaler,
    )


def autoscale_invert(scaler, data):
    """Map a scaled dataset back to original units."""
    if not data.scaled:
        raise StateError("dataset is not scaled")
    return replace(
        data,
        X=scaler.invert_features(data.X),
        y=scaler.invert_target(data.y),
        scaled=False,
        scaler=None,
    )


# ----- lag features ---------------------------------------------------------

@dataclass
class LagSpec:
    """Per-variable sample delays; a plain list applies to all variables."""

    delays: object  # list[int] or dict[str, list[int]]

    def resolve(self, feature_names):
        """Ordered (variable, delay) pairs, validating the delay lists."""
        if isinstance(self.delays, dict):
            mapping = {name: list(ds) for name, ds in self.delays.items()}
            unknown = set(mapping) - set(feature_names)
            if unknown:
                raise MissingColumn(f"lag spec names unknown variables: {unknown}")
        else:
            mapping = {name: list(self.delays) for name in feature_names}
        pairs = []
        for name in feature_names:
            delays = mapping.get(name, [])
            if any(d < 0 for d in delays):
                raise ValueError(f"negative delay for '{name}'")
            if sorted(set(delays)) != delays:
                raise ValueError(f"delays for '{name}' must be sorted and unique")
            pairs.extend((name, d) for d in delays)
        return pairs


def lag_features(data, spec):
    """Expand each variable into delayed copies; drops warm-up rows.

    Feature (v, delta) at output row i equals variable v at input row
    i - delta (in the pre-drop numbering); the first max-delay rows are
    removed and the index map is advanced accordingly so context rows
    can be re-aligned.
    """
    pairs = spec.resolve(data.feature_names)
    if not pairs:
        raise ValueError("lag spec selects no features")
    max_delay = max(d for _, d in pairs)
    if max_delay >= data.n:
        raise DelayTooLarge(
            f"max delay {max_delay} leaves no rows out of {data.n}"
        )
    n_out = data.n - max_delay
    cols, names = [], []
    col_of = {name: j for j, name in enumerate(data.feature_names)}
    for name, delay in pairs:
        j = col_of[name]
        start = max_delay - delay
        cols.append(data.X[start:start + n_out, j])
        names.append(f"{name}_lag{delay}")
    keep = slice(max_delay, data.n)
    return replace(
        data,
        X=np.column_stack(cols),
        y=data.y[keep],
        feature_names=names,
        batch_ids=None if data.batch_ids is None else data.batch_ids[keep],
        timestamps=None if data.timestamps is None else data.timestamps[keep],
        index_map=data.index_map[keep],
    )


def align_contexts(ctx, data):
    """Restrict context rows to the samples surviving in `data`.

    The context matrix must cover the original sample numbering that
    `data.index_map` refers to.
    """
    if ctx.n_samples == data.n and np.array_equal(
        data.index_map, np.arange(data.n)
    ):
        return ctx
    if data.index_map.max() >= ctx.n_samples:
        raise ShapeMismatch(
            f"context matrix covers {ctx.n_samples} samples but data refers "
            f"to original index {data.index_map.max()}"
        )
    return ctx.select_samples(data.index_map)


# ----- leave-one-batch-out --------------------------------------------------

@dataclass
class FoldResult:
    batch: object
    n_test: int
    rmse: float = None
    r2: float = None
    mae: float = None
    failed: bool = False
    error: str = None


@dataclass
class BatchEvalReport:
    """Per-fold metrics plus fold-averaged and pooled summaries."""

    folds: list
    averaged: dict
    pooled: dict
    y_true: np.ndarray
    y_pred: np.ndarray

    @property
    def n_folds(self):
        return len(self.folds)

    @property
    def n_failed(self):
        return sum(f.failed for f in self.folds)


def leave_one_batch_out(data, fit_eval, n_workers=1):
    """Hold out each batch in turn; fit on the rest and score it.

    fit_eval(train, test) -> predicted targets for `test` in original
    units. Folds are independent and may run on several workers. A fold
    that raises is marked failed and excluded from the aggregates with
    a warning.
    """
    if data.batch_ids is None:
        raise SingleBatch("dataset has no batch ids")
    batches = list(dict.fromkeys(data.batch_ids.tolist()))
    if len(batches) < 2:
        raise SingleBatch(f"need at least 2 batches, got {len(batches)}")

    def run_fold(batch):
        test_mask = data.batch_ids == batch
        train = data.subset(~test_mask)
        test = data.subset(test_mask)
        try:
            y_pred = np.asarray(fit_eval(train, test), dtype=float)
            if y_pred.shape != test.y.shape:
                raise ShapeMismatch(
                    f"fold '{batch}': predictions shape {y_pred.shape} "
                    f"vs targets {test.y.shape}"
                )
        except Exception as exc:  # fold failure is non-fatal by contract
            warnings.warn(f"fold '{batch}' failed: {exc}", stacklevel=2)
            return FoldResult(batch, int(test_mask.sum()), failed=True,
                              error=str(exc)), None, None
        try:
            r2 = metrics.r2(test.y, y_pred)
        except ZeroVariance:
            r2 = None
        fold = FoldResult(
            batch,
            int(test_mask.sum()),
            rmse=metrics.rmse(test.y, y_pred),
            r2=r2,
            mae=metrics.mae(test.y, y_pred),
        )
        return fold, test.y, y_pred

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_fold, batches))
    else:
        results = [run_fold(b) for b in batches]

    folds = [r[0] for r in results]
    ok = [r for r in results if not r[0].failed]
    if not ok:
        raise SingleBatch("every fold failed")
    y_true = np.concatenate([r[1] for r in ok])
    y_pred = np.concatenate([r[2] for r in ok])
    averaged = {
        "rmse": float(np.mean([f.rmse for f, *_ in results if not f.failed])),
        "r2": _mean_or_none([f.r2 for f, *_ in results if not f.failed]),
        "mae": float(np.mean([f.mae for f, *_ in results if not f.failed])),
    }
    try:
        pooled_r2 = metrics.r2(y_true, y_pred)
    except ZeroVariance:
        pooled_r2 = None
    pooled = {
        "rmse": metrics.rmse(y_true, y_pred),
        "r2": pooled_r2,
        "mae": metrics.mae(y_true, y_pred),
    }
    return BatchEvalReport(folds, averaged, pooled, y_true, y_pred)


def _mean_or_none(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None
