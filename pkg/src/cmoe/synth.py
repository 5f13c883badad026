"""Ground-truth synthetic multimode-process generator.

Produces piecewise-linear regression data: a regime schedule assigns
each sample to a context, features are Gaussian with an optional
per-context mean shift (shifted regimes are what make gate boundaries
learnable from the features alone), and the target follows that
context's sparse linear model plus Gaussian noise. The generator also
emits the matching exact possibility rows, optionally blurred ones
(trapezoids widened across regime boundaries), and the true model
skeleton, so recovery tests have a full oracle.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ContextNormalizationWarning
from .model import CmoeModel, ExpertModel, GateModel
from .possibility import ContextMatrix


@dataclass
class SynthContext:
    """One regime's generating model."""

    coef: np.ndarray          # length d sparse coefficient vector
    intercept: float = 0.0
    noise_std: float = 0.1
    mean_shift: np.ndarray = None  # per-feature mean, default zeros

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        if self.mean_shift is not None:
            self.mean_shift = np.asarray(self.mean_shift, dtype=float)

    @property
    def support(self):
        return tuple(int(j) for j in np.flatnonzero(self.coef != 0.0))


@dataclass
class SynthSpec:
    """Regime schedule plus per-context models.

    schedule lists (context_index, n_samples) blocks that must cover
    all n_samples. blur_width > 0 additionally produces softened
    possibility rows whose boundaries ramp over that many samples on
    each side of every regime change.
    """

    n_samples: int
    contexts: list
    schedule: list
    seed: int = 0
    blur_width: int = 0
    batches: int = None
    context_names: list = field(default_factory=list)

    def __post_init__(self):
        total = sum(n for _, n in self.schedule)
        if total != self.n_samples:
            raise ValueError(
                f"schedule covers {total} samples, expected {self.n_samples}"
            )
        dims = {len(c.coef) for c in self.contexts}
        if len(dims) != 1:
            raise ValueError("all contexts must share the feature dimension")
        for c_idx, _ in self.schedule:
            if not 0 <= c_idx < len(self.contexts):
                raise ValueError(f"schedule references unknown context {c_idx}")
        if not self.context_names:
            self.context_names = [
                f"regime_{c + 1}" for c in range(len(self.contexts))
            ]

    @property
    def n_features(self):
        return len(self.contexts[0].coef)

    @property
    def n_contexts(self):
        return len(self.contexts)


@dataclass
class SynthResult:
    dataset: Dataset
    labels: np.ndarray             # true context index per sample
    contexts_exact: ContextMatrix  # characteristic rows of the schedule
    contexts_blurred: ContextMatrix  # None unless blur_width > 0
    model: CmoeModel               # true coefficients, zero gates


def generate(spec):
    """Draw one dataset from the spec; byte-identical for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    d = spec.n_features
    labels = np.concatenate(
        [np.full(n, c, dtype=int) for c, n in spec.schedule]
    )
    X = rng.standard_normal((spec.n_samples, d))
    for c, ctx in enumerate(spec.contexts):
        if ctx.mean_shift is not None:
            X[labels == c] += ctx.mean_shift
    y = np.empty(spec.n_samples)
    for c, ctx in enumerate(spec.contexts):
        mask = labels == c
        y[mask] = ctx.intercept + X[mask] @ ctx.coef
        if ctx.noise_std > 0:
            y[mask] += ctx.noise_std * rng.standard_normal(int(mask.sum()))
    batch_ids = None
    if spec.batches:
        edges = np.linspace(0, spec.n_samples, spec.batches + 1).astype(int)
        batch_ids = np.empty(spec.n_samples, dtype=object)
        for b in range(spec.batches):
            batch_ids[edges[b]:edges[b + 1]] = f"batch{b + 1:03d}"
    dataset = Dataset(
        X=X,
        y=y,
        feature_names=[f"x{j + 1}" for j in range(d)],
        batch_ids=batch_ids,
    )
    exact = _exact_contexts(labels, spec)
    blurred = _blurred_contexts(labels, spec) if spec.blur_width > 0 else None
    model = CmoeModel(
        experts=[
            ExpertModel(
                theta=np.concatenate([[c.intercept], c.coef]),
                sigma2=max(c.noise_std**2, 1e-12),
            )
            for c in spec.contexts
        ],
        gates=GateModel(np.zeros((spec.n_contexts, d + 1))),
        context_labels=list(spec.context_names),
        meta={"generator_seed": spec.seed},
    )
    return SynthResult(dataset, labels, exact, blurred, model)


def _exact_contexts(labels, spec):
    pi = np.zeros((spec.n_contexts, spec.n_samples))
    pi[labels, np.arange(spec.n_samples)] = 1.0
    with warnings.catch_warnings():
        # a context absent from the schedule is legal for the generator
        warnings.simplefilter("ignore", ContextNormalizationWarning)
        return ContextMatrix(pi, list(spec.context_names))


def _blurred_contexts(labels, spec):
    """Soften regime boundaries: linear ramps of blur_width samples."""
    n = spec.n_samples
    w = spec.blur_width
    pi = np.zeros((spec.n_contexts, n))
    for c in range(spec.n_contexts):
        member = (labels == c).astype(float)
        soft = member.copy()
        for i in range(n):
            if member[i] == 1.0:
                continue
            lo = max(0, i - w)
            hi = min(n, i + w + 1)
            near = np.flatnonzero(member[lo:hi] == 1.0)
            if near.size:
                dist = np.min(np.abs(near + lo - i))
                soft[i] = max(0.0, 1.0 - dist / (w + 1))
        pi[c] = soft
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ContextNormalizationWarning)
        return ContextMatrix(pi, list(spec.context_names))


def two_regime_spec(n_samples=1000, n_features=10, sparsity=3, noise_std=0.1,
                    mean_gap=3.0, seed=0, batches=None, blur_width=0):
    """Convenience spec: two block regimes with disjoint sparse supports.

    Regime means sit mean_gap apart along the last feature axis (a pure
    regime indicator outside both supports) so a linear gate can tell
    them apart; supports are the first `sparsity` features for regime
    one and the next `sparsity` for regime two.
    """
    if 2 * sparsity >= n_features:
        raise ValueError("need n_features > 2 * sparsity")
    rng = np.random.default_rng(seed + 1_000_003)
    coef1 = np.zeros(n_features)
    coef2 = np.zeros(n_features)
    coef1[:sparsity] = rng.uniform(1.0, 2.0, sparsity) * rng.choice(
        [-1.0, 1.0], sparsity
    )
    coef2[sparsity:2 * sparsity] = rng.uniform(1.0, 2.0, sparsity) * rng.choice(
        [-1.0, 1.0], sparsity
    )
    shift = np.zeros(n_features)
    shift[-1] = mean_gap / 2.0
    half = n_samples // 2
    return SynthSpec(
        n_samples=n_samples,
        contexts=[
            SynthContext(coef1, intercept=0.5, noise_std=noise_std,
                         mean_shift=-shift),
            SynthContext(coef2, intercept=-0.5, noise_std=noise_std,
                         mean_shift=shift),
        ],
        schedule=[(0, half), (1, n_samples - half)],
        seed=seed,
        batches=batches,
        blur_width=blur_width,
    )
