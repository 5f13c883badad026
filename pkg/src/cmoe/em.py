"""Possibility-weighted EM training of the mixture.

One EM iteration: responsibilities are computed with the possibility
values folded in multiplicatively (a context with zero possibility for
a sample takes exactly zero responsibility for it); each expert then
solves a weighted LASSO by coordinate descent with weights pi * gamma;
the gates take damped Newton steps on their concave objective, each
step reformulated as a weighted LASSO on working responses; penalties
are re-selected every M-step from the closed-form leave-one-out
estimators. The loop stops once the estimated model-level
leave-one-out error has not improved for `n_it` consecutive
iterations, and the model snapshot from the best iteration is
returned.
"""

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import data as data_mod
from .errors import (
    AllZeroWeights,
    DegenerateSample,
    LeverageWarning,
    NonConvergenceWarning,
    ShapeMismatch,
    SingularMatrix,
)
from .model import CmoeModel, ExpertModel, GateModel, active_set_of, add_intercept
from .model_selection import (
    expert_press,
    gate_press,
    loocv_expert,
    loocv_gate,
    loocv_model,
    select_lambda,
)
from .possibility import consistency_index

log = logging.getLogger("cmoe.em")

SIGMA2_FLOOR = 1e-8


@dataclass
class TrainConfig:
    """Training knobs with the defaults used throughout.

    eta is the damping factor of the gate Newton step (a full step does
    not guarantee convergence, so it stays well below 1); xi is the
    guard band around gate probabilities 0 and 1 inside which working
    responses are frozen and curvature weights pinned, preventing
    coefficient blow-up on saturated samples.
    """

    lambda_grid_experts: list = None  # explicit grid, or None for automatic
    lambda_grid_gates: list = None
    n_lambda: int = 30
    lambda_min_ratio: float = 1e-3
    eta: float = 0.1
    xi: float = 1e-3
    n_it: int = 6
    max_em_iters: int = 50
    cgd_tol: float = 1e-6
    max_cgd_cycles: int = 1000
    max_newton_cycles: int = 10
    freeze_lambda_after_first: bool = False
    paper_literal_gate_press: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if not 0.0 < self.xi < 0.5:
            raise ValueError(f"xi must be in (0, 0.5), got {self.xi}")
        if self.n_it < 1:
            raise ValueError(f"n_it must be >= 1, got {self.n_it}")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be >= 1")
        if self.cgd_tol <= 0:
            raise ValueError("cgd_tol must be positive")
        if self.max_newton_cycles < 1:
            raise ValueError("max_newton_cycles must be >= 1")
        if self.n_lambda < 1:
            raise ValueError("n_lambda must be >= 1")


@dataclass
class Responsibilities:
    """Posterior context assignments and their possibility-weighted mass."""

    gamma: np.ndarray  # (N, C), rows sum to 1
    phi: np.ndarray    # (N,), sum_c pi * gamma


@dataclass
class FitReport:
    """Trace and diagnostics of one EM run."""

    cv_trace: list = field(default_factory=list)
    wll_trace: list = field(default_factory=list)
    selected_iteration: int = 0
    n_iterations: int = 0
    stopped_early: bool = False
    lambdas: list = field(default_factory=list)
    consistency_per_context: np.ndarray = None
    consistency_overall: float = None
    responsibilities: Responsibilities = None
    nonconverged_experts: int = 0
    nonconverged_gates: int = 0
    skipped_loo_terms: int = 0


# ----- coordinate gradient descent core --------------------------------------

def soft_threshold(z, eta):
    """sign(z) * max(|z| - eta, 0), the one-dimensional LASSO shrinkage."""
    return np.sign(z) * np.maximum(np.abs(z) - eta, 0.0)


def _cgd_lasso(X_aug, y, w, lam, beta0, tol, max_cycles):
    """Weighted LASSO by cyclic coordinate descent on an augmented design.

    Minimizes 0.5 * sum_i w_i (y_i - x_i' beta)^2 + lam * sum_{j>=1} |beta_j|;
    the leading (intercept) coordinate is unpenalized. Returns
    (beta, converged); convergence is max coefficient change per full
    cycle below tol.
    """
    n, p = X_aug.shape
    beta = np.array(beta0, dtype=float, copy=True)
    wX = w[:, None] * X_aug
    col_sq = np.einsum("ij,ij->j", wX, X_aug)  # sum_i w_i x_ij^2
    resid = y - X_aug @ beta
    converged = False
    for _ in range(max_cycles):
        max_delta = 0.0
        for j in range(p):
            den = col_sq[j]
            if den <= 0.0:
                continue
            bj = beta[j]
            rho = wX[:, j] @ resid + den * bj
            new = rho / den if j == 0 else soft_threshold(rho, lam) / den
            if new != bj:
                resid += X_aug[:, j] * (bj - new)
                beta[j] = new
                delta = abs(new - bj)
                if delta > max_delta:
                    max_delta = delta
        if max_delta < tol:
            converged = True
            break
    return beta, converged


def lasso_lambda_max(X_aug, y, w):
    """Smallest penalty at which every non-intercept coefficient is zero.

    With an unpenalized intercept the zero solution pins the intercept
    at the weighted target mean, so the threshold is taken on the
    weighted correlations with the centered target.
    """
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("weights sum to zero")
    resid0 = y - (w @ y) / total
    grad = X_aug[:, 1:].T @ (w * resid0)
    return float(np.max(np.abs(grad))) if grad.size else 0.0


def lambda_grid(lam_max, n_points=30, min_ratio=1e-3):
    """Descending log-spaced penalties from lam_max down, plus zero."""
    if lam_max <= 0.0 or not np.isfinite(lam_max):
        return np.array([0.0])
    grid = np.geomspace(lam_max, lam_max * min_ratio, n_points)
    return np.append(grid, 0.0)


# ----- expert updates ---------------------------------------------------------

def m_step_expert(X_aug, y, weights, lam, theta_init=None,
                  tol=1e-6, max_cycles=1000):
    """One expert's penalized weighted fit at a fixed penalty.

    weights are the per-sample pi * gamma products; samples with zero
    possibility therefore contribute exactly nothing to either the
    numerator or denominator of any coordinate update. The noise
    variance is the weighted mean squared residual, floored to keep
    the likelihood defined.
    """
    X_aug = np.asarray(X_aug, dtype=float)
    y = np.asarray(y, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if weights.sum() <= 0:
        raise AllZeroWeights("expert update requested with all-zero weights")
    if theta_init is None:
        theta_init = np.zeros(X_aug.shape[1])
    theta, converged = _cgd_lasso(X_aug, y, weights, lam, theta_init,
                                  tol, max_cycles)
    if not converged:
        warnings.warn(
            f"expert coordinate descent hit the {max_cycles}-cycle cap",
            NonConvergenceWarning,
            stacklevel=2,
        )
    resid = y - X_aug @ theta
    sigma2 = float(max((weights @ resid**2) / weights.sum(), SIGMA2_FLOOR))
    return ExpertModel(theta=theta, sigma2=sigma2)


def _expert_path(X_aug, y, weights, grid, theta_init, config):
    """Scan the penalty grid for one expert; returns (curve, fits, flags)."""
    fits = []
    state = {"warm": np.array(theta_init, dtype=float), "nonconv": 0}

    def evaluator(lam):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NonConvergenceWarning)
            expert = m_step_expert(
                X_aug, y, weights, lam, theta_init=state["warm"],
                tol=config.cgd_tol, max_cycles=config.max_cgd_cycles,
            )
            state["nonconv"] += sum(
                issubclass(w.category, NonConvergenceWarning) for w in caught
            )
        state["warm"] = expert.theta
        fits.append(expert)
        cv = loocv_expert(X_aug, y, weights, expert)
        return cv, len(expert.active_set)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LeverageWarning)
        curve = select_lambda(grid, evaluator)
    return curve, fits, state["nonconv"]


# ----- responsibilities -------------------------------------------------------

def _log_gauss(y, mean, sigma2):
    return -0.5 * np.log(2.0 * np.pi * sigma2) - (y - mean) ** 2 / (2.0 * sigma2)


def _log_softmax_rows(scores):
    return scores - logsumexp(scores, axis=1, keepdims=True)


def _stack_params(experts, gates):
    theta = np.vstack([e.theta for e in experts])
    sigma2 = np.array([e.sigma2 for e in experts])
    return theta, sigma2, gates.v


def _e_step_arrays(X_aug, y, theta, sigma2, V, pi_nc):
    log_g = _log_softmax_rows(X_aug @ V.T)
    log_p = _log_gauss(y[:, None], X_aug @ theta.T, sigma2[None, :])
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi_nc)
    log_num = log_pi + log_g + log_p
    norm = logsumexp(log_num, axis=1, keepdims=True)
    gamma = np.exp(log_num - norm)
    phi = np.sum(pi_nc * gamma, axis=1)
    return Responsibilities(gamma=gamma, phi=phi)


def e_step(model, dataset, ctx):
    """Responsibilities of every context for every sample.

    gamma_ci is proportional to pi_ci * g_ci * N(y_i | expert c), so a
    zero possibility forces a zero responsibility exactly. The dataset
    must be in the same (scaled) space as the model coefficients.
    """
    pi_nc = _validated_pi(ctx, dataset.n)
    X_aug = add_intercept(dataset.X)
    theta, sigma2, V = _stack_params(model.experts, model.gates)
    if X_aug.shape[1] != theta.shape[1]:
        raise ShapeMismatch(
            f"data has {X_aug.shape[1] - 1} features, model expects "
            f"{theta.shape[1] - 1}"
        )
    return _e_step_arrays(X_aug, dataset.y, theta, sigma2, V, pi_nc)


def _validated_pi(ctx, n_samples):
    if ctx.n_samples != n_samples:
        raise ShapeMismatch(
            f"context matrix covers {ctx.n_samples} samples, data has "
            f"{n_samples}"
        )
    pi_nc = ctx.pi.T
    dead = np.flatnonzero(pi_nc.sum(axis=1) == 0.0)
    if dead.size:
        raise DegenerateSample(
            f"samples {dead[:5].tolist()} have zero possibility under every "
            "context"
        )
    return pi_nc


def weighted_log_likelihood(X_aug, y, experts, gates, pi_nc):
    """Possibility-weighted log-likelihood of the current parameters.

    Per sample this is log sum_c (g_c * p_c)^pi_c, evaluated in log
    space; an impossible context (pi = 0) contributes a factor of one.
    """
    theta, sigma2, V = _stack_params(experts, gates)
    log_g = _log_softmax_rows(X_aug @ V.T)
    log_p = _log_gauss(y[:, None], X_aug @ theta.T, sigma2[None, :])
    terms = pi_nc * (log_g + log_p)
    return float(np.sum(logsumexp(terms, axis=1)))


# ----- gate updates -----------------------------------------------------------

def gate_objective(V, X_aug, weighted_resp, phi):
    """Gate part of the EM objective at gate coefficients V (shape C x p)."""
    scores = X_aug @ np.atleast_2d(V).T
    lse = logsumexp(scores, axis=1)
    return float(np.sum(weighted_resp * scores) - phi @ lse)


def gate_objective_grad(V, X_aug, weighted_resp, phi):
    """Analytic gradient of gate_objective, one row per context."""
    g = np.exp(_log_softmax_rows(X_aug @ np.atleast_2d(V).T))
    return X_aug.T @ (weighted_resp - phi[:, None] * g)


def _gate_working(score_c, g_c, wresp_c, phi, eta, xi):
    """Working weights and responses for one gate's damped Newton step.

    r = phi * g * (1 - g) is the curvature weight and the response moves
    the score along the damped Newton direction. Samples with gate
    probability within xi of 0 or 1 keep their score (zero residual)
    and get curvature xi; all weights are floored at xi so no solve sees
    a vanishing weight.
    """
    denom = phi * g_c * (1.0 - g_c)
    extreme = (g_c < xi) | (g_c > 1.0 - xi)
    safe = ~extreme
    offset = np.zeros_like(score_c)
    offset[safe] = eta * (wresp_c[safe] - phi[safe] * g_c[safe]) / denom[safe]
    z = score_c + offset
    r = np.where(extreme, xi, denom)
    r = np.maximum(r, xi)
    return r, z


def m_step_gates(gates, X_aug, resp, pi_nc, lambdas_g, config):
    """Update every gate by cycling damped Newton + coordinate descent.

    Gate probabilities are recomputed immediately after each gate's
    coefficients change; full cycles repeat until the largest
    coefficient move falls below tolerance or the cycle cap is hit
    (non-fatal). Returns the new gates plus the last working weights
    and responses per context, which the leave-one-out estimators
    reuse.
    """
    V = np.array(gates.v, dtype=float, copy=True)
    n, _ = X_aug.shape
    C = V.shape[0]
    wresp = pi_nc * resp.gamma
    phi = resp.phi
    r_work = np.empty((n, C))
    z_work = np.empty((n, C))
    converged = False
    for _ in range(config.max_newton_cycles):
        max_change = 0.0
        for c in range(C):
            scores = X_aug @ V.T
            g_c = np.exp(_log_softmax_rows(scores))[:, c]
            r, z = _gate_working(
                scores[:, c], g_c, wresp[:, c], phi, config.eta, config.xi
            )
            v_new, _ = _cgd_lasso(
                X_aug, z, r, lambdas_g[c], V[c],
                config.cgd_tol, config.max_cgd_cycles,
            )
            change = float(np.max(np.abs(v_new - V[c])))
            if change > max_change:
                max_change = change
            V[c] = v_new
            r_work[:, c] = r
            z_work[:, c] = z
        if max_change < config.cgd_tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"gate Newton cycles hit the {config.max_newton_cycles}-cycle cap",
            NonConvergenceWarning,
            stacklevel=2,
        )
    return GateModel(V), r_work, z_work, converged


def _gate_path(X_aug, V, c, wresp, phi, config):
    """Penalty scan for gate c at the current linearization point."""
    scores = X_aug @ V.T
    g_c = np.exp(_log_softmax_rows(scores))[:, c]
    r, z = _gate_working(scores[:, c], g_c, wresp[:, c], phi,
                         config.eta, config.xi)
    grid = _gate_grid(X_aug, z, r, config)
    state = {"warm": np.array(V[c], dtype=float)}

    def evaluator(lam):
        v_fit, _ = _cgd_lasso(X_aug, z, r, lam, state["warm"],
                              config.cgd_tol, config.max_cgd_cycles)
        state["warm"] = v_fit
        cv = loocv_gate(X_aug, z, r, v_fit,
                        literal_plus=config.paper_literal_gate_press)
        return cv, len(active_set_of(v_fit))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LeverageWarning)
        curve = select_lambda(grid, evaluator)
    return curve, (r, z)


# ----- model-level CV ---------------------------------------------------------

def _model_cv(X_aug, y, experts, gates, wresp, r_work, z_work, literal_plus):
    """Estimated leave-one-out error of the whole mixture.

    Combines each expert's held-out predictions with held-out gate
    scores; the held-out mixture weights are the softmax of the latter.
    """
    n, C = wresp.shape
    y_loo = np.empty((n, C))
    z_loo = np.empty((n, C))
    skipped = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LeverageWarning)
        for c in range(C):
            try:
                parts_e = expert_press(X_aug, y, wresp[:, c], experts[c])
                parts_g = gate_press(
                    X_aug, z_work[:, c], r_work[:, c], gates.v[c],
                    literal_plus=literal_plus,
                )
            except SingularMatrix as exc:
                raise SingularMatrix(
                    f"leave-one-out estimate failed for context {c}: {exc}"
                )
            y_loo[:, c] = parts_e.loo
            z_loo[:, c] = parts_g.loo
            skipped += int(parts_e.skipped.sum() + parts_g.skipped.sum())
    return loocv_model(y, y_loo, z_loo), skipped


# ----- the full EM loop --------------------------------------------------------

def _count_nonconv(caught):
    return sum(issubclass(w.category, NonConvergenceWarning) for w in caught)


def _expert_grid(X_aug, y, weights, config):
    if config.lambda_grid_experts is not None:
        return np.asarray(config.lambda_grid_experts, dtype=float)
    lam_max = lasso_lambda_max(X_aug, y, weights)
    return lambda_grid(lam_max, config.n_lambda, config.lambda_min_ratio)


def _gate_grid(X_aug, z, r, config):
    if config.lambda_grid_gates is not None:
        return np.asarray(config.lambda_grid_gates, dtype=float)
    lam_max = lasso_lambda_max(X_aug, z, r)
    return lambda_grid(lam_max, config.n_lambda, config.lambda_min_ratio)


def _initial_gamma(pi_nc, seed):
    """Possibility-proportional starting responsibilities.

    Deterministic and context-respecting; when two contexts would start
    with identical weight profiles (an exact tie, e.g. under complete
    ignorance) the seed breaks the symmetry with a small multiplicative
    jitter.
    """
    gamma0 = pi_nc / pi_nc.sum(axis=1, keepdims=True)
    weights = pi_nc * gamma0
    C = pi_nc.shape[1]
    tied = any(
        np.allclose(weights[:, a], weights[:, b], rtol=1e-12, atol=1e-12)
        for a in range(C)
        for b in range(a + 1, C)
    )
    if tied and C > 1:
        rng = np.random.default_rng(seed)
        jitter = rng.uniform(0.9, 1.1, size=gamma0.shape)
        raw = pi_nc * jitter
        gamma0 = raw / raw.sum(axis=1, keepdims=True)
    return gamma0


def fit(dataset, ctx, config=None, scale=True, cv_fn=None):
    """Train a contextual mixture on a dataset with analyst contexts.

    The dataset is auto-scaled unless it already carries a scaler (or
    scale=False, in which case coefficients live in raw units). Returns
    (model, report); the model is the snapshot from the iteration with
    the lowest estimated leave-one-out error, which the stop rule
    guarantees is at least n_it iterations old when training ends
    early. cv_fn, when given, replaces the internal estimator
    (signature: cv_fn(model, iteration) -> float).
    """
    config = config or TrainConfig()
    C = ctx.n_contexts

    if scale and not dataset.scaled:
        scaler = data_mod.autoscale_fit(dataset)
        work = data_mod.autoscale_apply(scaler, dataset)
    else:
        scaler = dataset.scaler
        work = dataset

    pi_nc = _validated_pi(ctx, work.n)
    if work.n <= work.d:
        warnings.warn(
            f"N={work.n} <= d={work.d}; estimates may be unstable",
            stacklevel=2,
        )
    X_aug = add_intercept(work.X)
    y = work.y
    p = X_aug.shape[1]
    report = FitReport()

    # -- initialization: possibility-weighted per-context fits, zero gates
    gamma0 = _initial_gamma(pi_nc, config.seed)
    experts = []
    for c in range(C):
        w0 = pi_nc[:, c] * gamma0[:, c]
        if w0.sum() <= 0:
            raise AllZeroWeights(
                f"context '{ctx.labels[c]}' has zero total possibility"
            )
        grid = _expert_grid(X_aug, y, w0, config)
        curve, fits, nonconv = _expert_path(
            X_aug, y, w0, grid, np.zeros(p), config
        )
        report.nonconverged_experts += nonconv
        experts.append(fits[curve.chosen_index])
    gates = GateModel(np.zeros((C, p)))

    best = None  # (cv, iteration, model snapshot pieces)
    frozen_lambdas = None
    for iteration in range(1, config.max_em_iters + 1):
        theta, sigma2, V = _stack_params(experts, gates)
        resp = _e_step_arrays(X_aug, y, theta, sigma2, V, pi_nc)
        wresp = pi_nc * resp.gamma

        # expert M-step with per-context penalty selection
        new_experts = []
        new_lambdas = []
        for c in range(C):
            w = wresp[:, c]
            if w.sum() <= 0:
                raise AllZeroWeights(
                    f"context '{ctx.labels[c]}' lost all responsibility mass"
                )
            if frozen_lambdas is not None:
                lam_e = frozen_lambdas[c][0]
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", NonConvergenceWarning)
                    expert = m_step_expert(
                        X_aug, y, w, lam_e, theta_init=experts[c].theta,
                        tol=config.cgd_tol, max_cycles=config.max_cgd_cycles,
                    )
                report.nonconverged_experts += _count_nonconv(caught)
            else:
                grid = _expert_grid(X_aug, y, w, config)
                curve, fits, nonconv = _expert_path(
                    X_aug, y, w, grid, experts[c].theta, config
                )
                report.nonconverged_experts += nonconv
                expert = fits[curve.chosen_index]
                lam_e = curve.chosen_lambda
            new_experts.append(expert)
            new_lambdas.append(lam_e)
        experts = new_experts

        # gate penalty selection at the current linearization, then update
        gate_lams = []
        for c in range(C):
            if frozen_lambdas is not None:
                gate_lams.append(frozen_lambdas[c][1])
                continue
            curve, _ = _gate_path(X_aug, gates.v, c, wresp, resp.phi, config)
            gate_lams.append(curve.chosen_lambda)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NonConvergenceWarning)
            gates, r_work, z_work, _ = m_step_gates(
                gates, X_aug, resp, pi_nc, gate_lams, config
            )
        report.nonconverged_gates += _count_nonconv(caught)
        lambdas = list(zip(new_lambdas, gate_lams))
        if config.freeze_lambda_after_first and frozen_lambdas is None:
            frozen_lambdas = lambdas

        report.wll_trace.append(
            weighted_log_likelihood(X_aug, y, experts, gates, pi_nc)
        )
        if cv_fn is not None:
            snapshot = _assemble_model(
                experts, gates, ctx.labels, scaler, lambdas
            )
            cv = float(cv_fn(snapshot, iteration))
        else:
            try:
                cv, skipped = _model_cv(
                    X_aug, y, experts, gates, wresp, r_work, z_work,
                    config.paper_literal_gate_press,
                )
            except SingularMatrix as exc:
                raise SingularMatrix(f"iteration {iteration}: {exc}")
            report.skipped_loo_terms += skipped
        report.cv_trace.append(cv)
        log.debug("iteration %d: cv=%.6g wll=%.6g", iteration, cv,
                  report.wll_trace[-1])

        if best is None or cv < best[0]:
            best = (
                cv,
                iteration,
                copy.deepcopy(experts),
                GateModel(gates.v.copy()),
                list(lambdas),
                Responsibilities(resp.gamma.copy(), resp.phi.copy()),
            )
        if iteration - best[1] >= config.n_it:
            report.stopped_early = True
            break

    report.n_iterations = len(report.cv_trace)
    _, best_iter, best_experts, best_gates, best_lambdas, best_resp = best
    report.selected_iteration = best_iter
    report.lambdas = best_lambdas
    report.responsibilities = best_resp
    model = _assemble_model(
        best_experts, best_gates, ctx.labels, scaler, best_lambdas
    )
    gates_cn = model.gate_matrix(X_aug).T
    per_context, overall = consistency_index(gates_cn, ctx)
    report.consistency_per_context = per_context
    report.consistency_overall = overall
    model.meta.update(
        {
            "n_iterations": report.n_iterations,
            "selected_iteration": best_iter,
            "estimated_loocv": best[0],
            "consistency_overall": overall,
        }
    )
    return model, report


def _assemble_model(experts, gates, labels, scaler, lambdas):
    return CmoeModel(
        experts=copy.deepcopy(experts),
        gates=GateModel(gates.v.copy()),
        context_labels=list(labels),
        scaler=scaler,
        lambdas=list(lambdas),
        meta={},
    )


def fit_lasso(dataset, config=None, scale=True):
    """Plain sparse linear baseline: one expert under complete ignorance."""
    from .possibility import ignorance_contexts

    ctx = ignorance_contexts(1, dataset.n, ["all"])
    return fit(dataset, ctx, config=config, scale=scale)
