"""Multilevel logistic regression fitted by Laplace-approximated maximum likelihood.

Model
-----
For observation ``i`` in group ``j`` (a model version)::

    logit P(y_i = 1) = x_i' beta + z_i' b_j,      b_j ~ N(0, diag(theta**2))

``x_i`` and ``z_i`` both hold an intercept plus one dummy per non-reference
language, so each language's intercept and slope vary across groups.

Random effects are handled in the whitened form ``b_j = theta * u_j`` with
``u_j ~ N(0, I)``. The Laplace approximation to the per-group integral is then

    log L_j ~= l_j(u_hat) - u_hat'u_hat / 2 - log det(A'WA + I) / 2

with ``A = Z diag(theta)``. This stays well conditioned when ``theta`` sits
at the floor, where the objective collapses to plain logistic regression.

Observations sharing the same (x, z, group) pattern are pooled into binomial
counts before fitting. This is exact for the Bernoulli likelihood and makes
the objective independent of row order.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, optimize, special, stats

__all__ = [
    "THETA_FLOOR",
    "DesignMatrix",
    "FitOptions",
    "FitResult",
    "Coefficient",
    "PredictedCell",
    "RandomEffectRow",
    "FitError",
    "InnerNewtonError",
    "build_design",
    "laplace_objective",
    "quadrature_loglik",
    "fit",
    "wald_row",
    "wald_inference",
    "random_effect_table",
    "predict_prob",
    "significance_stars",
]

THETA_FLOOR = 1e-10
LOG_FLOOR = np.log(THETA_FLOOR)
_LOG_CEIL = np.log(1e4)
INNER_TOL = 1e-10
INNER_MAX_ITER = 100
# SDs below this are treated as sitting on the boundary when inverting the
# observed information (their curvature is O(theta**2) and lost in FD noise).
BOUNDARY_SD = 1e-4


class FitError(ValueError):
    """Input data admit no maximum likelihood estimate."""


class InnerNewtonError(RuntimeError):
    """The per-group posterior mode search failed to converge."""

    def __init__(self, group, n_iter, grad_norm):
        super().__init__(
            f"inner Newton for group {group!r} did not converge in {n_iter} "
            f"iterations (gradient norm {grad_norm:.3g})")
        self.group = group


@dataclass(frozen=True)
class DesignMatrix:
    """Fixed and random design for a language x model-version study.

    Columns of both ``X`` and ``Z`` are ``Intercept`` followed by one dummy per
    non-reference language, in ``languages`` order.
    """

    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    group: np.ndarray
    languages: tuple[str, ...]
    reference: str
    models: tuple[str, ...]
    language_index: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.models)

    @property
    def dummy_languages(self) -> tuple[str, ...]:
        return tuple(lang for lang in self.languages if lang != self.reference)

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return ("Intercept",) + tuple(f"language[{c}]" for c in self.dummy_languages)

    @property
    def random_names(self) -> tuple[str, ...]:
        return self.fixed_names[:self.q]

    def cell_vector(self, language: str) -> np.ndarray:
        """Row of ``X`` for an observation in ``language``."""
        if language not in self.languages:
            raise KeyError(f"unknown language {language!r}")
        v = np.zeros(self.p)
        v[0] = 1.0
        if language != self.reference:
            v[1 + self.dummy_languages.index(language)] = 1.0
        return v

    def cell_random_vector(self, language: str) -> np.ndarray:
        """Row of ``Z`` for an observation in ``language``."""
        return self.cell_vector(language)[:self.q]

    @cached_property
    def blocks(self) -> list[_Block]:
        out = []
        for j in range(self.n_groups):
            idx = self.group == j
            XZ = np.hstack([self.X[idx], self.Z[idx]])
            patterns, inverse = np.unique(XZ, axis=0, return_inverse=True)
            inverse = inverse.ravel()
            trials = np.bincount(inverse, minlength=len(patterns)).astype(float)
            succ = np.bincount(inverse, weights=self.y[idx], minlength=len(patterns))
            out.append(_Block(X=patterns[:, :self.p], Z=patterns[:, self.p:],
                              s=succ, m=trials))
        return out


@dataclass(frozen=True)
class _Block:
    X: np.ndarray
    Z: np.ndarray
    s: np.ndarray
    m: np.ndarray


def build_design(rows, reference_language: str, languages: Sequence[str] | None = None,
                 models: Sequence[str] | None = None,
                 random_slopes: bool = True) -> DesignMatrix:
    """Dummy-code analysis rows.

    Parameters
    ----------
    rows : iterable of AnalysisRow
        Anything with ``outcome``, ``language_code`` and ``model_id``.
    reference_language : str
        Language whose dummy is omitted. It must appear in ``languages``, or
        among the rows when ``languages`` is not given.
    languages, models : sequence of str, optional
        Column and group order. Default is order of first appearance.
    random_slopes : bool
        If False, only the intercept varies across groups.
    """
    rows = list(rows)
    seen_langs = list(dict.fromkeys(r.language_code for r in rows))
    seen_models = list(dict.fromkeys(r.model_id for r in rows))
    languages = tuple(languages) if languages is not None else tuple(seen_langs)
    models = tuple(models) if models is not None else tuple(seen_models)
    if reference_language not in languages:
        raise ValueError(f"reference language {reference_language!r} absent from "
                         + ("languages" if len(languages) > len(seen_langs) else "rows"))
    unknown = sorted(set(seen_langs) - set(languages))
    if unknown:
        raise ValueError(f"unknown language(s) in rows: {', '.join(unknown)}")
    unknown = sorted(set(seen_models) - set(models))
    if unknown:
        raise ValueError(f"unknown model(s) in rows: {', '.join(unknown)}")

    dummies = [lang for lang in languages if lang != reference_language]
    n, p = len(rows), 1 + len(dummies)
    X = np.zeros((n, p))
    X[:, 0] = 1.0
    lang_pos = {lang: k for k, lang in enumerate(languages)}
    dummy_pos = {lang: 1 + k for k, lang in enumerate(dummies)}
    model_pos = {m: k for k, m in enumerate(models)}
    y = np.empty(n)
    group = np.empty(n, dtype=int)
    lidx = np.empty(n, dtype=int)
    for i, r in enumerate(rows):
        if r.language_code in dummy_pos:
            X[i, dummy_pos[r.language_code]] = 1.0
        y[i] = float(bool(r.outcome))
        group[i] = model_pos[r.model_id]
        lidx[i] = lang_pos[r.language_code]
    Z = X.copy() if random_slopes else X[:, :1].copy()
    return DesignMatrix(X=X, Z=Z, y=y, group=group, languages=languages,
                        reference=reference_language, models=models, language_index=lidx)


# ---------------------------------------------------------------------------
# Laplace objective
# ---------------------------------------------------------------------------

def _binom_loglik(blk, eta):
    return float(blk.s @ eta - blk.m @ np.logaddexp(0.0, eta))


def _inner_mode(blk, beta, sigma, u, group_label):
    """Newton ascent on l(u) - u'u/2. Returns (u, eta, mu, Cholesky of H)."""
    offset = blk.X @ beta
    A = blk.Z * sigma
    q = A.shape[1]

    def h(u_):
        eta_ = offset + A @ u_
        return _binom_loglik(blk, eta_) - 0.5 * u_ @ u_

    g_norm = np.inf
    for it in range(INNER_MAX_ITER + 1):
        eta = offset + A @ u
        mu = special.expit(eta)
        g = A.T @ (blk.s - blk.m * mu) - u
        w = blk.m * mu * (1.0 - mu)
        H = A.T @ (w[:, None] * A) + np.eye(q)
        cf = linalg.cho_factor(H, lower=True)
        g_norm = np.linalg.norm(g)
        if g_norm <= INNER_TOL:
            return u, eta, mu, cf
        if it == INNER_MAX_ITER:
            break
        step = linalg.cho_solve(cf, g)
        if np.linalg.norm(step) <= 1e-15 * (1.0 + np.linalg.norm(u)):
            return u, eta, mu, cf
        h0, t = h(u), 1.0
        while t > 1e-12:
            u_new = u + t * step
            if h(u_new) >= h0 - 1e-12 * abs(h0):
                break
            t *= 0.5
        u = u_new
    raise InnerNewtonError(group_label, INNER_MAX_ITER, g_norm)


def _group_terms(blk, beta, sigma, u0, group_label):
    """Laplace log-likelihood of one group and gradient of its negative."""
    u, eta, mu, cf = _inner_mode(blk, beta, sigma, u0, group_label)
    A = blk.Z * sigma
    r = blk.s - blk.m * mu
    w = blk.m * mu * (1.0 - mu)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    loglik = _binom_loglik(blk, eta) - 0.5 * u @ u - 0.5 * logdet

    # Derivatives of log det H, including the path through u_hat(beta, theta)
    # given by the implicit function theorem applied to the mode condition.
    P = linalg.cho_solve(cf, np.eye(A.shape[1]))
    lev = np.einsum("ij,jk,ik->i", A, P, A)
    c = blk.m * mu * (1.0 - mu) * (1.0 - 2.0 * mu) * lev
    t = P @ (A.T @ c)
    v = A @ t
    e = c - w * v
    Zr = blk.Z.T @ r
    PAWZ = P @ (A.T @ (w[:, None] * blk.Z))
    dlogdet_beta = blk.X.T @ e
    dlogdet_psi = sigma * (2.0 * np.diag(PAWZ) + u * (blk.Z.T @ e) + t * Zr)

    grad_beta = -blk.X.T @ r + 0.5 * dlogdet_beta
    grad_psi = -sigma * u * Zr + 0.5 * dlogdet_psi
    return _GroupState(loglik, grad_beta, grad_psi, u, mu, P)


class _GroupState(NamedTuple):
    loglik: float
    grad_beta: np.ndarray
    grad_psi: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    P: np.ndarray


def _mode_sensitivity(blk, st, sigma):
    """Jacobian of the mode ``b_hat = theta * u_hat`` w.r.t. ``(beta, log theta)``,
    and the Laplace posterior covariance of ``b`` at the mode."""
    A = blk.Z * sigma
    w = blk.m * st.mu * (1.0 - st.mu)
    r = blk.s - blk.m * st.mu
    AWZ = A.T @ (w[:, None] * blk.Z)
    du_dbeta = -st.P @ (A.T @ (w[:, None] * blk.X))
    du_dpsi = st.P @ (np.diag(sigma * (blk.Z.T @ r)) - AWZ * (sigma * st.u)[None, :])
    db = np.hstack([sigma[:, None] * du_dbeta,
                    sigma[:, None] * du_dpsi + np.diag(sigma * st.u)])
    post = sigma[:, None] * st.P * sigma[None, :]
    return db, post


class _LaplaceProblem:
    """Objective over the packed vector ``[beta, log(theta)]`` with warm-started modes."""

    def __init__(self, design: DesignMatrix):
        self.design = design
        self.blocks = design.blocks
        self.p, self.q = design.p, design.q
        self._u = [np.zeros(self.q) for _ in self.blocks]

    def split(self, x):
        beta = x[:self.p]
        sigma = np.maximum(np.exp(x[self.p:]), THETA_FLOOR)
        return beta, sigma

    def __call__(self, x):
        beta, sigma = self.split(np.asarray(x, dtype=float))
        f = 0.0
        gb = np.zeros(self.p)
        gp = np.zeros(self.q)
        for j, blk in enumerate(self.blocks):
            st = _group_terms(blk, beta, sigma, self._u[j], self.design.models[j])
            self._u[j] = st.u
            f -= st.loglik
            gb += st.grad_beta
            gp += st.grad_psi
        return f, np.concatenate([gb, gp])

    def modes(self, x):
        beta, sigma = self.split(x)
        out = []
        for j, blk in enumerate(self.blocks):
            out.append(_group_terms(blk, beta, sigma, self._u[j], self.design.models[j]))
        return out


def laplace_objective(beta, theta, design: DesignMatrix):
    """Negative Laplace marginal log-likelihood and its gradient.

    Parameters
    ----------
    beta : array_like, shape (p,)
    theta : array_like, shape (q,)
        Random-effect standard deviations, each at least ``THETA_FLOOR``.
    design : DesignMatrix

    Returns
    -------
    value : float
    gradient : ndarray, shape (p + q,)
        With respect to ``(beta, log(theta))``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < THETA_FLOOR * (1 - 1e-12)):
        raise ValueError(f"theta must be >= {THETA_FLOOR}")
    prob = _LaplaceProblem(design)
    return prob(np.concatenate([np.asarray(beta, dtype=float), np.log(theta)]))


# ---------------------------------------------------------------------------
# Gauss-Hermite oracle
# ---------------------------------------------------------------------------

def _raw_mode(Xb, A, y):
    """Mode and curvature of l(u) - u'u/2 for one group's raw rows."""
    q = A.shape[1]

    def h(u_):
        eta = Xb + A @ u_
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * u_ @ u_)

    u = np.zeros(q)
    cur = h(u)
    for _ in range(200):
        mu = special.expit(Xb + A @ u)
        g = A.T @ (y - mu) - u
        H = (A * (mu * (1 - mu))[:, None]).T @ A + np.eye(q)
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-12:
            trial = h(u + t * step)
            if trial >= cur - 1e-14 * abs(cur):
                break
            t *= 0.5
        u = u + t * step
        cur = trial
        if np.max(np.abs(t * step)) < 1e-12:
            break
    mu = special.expit(Xb + A @ u)
    H = (A * (mu * (1 - mu))[:, None]).T @ A + np.eye(q)
    return u, H


def quadrature_loglik(beta, theta, design: DesignMatrix, n_nodes: int = 21,
                      adaptive: bool = True) -> float:
    """Marginal log-likelihood by tensor-product Gauss-Hermite quadrature.

    Works on the raw rows and shares no code with the Laplace objective.
    With ``adaptive`` the grid is centred at each group's mode and scaled by
    the local curvature; the integral being approximated is the same either
    way, only the node placement changes. Limited to ``q <= 3``.
    """
    beta = np.asarray(beta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    q = design.q
    if q > 3:
        raise ValueError(f"quadrature supports at most 3 random effects, got {q}")
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    grid = np.array(list(itertools.product(x, repeat=q)))
    logw = np.log(np.array(list(itertools.product(w, repeat=q)))).sum(axis=1)
    total = 0.0
    for j in range(design.n_groups):
        idx = design.group == j
        Xb = design.X[idx] @ beta
        A = design.Z[idx] * theta
        y = design.y[idx]
        if adaptive:
            center, H = _raw_mode(Xb, A, y)
            L = np.linalg.cholesky(np.linalg.inv(H))
            u = center + np.sqrt(2.0) * grid @ L.T
            log_jac = np.sum(np.log(np.diag(L))) + 0.5 * q * np.log(2.0)
        else:
            u = np.sqrt(2.0) * grid
            log_jac = 0.5 * q * np.log(2.0)
        eta = Xb[:, None] + A @ u.T
        ll = (y[:, None] * eta - np.logaddexp(0.0, eta)).sum(axis=0)
        # the weights already carry exp(-x'x)
        integrand = ll - 0.5 * np.sum(u ** 2, axis=1) + np.sum(grid ** 2, axis=1)
        total += (special.logsumexp(integrand + logw) + log_jac
                  - 0.5 * q * np.log(2.0 * np.pi))
    return float(total)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class FitOptions:
    """Knobs for :func:`fit`.

    ``fixed_theta`` pins the random-effect SDs and optimizes ``beta`` only.
    """

    max_iter: int = 500
    gtol: float = 1e-8
    xtol: float = 1e-10
    init_theta: float = 1.0
    fixed_theta: Sequence[float] | None = None
    strict: bool = False


@dataclass(frozen=True)
class Coefficient:
    name: str
    estimate: float
    se: float
    z: float
    p: float
    stars: str


@dataclass(frozen=True)
class RandomEffectRow:
    model: str
    name: str
    mode: float
    se: float
    total: float


@dataclass(frozen=True)
class PredictedCell:
    language: str
    model: str
    eta: float
    prob: float


@dataclass
class FitResult:
    """Estimates at the optimum of the Laplace objective.

    ``random_modes[j]`` is the posterior mode of ``b_j`` on the coefficient
    scale. Two covariances of the stacked ``(beta, b_1, ..., b_J)`` prediction
    errors are kept:

    ``conditional_cov``
        Henderson's mixed-model equations, treating ``theta`` as known.
    ``prediction_cov``
        Laplace posterior covariance of each ``b_j`` plus the propagated
        uncertainty of ``(beta, log theta)`` through the mode (Kass & Steffey).
        Predicted-cell intervals use this one.

    ``params_cov`` is the inverse observed information over
    ``(beta, log theta)``, with zero rows for SDs held at the boundary.
    """

    design: DesignMatrix
    beta: np.ndarray
    beta_se: np.ndarray
    beta_cov: np.ndarray
    random_modes: np.ndarray
    random_se: np.ndarray
    theta: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    gradient_norm: float
    conditional_cov: np.ndarray
    params_cov: np.ndarray
    prediction_cov: np.ndarray
    theta_fixed: bool = False
    separation: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def fixed_names(self):
        return self.design.fixed_names

    def cell_design(self, language: str, model: str) -> np.ndarray:
        """Loading vector of a cell's linear predictor on the conditional parameters."""
        d = self.design
        if model not in d.models:
            raise KeyError(f"unknown model {model!r}")
        a = np.zeros(d.p + d.n_groups * d.q)
        a[:d.p] = d.cell_vector(language)
        j = d.models.index(model)
        a[d.p + j * d.q: d.p + (j + 1) * d.q] = d.cell_random_vector(language)
        return a

    def cell_eta(self, language: str, model: str) -> float:
        return float(self.cell_design(language, model) @ self.conditional_params)

    @property
    def conditional_params(self) -> np.ndarray:
        """``(beta, b_1, ..., b_J)`` stacked."""
        return np.concatenate([self.beta, self.random_modes.ravel()])


def _projected_grad(x, g, lower, upper):
    pg = g.copy()
    at_lo = (x <= lower + 1e-12) & (g > 0)
    at_hi = (x >= upper - 1e-12) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def _fd_hessian(fun, x, idx, h=1e-5):
    """Central differences of the analytic gradient over coordinates ``idx``."""
    k = len(idx)
    H = np.zeros((k, k))
    for a, i in enumerate(idx):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        H[:, a] = (fun(xp)[1][idx] - fun(xm)[1][idx]) / (2 * step)
    return 0.5 * (H + H.T)


def _newton_polish(fun, x, lower, upper, gtol, xtol, max_iter):
    """Projected Newton steps with an FD Hessian; finishes what L-BFGS-B started."""
    f, g = fun(x)
    for it in range(max_iter):
        # SDs drifting to zero: gradient and curvature both vanish like theta^2,
        # so Newton crawls. Jump to the floor if that does not cost anything.
        sink = np.isfinite(lower) & (x > lower) & (x < np.log(BOUNDARY_SD)) & (g > 0)
        if sink.any():
            x_snap = np.where(sink, lower, x)
            f_snap, g_snap = fun(x_snap)
            if f_snap <= f + 1e-12 * max(1.0, abs(f)):
                x, f, g = x_snap, f_snap, g_snap
        pg = _projected_grad(x, g, lower, upper)
        if np.max(np.abs(pg)) < gtol:
            return x, f, g, it, True
        free = np.flatnonzero(~(((x <= lower + 1e-12) & (g > 0))
                                | ((x >= upper - 1e-12) & (g < 0))))
        H = _fd_hessian(fun, x, free)
        evals, evecs = np.linalg.eigh(H)
        evals = np.maximum(evals, 1e-8 * max(1.0, evals.max(initial=1.0)))
        d = np.zeros_like(x)
        d[free] = -(evecs @ ((evecs.T @ g[free]) / evals))
        t = 1.0
        while True:
            x_new = np.clip(x + t * d, lower, upper)
            f_new, g_new = fun(x_new)
            if f_new <= f + 1e-4 * t * (g @ (x_new - x)) or t < 1e-10:
                break
            t *= 0.5
        moved = np.max(np.abs(x_new - x))
        if f_new > f:
            return x, f, g, it + 1, moved < xtol
        x, f, g = x_new, f_new, g_new
        if moved < xtol:
            return x, f, g, it + 1, True
    pg = _projected_grad(x, g, lower, upper)
    return x, f, g, max_iter, bool(np.max(np.abs(pg)) < gtol)


def _escape_flat_sd(fun, x, f, p):
    """Start point away from a near-zero SD, or None if staying put is fine.

    Close to zero the objective is flat in log SD (it moves like SD^2), so a
    gradient-based search can stall there even when a larger SD fits better.
    Each such SD is probed at a few moderate values, others held fixed.
    """
    best, best_f = None, f - 1e-9 * max(1.0, abs(f))
    for i in range(p, len(x)):
        if x[i] >= np.log(BOUNDARY_SD):
            continue
        for sd in (1e-2, 1e-1):
            trial = x.copy()
            trial[i] = np.log(sd)
            f_trial = fun(trial)[0]
            if f_trial < best_f:
                best, best_f = trial, f_trial
    return best


def _separated_cells(design):
    out = []
    for li, lang in enumerate(design.languages):
        for j, model in enumerate(design.models):
            idx = (design.language_index == li) & (design.group == j)
            if idx.any():
                ys = design.y[idx]
                if ys.min() == ys.max():
                    out.append((lang, model))
    return out


def _prediction_cov(design, terms, sigma, params_cov):
    p, q, J = design.p, design.q, design.n_groups
    G = np.zeros((p + J * q, p + q))
    G[:p, :p] = np.eye(p)
    post = np.zeros((p + J * q, p + J * q))
    for j, (blk, st) in enumerate(zip(design.blocks, terms)):
        db, pj = _mode_sensitivity(blk, st, sigma)
        sl = slice(p + j * q, p + (j + 1) * q)
        G[sl] = db
        post[sl, sl] = pj
    return G @ params_cov @ G.T + post


def _conditional_cov(design, terms, beta, sigma):
    """Inverse of the penalized information of (beta, u) mapped to the (beta, b) scale."""
    p, q, J = design.p, design.q, design.n_groups
    K = np.zeros((p + J * q, p + J * q))
    for j, (blk, tm) in enumerate(zip(design.blocks, terms)):
        mu = tm.mu
        w = blk.m * mu * (1.0 - mu)
        A = blk.Z * sigma
        sl = slice(p + j * q, p + (j + 1) * q)
        K[:p, :p] += blk.X.T @ (w[:, None] * blk.X)
        K[:p, sl] = blk.X.T @ (w[:, None] * A)
        K[sl, :p] = K[:p, sl].T
        K[sl, sl] = A.T @ (w[:, None] * A) + np.eye(q)
    C = np.linalg.pinv(K, hermitian=True)
    T = np.eye(p + J * q)
    for j in range(J):
        T[p + j * q: p + (j + 1) * q, p + j * q: p + (j + 1) * q] = np.diag(sigma)
    return T @ C @ T.T


def fit(design: DesignMatrix, options: FitOptions | None = None) -> FitResult:
    """Maximize the Laplace marginal likelihood over ``(beta, log theta)``.

    L-BFGS-B on the log-SD scale (lower bound at the SD floor), followed by
    projected Newton polishing with a finite-difference Hessian of the analytic
    gradient. Fixed-effect SEs come from the inverse of that Hessian at the
    optimum; SDs on the boundary are held fixed when inverting.
    """
    opts = options or FitOptions()
    y = design.y
    if design.n < design.p:
        raise FitError(f"need at least {design.p} observations, got {design.n}")
    if y.min() == y.max():
        raise FitError("all outcomes are identical; the likelihood has no maximum")

    notes = []
    if design.n_groups < 5:
        notes.append(f"few-groups: only {design.n_groups} group(s); variance "
                     "components are weakly identified")
    separated = _separated_cells(design)
    for lang, model in separated:
        notes.append(f"separation: cell ({lang}, {model}) has all outcomes equal; "
                     "estimate is regularized by the random-effect variance")
    if separated:
        warnings.warn("separation detected in %d cell(s)" % len(separated), RuntimeWarning,
                      stacklevel=2)

    p, q = design.p, design.q
    prob = _LaplaceProblem(design)
    beta0 = np.zeros(p)
    ybar = np.clip(y.mean(), 1e-3, 1 - 1e-3)
    beta0[0] = np.log(ybar / (1 - ybar))

    if opts.fixed_theta is not None:
        theta_fixed = np.maximum(np.broadcast_to(np.asarray(opts.fixed_theta, float), (q,)),
                                 THETA_FLOOR)
        psi = np.log(theta_fixed)

        def fun(b):
            f, g = prob(np.concatenate([b, psi]))
            return f, g[:p]
        x0 = beta0
        lower = np.full(p, -np.inf)
        upper = np.full(p, np.inf)
    else:
        fun = prob
        x0 = np.concatenate([beta0, np.full(q, np.log(max(opts.init_theta, THETA_FLOOR)))])
        lower = np.concatenate([np.full(p, -np.inf), np.full(q, LOG_FLOOR)])
        upper = np.concatenate([np.full(p, np.inf), np.full(q, _LOG_CEIL)])

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            bounds=list(zip(lower, upper)),
                            options={"maxiter": opts.max_iter, "gtol": opts.gtol,
                                     "ftol": 1e-15, "maxcor": 20})
    polish_iter = max(0, min(50, opts.max_iter - res.nit))
    x, f, g, n_polish, converged = _newton_polish(
        fun, np.clip(res.x, lower, upper), lower, upper, opts.gtol, opts.xtol, polish_iter)
    n_iter = int(res.nit) + n_polish
    if opts.fixed_theta is None:
        x0 = _escape_flat_sd(fun, x, f, p)
        if x0 is not None:
            res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                                    bounds=list(zip(lower, upper)),
                                    options={"maxiter": opts.max_iter, "gtol": opts.gtol,
                                             "ftol": 1e-15, "maxcor": 20})
            out = _newton_polish(fun, np.clip(res.x, lower, upper), lower, upper,
                                 opts.gtol, opts.xtol, polish_iter)
            n_iter += int(res.nit) + out[3]
            if out[1] < f:
                x, f, g, _, converged = out
    grad_norm = float(np.max(np.abs(_projected_grad(x, g, lower, upper))))
    if not converged:
        msg = (f"non-convergence: outer gradient inf-norm {grad_norm:.3g} after "
               f"{n_iter} iterations")
        if opts.strict:
            raise RuntimeError(msg)
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    full_x = x if opts.fixed_theta is None else np.concatenate([x, psi])
    beta, sigma = prob.split(full_x)

    # observed information of the Laplace objective
    if opts.fixed_theta is None:
        keep = np.concatenate([np.arange(p), p + np.flatnonzero(sigma > BOUNDARY_SD)])
    else:
        keep = np.arange(p)
    Hk = _fd_hessian(fun, x, keep)
    try:
        cov_k = np.linalg.inv(Hk)
        if np.any(np.diag(cov_k)[:p] <= 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov_k = np.linalg.pinv(Hk, hermitian=True)
        notes.append("observed information is singular; standard errors use a pseudo-inverse")
    beta_cov = cov_k[:p, :p]
    beta_se = np.sqrt(np.maximum(np.diag(beta_cov), 0.0))

    terms = prob.modes(full_x)
    params_cov = np.zeros((p + q, p + q))
    params_cov[np.ix_(keep, keep)] = cov_k
    pcov = _prediction_cov(design, terms, sigma, params_cov)
    modes = np.array([sigma * tm.u for tm in terms])
    loglik = float(sum(tm.loglik for tm in terms))
    ccov = _conditional_cov(design, terms, beta, sigma)
    re_var = np.diag(ccov)[p:].reshape(design.n_groups, q)

    return FitResult(design=design, beta=beta.copy(), beta_se=beta_se, beta_cov=beta_cov,
                     random_modes=modes, random_se=np.sqrt(np.maximum(re_var, 0.0)),
                     theta=sigma.copy(), loglik=loglik, converged=bool(converged),
                     n_iter=n_iter, gradient_norm=grad_norm, conditional_cov=ccov,
                     params_cov=params_cov, prediction_cov=pcov,
                     theta_fixed=opts.fixed_theta is not None, separation=separated,
                     warnings=notes)


# ---------------------------------------------------------------------------
# Inference on a fit
# ---------------------------------------------------------------------------

def significance_stars(p: float) -> str:
    """``**`` below 0.001, ``*`` below 0.01, ``+`` below 0.05."""
    if p < 0.001:
        return "**"
    if p < 0.01:
        return "*"
    if p < 0.05:
        return "+"
    return ""


def wald_row(name: str, estimate: float, se: float) -> Coefficient:
    """Two-sided normal Wald test of ``estimate = 0``."""
    if estimate == 0:
        z = 0.0
    elif se > 0:
        z = estimate / se
    else:
        z = np.copysign(np.inf, estimate)
    pval = float(2.0 * stats.norm.sf(abs(z)))
    return Coefficient(name=name, estimate=float(estimate), se=float(se), z=float(z),
                       p=pval, stars=significance_stars(pval))


def wald_inference(fit_result: FitResult) -> list[Coefficient]:
    return [wald_row(name, est, se) for name, est, se in
            zip(fit_result.fixed_names, fit_result.beta, fit_result.beta_se)]


def random_effect_table(fit_result: FitResult) -> list[RandomEffectRow]:
    """Per-model random effects: posterior mode, its conditional SE, and FE + RE."""
    out = []
    for j, model in enumerate(fit_result.design.models):
        for k, name in enumerate(fit_result.design.random_names):
            mode = float(fit_result.random_modes[j, k])
            out.append(RandomEffectRow(model=model, name=name, mode=mode,
                                       se=float(fit_result.random_se[j, k]),
                                       total=float(fit_result.beta[k] + mode)))
    return out


def predict_prob(fit_result: FitResult, language: str, model: str) -> PredictedCell:
    """Fixed part plus the group's posterior-mode random part, through the logistic."""
    eta = fit_result.cell_eta(language, model)
    return PredictedCell(language=language, model=model, eta=eta,
                         prob=float(special.expit(eta)))
