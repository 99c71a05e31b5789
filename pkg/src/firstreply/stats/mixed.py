"""Random-intercept logistic regression by Laplace-approximate maximum likelihood.

The model for newcomer ``i`` in community ``k`` is

    logit P(engaged) = x_i . beta + u_k,    u_k ~ N(0, sigma2)

with design row ``x_i = [1, reply, reply*sentiment, reply*toxicity, reply*attack]``.

Fitting is nested. For a fixed ``sigma2`` the penalized log-likelihood is
maximised jointly in ``(beta, u)`` by Newton's method; ``beta`` is then
refined against the Laplace objective itself (the conditional modes ``u`` are
re-solved per group on every step) so the reported optimum is a stationary
point of the approximate marginal likelihood. The outer loop is a
golden-section search over ``log sigma2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ..corpus import FirstPostEvent, ReplyFeatures
from ..scoring import AttributeScores, threshold_mode

COLUMNS = ("intercept", "reply", "reply_x_sentiment", "reply_x_toxicity", "reply_x_attack")
LOG_SIGMA2_BOUNDS = (-10.0, 5.0)
SEPARATION_BOUND = 15.0
MAX_ITER = 200
TOL = 1e-6
INNER_TOL = 1e-8  # beta step size; well inside the 1e-6 outer tolerance
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ModelFitError(RuntimeError):
    pass


class SeparationError(ModelFitError):
    pass


class IdentifiabilityError(ModelFitError):
    pass


@dataclass
class EngagementModel:
    kind: str
    community_type: str
    beta: np.ndarray
    se: np.ndarray
    sigma2: float
    u: dict[str, float]
    converged: bool
    loglik: float = math.nan
    n_obs: int = 0
    iterations: int = 0
    notes: list[str] = field(default_factory=list)
    feature_mode: str = "continuous"

    @property
    def coef(self) -> dict[str, float]:
        return dict(zip(COLUMNS, self.beta.tolist()))

    def z_values(self) -> np.ndarray:
        return self.beta / self.se

    def p_values(self) -> np.ndarray:
        from scipy.stats import norm

        return 2 * norm.sf(np.abs(self.z_values()))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "community_type": self.community_type,
            "columns": list(COLUMNS),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "p_values": self.p_values().tolist(),
            "sigma2": self.sigma2,
            "u": dict(sorted(self.u.items())),
            "converged": self.converged,
            "loglik": self.loglik,
            "n_obs": self.n_obs,
            "iterations": self.iterations,
            "notes": list(self.notes),
            "feature_mode": self.feature_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngagementModel":
        return cls(
            kind=data["kind"],
            community_type=data["community_type"],
            beta=np.asarray(data["beta"], dtype=float),
            se=np.asarray(data["se"], dtype=float),
            sigma2=float(data["sigma2"]),
            u={k: float(v) for k, v in data["u"].items()},
            converged=bool(data["converged"]),
            loglik=float(data.get("loglik", math.nan)),
            n_obs=int(data.get("n_obs", 0)),
            iterations=int(data.get("iterations", 0)),
            notes=list(data.get("notes", [])),
            feature_mode=data.get("feature_mode", "continuous"),
        )


# --------------------------------------------------------------------------
# Design
# --------------------------------------------------------------------------


def design_row(treated: bool, sentiment: float = 0.0, toxicity: float = 0.0, attack: float = 0.0):
    r = 1.0 if treated else 0.0
    return [1.0, r, r * sentiment, r * toxicity, r * attack]


def design_matrix(events: Sequence[FirstPostEvent]):
    """Return ``X, y, codes, groups`` after a canonical (community, user) sort."""
    events = sorted(events, key=lambda e: (e.community, e.user))
    groups = sorted({e.community for e in events})
    code_of = {g: i for i, g in enumerate(groups)}
    X = np.empty((len(events), len(COLUMNS)))
    for i, ev in enumerate(events):
        r = ev.first_reply if ev.treated else None
        if r is None:
            X[i] = design_row(ev.treated)
        else:
            X[i] = design_row(True, r.sentiment, r.toxicity, r.attack)
    y = np.array([1.0 if e.engaged else 0.0 for e in events])
    codes = np.array([code_of[e.community] for e in events], dtype=np.intp)
    return X, y, codes, groups


def threshold_events(events: Sequence[FirstPostEvent], threshold: float = 0.7) -> list[FirstPostEvent]:
    """Copies with toxicity and attack replaced by 0/1 indicators of ``score >= threshold``.

    Sentiment stays continuous.
    """
    out = []
    for ev in events:
        r = ev.first_reply
        if r is not None:
            tox, att = threshold_mode(AttributeScores(r.toxicity, r.attack), threshold)
            ev = replace(ev, first_reply=ReplyFeatures(r.sentiment, float(tox), float(att)))
        out.append(ev)
    return out


def _check_design(X: np.ndarray, names: Sequence[str]) -> None:
    for k in range(X.shape[1]):
        if not np.any(X[:, k]):
            raise IdentifiabilityError(f"column {names[k]!r} is identically zero")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        for k in range(1, X.shape[1]):
            if np.linalg.matrix_rank(X[:, : k + 1]) < k + 1:
                raise IdentifiabilityError(f"column {names[k]!r} is collinear with earlier columns")


def _check_separation(beta: np.ndarray, names: Sequence[str]) -> None:
    big = np.flatnonzero(np.abs(beta) > SEPARATION_BOUND)
    if big.size:
        k = int(big[0])
        raise SeparationError(
            f"coefficient for {names[k]!r} diverged (|beta| > {SEPARATION_BOUND}); "
            "the outcome is (quasi-)separated by this column"
        )


# --------------------------------------------------------------------------
# Core numerics
# --------------------------------------------------------------------------


def _loglik_terms(eta: np.ndarray, y: np.ndarray) -> float:
    # sum of y*eta - log(1 + exp(eta)), stable for large |eta|
    softplus = np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))
    return float(y @ eta - softplus.sum())


class _Groups:
    """Contiguous group segments; rows must be sorted by group code."""

    def __init__(self, codes: np.ndarray, k: int):
        counts = np.bincount(codes, minlength=k)
        if np.any(counts == 0):
            raise IdentifiabilityError("every community needs at least one event")
        self.codes = codes
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def sums(self, values: np.ndarray) -> np.ndarray:
        """Per-group sums of a vector, or of each row of a (p, n) array."""
        return np.add.reduceat(values, self.starts, axis=-1)

    def expand(self, u: np.ndarray) -> np.ndarray:
        return u[self.codes]


def _solve_modes(offset, y, codes, k, sigma2, u, max_iter=100):
    """Per-group conditional modes of u for a fixed linear predictor offset."""
    for _ in range(max_iter):
        p = expit(offset + codes.expand(u))
        w = p * (1 - p)
        grad = codes.sums(y - p) - u / sigma2
        hess = codes.sums(w) + 1.0 / sigma2
        step = grad / hess
        u = u + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return u


def laplace_loglik(X, y, codes, k, beta, sigma2, u_start=None):
    """Laplace-approximate marginal log-likelihood at ``(beta, sigma2)``.

    Returns ``(value, u_hat)``; the conditional modes are solved internally.
    """
    beta = np.asarray(beta, dtype=float)
    offset = X @ beta
    if sigma2 <= 0:
        return _loglik_terms(offset, y), np.zeros(k)
    u = np.zeros(k) if u_start is None else np.array(u_start, dtype=float)
    u = _solve_modes(offset, y, codes, k, sigma2, u)
    eta = offset + codes.expand(u)
    p = expit(eta)
    wk = codes.sums(p * (1 - p))
    value = _loglik_terms(eta, y) - (u @ u) / (2 * sigma2) - 0.5 * np.log1p(sigma2 * wk).sum()
    return float(value), u


def _information(X, codes, k, w, sigma2):
    """Schur complement of the penalized information onto beta, plus its pieces."""
    XwT = X.T * w
    A = XwT @ X
    B = codes.sums(XwT).T  # k x p
    D = codes.sums(w) + 1.0 / sigma2
    S = A - (B / D[:, None]).T @ B
    return S, B, D


def _laplace_gradient(X, y, codes, k, beta, u, sigma2):
    eta = X @ beta + codes.expand(u)
    p = expit(eta)
    w = p * (1 - p)
    S, B, D = _information(X, codes, k, w, sigma2)
    wk = D - 1.0 / sigma2
    # d/dbeta of W_k, following u_hat(beta): sum_i w_i (1 - 2 p_i) (x_i - B_k / D_k)
    c = w * (1 - 2 * p)
    dW = codes.sums(X.T * c).T - (codes.sums(c) / D)[:, None] * B
    grad = X.T @ (y - p) - 0.5 * ((sigma2 / (1 + sigma2 * wk))[:, None] * dW).sum(axis=0)
    return grad, S


def _penalized_newton(X, y, codes, k, sigma2, beta, u, names):
    """Joint Newton ascent on the penalized log-likelihood in (beta, u)."""

    def objective(b, uu):
        return _loglik_terms(X @ b + codes.expand(uu), y) - (uu @ uu) / (2 * sigma2)

    current = objective(beta, u)
    for it in range(1, MAX_ITER + 1):
        eta = X @ beta + codes.expand(u)
        p = expit(eta)
        w = p * (1 - p)
        S, B, D = _information(X, codes, k, w, sigma2)
        g_beta = X.T @ (y - p)
        g_u = codes.sums(y - p) - u / sigma2
        d_beta = np.linalg.solve(S, g_beta - B.T @ (g_u / D))
        d_u = (g_u - B @ d_beta) / D
        t = 1.0
        while True:
            nb, nu = beta + t * d_beta, u + t * d_u
            new = objective(nb, nu)
            if new >= current - 1e-12 * abs(current) or t < 1e-8:
                break
            t *= 0.5
        beta, u, current = nb, nu, new
        _check_separation(beta, names)
        if max(np.max(np.abs(t * d_beta)), np.max(np.abs(t * d_u))) < 1e-10:
            return beta, u, it, True
    return beta, u, MAX_ITER, False


def _laplace_newton(X, y, codes, k, sigma2, beta, u, names):
    """Refine beta so the gradient of the Laplace objective vanishes."""
    current, u = laplace_loglik(X, y, codes, k, beta, sigma2, u)
    for it in range(1, MAX_ITER + 1):
        grad, S = _laplace_gradient(X, y, codes, k, beta, u, sigma2)
        step = np.linalg.solve(S, grad)
        if np.max(np.abs(step)) < INNER_TOL:
            return beta, u, current, it, True
        t = 1.0
        while True:
            nb = beta + t * step
            new, nu = laplace_loglik(X, y, codes, k, nb, sigma2, u)
            if new >= current - 1e-12 * abs(current) or t < 1e-8:
                break
            t *= 0.5
        beta, u, current = nb, nu, new
        _check_separation(beta, names)
        if np.max(np.abs(t * step)) < INNER_TOL:
            return beta, u, current, it, True
    return beta, u, current, MAX_ITER, False


@dataclass
class _Fit:
    beta: np.ndarray
    u: np.ndarray
    value: float
    iterations: int
    converged: bool


def _fit_at(X, y, codes, k, sigma2, beta, u, names, warm=False) -> _Fit:
    # from a warm start the Laplace refinement alone converges quickly
    it1, ok1 = 0, True
    if not warm:
        beta, u, it1, ok1 = _penalized_newton(X, y, codes, k, sigma2, beta, u, names)
    beta, u, value, it2, ok2 = _laplace_newton(X, y, codes, k, sigma2, beta, u, names)
    return _Fit(beta, u, value, it1 + it2, ok1 and ok2)


def _plain_logistic(X, y, names):
    beta = np.zeros(X.shape[1])
    for it in range(1, MAX_ITER + 1):
        p = expit(X @ beta)
        w = p * (1 - p)
        info = (X * w[:, None]).T @ X
        step = np.linalg.solve(info, X.T @ (y - p))
        beta = beta + step
        _check_separation(beta, names)
        if np.max(np.abs(step)) < 1e-12:
            break
    p = expit(X @ beta)
    info = (X * (p * (1 - p))[:, None]).T @ X
    return beta, info, it, it < MAX_ITER


def fit_random_intercept_logit(
    X: np.ndarray,
    y: np.ndarray,
    codes: np.ndarray,
    groups: Sequence[str],
    sigma2: Optional[float] = None,
    names: Sequence[str] = COLUMNS,
    log_sigma2_bounds: tuple[float, float] = LOG_SIGMA2_BOUNDS,
    tol: float = TOL,
):
    """Fit on a prepared design. ``sigma2`` pins the random-effect variance.

    Returns ``(beta, se, sigma2, u, converged, loglik, iterations)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    k = len(groups)
    _check_design(X, names)
    codes = np.asarray(codes, dtype=np.intp)
    order = np.argsort(codes, kind="stable")
    # Fortran order makes X.T contiguous, which the group reductions run over
    X, y, codes = np.asfortranarray(X[order]), y[order], codes[order]

    if sigma2 is not None and sigma2 <= 0:
        beta, info, iters, ok = _plain_logistic(X, y, names)
        se = np.sqrt(np.diag(np.linalg.inv(info)))
        return beta, se, 0.0, np.zeros(k), ok, _loglik_terms(X @ beta, y), iters

    if k < 2:
        raise IdentifiabilityError("a random intercept needs at least two communities")

    codes = _Groups(codes, k)
    beta0, _, _, _ = _plain_logistic(X, y, names)
    state = {"beta": beta0, "u": np.zeros(k), "iters": 0, "ok": True, "warm": False}
    cache: dict[float, _Fit] = {}

    def profile(log_s2: float) -> _Fit:
        if log_s2 not in cache:
            fit = _fit_at(
                X, y, codes, k, math.exp(log_s2), state["beta"], state["u"], names, state["warm"]
            )
            state["warm"] = True
            state["beta"], state["u"] = fit.beta, fit.u
            state["iters"] += fit.iterations
            state["ok"] &= fit.converged
            cache[log_s2] = fit
        return cache[log_s2]

    if sigma2 is not None:
        log_s2 = math.log(sigma2)
        best = profile(log_s2)
        outer_ok = True
    else:
        lo, hi = log_sigma2_bounds
        c = hi - _GOLDEN * (hi - lo)
        d = lo + _GOLDEN * (hi - lo)
        outer_ok = False
        for _ in range(MAX_ITER):
            if profile(c).value >= profile(d).value:
                hi, d = d, c
                c = hi - _GOLDEN * (hi - lo)
            else:
                lo, c = c, d
                d = lo + _GOLDEN * (hi - lo)
            if hi - lo < tol:
                outer_ok = True
                break
        candidates = [lo, hi, *cache.keys()]
        log_s2 = max(candidates, key=lambda s: profile(s).value)
        best = profile(log_s2)

    s2 = math.exp(log_s2)
    eta = X @ best.beta + codes.expand(best.u)
    p = expit(eta)
    S, _, _ = _information(X, codes, k, p * (1 - p), s2)
    se = np.sqrt(np.diag(np.linalg.inv(S)))
    converged = bool(outer_ok and state["ok"])
    return best.beta, se, s2, best.u, converged, best.value, state["iters"]


def fit_mixed_logistic(
    events: Sequence[FirstPostEvent],
    kind: str = "",
    community_type: str = "",
    sigma2: Optional[float] = None,
    threshold: Optional[float] = None,
) -> EngagementModel:
    """Fit the engagement model for one (first-post kind, community type) cell.

    With ``threshold`` set, toxicity and attack enter as indicators
    (see :func:`threshold_events`).
    """
    if kind:
        events = [e for e in events if e.kind == kind]
    if threshold is not None:
        events = threshold_events(events, threshold)
    X, y, codes, groups = design_matrix(events)
    if len(y) == 0:
        raise IdentifiabilityError("no events to fit")
    beta, se, s2, u, converged, value, iters = fit_random_intercept_logit(X, y, codes, groups, sigma2)
    notes = []
    if not converged:
        notes.append("iteration cap reached")
    unscored = sum(1 for e in events if e.treated and not e.reply_scored)
    if unscored:
        notes.append(f"{unscored} treated events with unscored replies entered with zero reply features")
    return EngagementModel(
        kind=kind,
        community_type=community_type,
        beta=beta,
        se=se,
        sigma2=s2,
        u={g: float(v) for g, v in zip(groups, u)},
        converged=converged,
        loglik=value,
        n_obs=len(y),
        iterations=iters,
        notes=notes,
        feature_mode="continuous" if threshold is None else f"threshold>={threshold:g}",
    )
