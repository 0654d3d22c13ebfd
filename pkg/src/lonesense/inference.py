"""Logistic regression: unpenalized IRLS, LASSO by coordinate descent, and a
ridge-penalized per-participant intercept standing in for a random intercept.

All solvers work on z-normalized features. Objectives, on the per-observation
scale used throughout::

    F(beta) = -loglik(beta) / n + lam * sum_j |beta_j| + ridge / (2 n) * sum_g u_g^2

where ``beta_j`` are feature coefficients (the intercept is never penalized)
and ``u_g`` are participant intercept offsets. ``ridge`` is the precision of
the offsets, so ``ridge -> 0`` recovers fixed participant intercepts.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from scipy import stats
from scipy.special import expit

SEPARATION_CAP = 30.0


class SeparationWarning(RuntimeWarning):
    pass


# ---- normalization


def znormalize(X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column z-scores (sample sd). Constant columns map to 0 with sd recorded as 0."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("need at least two rows to normalize")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    constant = ~(sd > 0) | (np.ptp(X, axis=0) == 0)
    sd = np.where(constant, 0.0, sd)
    Xn = np.where(constant, 0.0, (X - mean) / np.where(constant, 1.0, sd))
    return Xn, mean, sd


def apply_normalization(X, mean, sd) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (X - mean) / safe, 0.0)


def denormalize(Xn, mean, sd) -> np.ndarray:
    Xn = np.asarray(Xn, dtype=float)
    return np.where(sd > 0, Xn * sd + mean, mean)


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    participant: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.participant is None:
            self.participant = np.zeros(self.y.size, dtype=str)
        self.participant = np.asarray(self.participant).astype(str)
        if np.isnan(self.X).any():
            raise ValueError("design has missing entries")
        if not (self.X.shape[0] == self.y.size == self.participant.size):
            raise ValueError("X, y and participant must have the same length")
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError("one name per column required")

    @classmethod
    def from_raw(cls, X, y, participant=None, feature_names=None) -> "Design":
        Xn, _, _ = znormalize(X)
        names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(Xn.shape[1])]
        return cls(Xn, y, participant, names)

    @property
    def n(self) -> int:
        return self.y.size

    def column(self, j: int) -> "Design":
        return Design(self.X[:, [j]], self.y, self.participant, [self.feature_names[j]])

    def groups(self) -> tuple[list[str], np.ndarray]:
        levels, codes = np.unique(self.participant, return_inverse=True)
        return [str(v) for v in levels], codes.ravel()


@dataclass(frozen=True)
class Penalty:
    lasso: float = 0.0
    ridge: float | None = None  # None: no participant offsets

    @classmethod
    def none(cls) -> "Penalty":
        return cls()

    @classmethod
    def lasso_(cls, lam: float) -> "Penalty":
        return cls(lasso=lam)

    @classmethod
    def ridge_intercepts(cls, ridge: float, lasso: float = 0.0) -> "Penalty":
        return cls(lasso=lasso, ridge=ridge)

    @property
    def kind(self) -> str:
        if self.ridge is not None:
            return "ridge-intercepts"
        return "lasso" if self.lasso > 0 else "none"


@dataclass
class FitResult:
    coef: np.ndarray  # intercept first
    se: np.ndarray
    z: np.ndarray
    pvalue: np.ndarray
    loglik: float
    aic: float
    feature_names: list[str]
    penalty: Penalty
    n_iter: int = 0
    converged: bool = True
    separated: bool = False
    offsets: dict[str, float] = field(default_factory=dict)
    trace: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.coef))

    @property
    def support(self) -> list[str]:
        return [n for n, b in zip(self.feature_names, self.coef[1:]) if b != 0]


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # log sigma(eta) = -log(1 + exp(-eta)), computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _augmented(d: Design, with_groups: bool):
    n = d.n
    cols = [np.ones((n, 1)), d.X]
    levels: list[str] = []
    if with_groups:
        levels, codes = d.groups()
        onehot = np.zeros((n, len(levels)))
        onehot[np.arange(n), codes] = 1.0
        cols.append(onehot)
    return np.hstack(cols), levels


def _irls(Z, y, ridge_diag, max_iter=100, tol=1e-8):
    """Newton-Raphson with step halving on the (ridge-)penalized log-likelihood.

    The gradient is a sum over rows, so the stopping tolerance is per row.
    """
    tol = tol * max(1, Z.shape[0])
    beta = np.zeros(Z.shape[1])
    eta = Z @ beta

    def pen_ll(b, e):
        return _loglik(e, y) - 0.5 * float(np.sum(ridge_diag * b * b))

    current = pen_ll(beta, eta)
    trace = [current]
    separated = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        grad = Z.T @ (y - mu) - ridge_diag * beta
        if np.linalg.norm(grad) < tol:
            converged = True
            it -= 1
            break
        w = mu * (1 - mu)
        H = (Z * w[:, None]).T @ Z + np.diag(ridge_diag)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            cand_eta = Z @ cand
            value = pen_ll(cand, cand_eta)
            if value >= current:
                break
            t /= 2
        else:
            converged = np.linalg.norm(grad) < 100 * tol
            break
        beta, eta, current = cand, cand_eta, value
        trace.append(current)
        if np.max(np.abs(beta)) > SEPARATION_CAP:
            separated = True
            break
    else:
        mu = expit(eta)
        converged = np.linalg.norm(Z.T @ (y - mu) - ridge_diag * beta) < tol
    return beta, trace, it, converged, separated


@njit(cache=True)
def _cd_quadratic(G, c, beta, l1, l2, max_cycles, tol):
    """Cyclic coordinate descent on 0.5 b'Gb - c'b + sum l1|b| + 0.5 sum l2 b^2."""
    p = beta.size
    for cycle in range(max_cycles):
        delta = 0.0
        for j in range(p):
            a = G[j, j]
            if a <= 0.0:
                continue
            g = c[j] - G[j] @ beta + a * beta[j]
            if abs(g) <= l1[j] * (1.0 + 1e-10):
                new = 0.0
            else:
                new = (g - math.copysign(l1[j], g)) / (a + l2[j])
            if new != beta[j]:
                delta = max(delta, abs(new - beta[j]))
                beta[j] = new
        if delta < tol:
            return cycle + 1
    return max_cycles


def _objective(Z, y, beta, l1, l2):
    n = y.size
    return -_loglik(Z @ beta, y) / n + float(np.sum(l1 * np.abs(beta))) + 0.5 * float(np.sum(l2 * beta * beta))


def _prox_newton(Z, y, l1, l2, beta0=None, max_outer=200, tol=1e-11):
    """Proximal Newton: CD on the local quadratic model, then a backtracking step.

    The penalized objective is non-increasing across outer iterations.
    """
    n = y.size
    beta = np.zeros(Z.shape[1]) if beta0 is None else beta0.astype(float).copy()
    current = _objective(Z, y, beta, l1, l2)
    trace = [current]
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        eta = Z @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-10)
        zw = eta + (y - mu) / w
        G = (Z * (w / n)[:, None]).T @ Z
        c = Z.T @ (w * zw) / n
        new = beta.copy()
        _cd_quadratic(G, c, new, l1, l2, 10_000, 1e-13)
        step = new - beta
        if np.max(np.abs(step)) < tol:
            converged = True
            break
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            value = _objective(Z, y, cand, l1, l2)
            if value <= current:
                break
            t /= 2
        else:
            converged = True
            break
        moved = np.max(np.abs(cand - beta))
        beta, current = cand, value
        trace.append(current)
        if moved < tol:
            converged = True
            break
    return beta, trace, it, converged


def _wald(coef, cov_diag):
    with np.errstate(invalid="ignore", divide="ignore"):
        se = np.sqrt(cov_diag)
        z = coef / se
    p = 2 * stats.norm.sf(np.abs(z))
    return se, z, p


def logistic_fit(d: Design, penalty: Penalty | None = None, start: np.ndarray | None = None) -> FitResult:
    """Fit a logistic model under the given penalty (see module docstring)."""
    penalty = penalty or Penalty.none()
    y = d.y
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    with_groups = penalty.ridge is not None
    Z, levels = _augmented(d, with_groups)
    p = d.X.shape[1]
    n_cols = Z.shape[1]
    ridge_diag = np.zeros(n_cols)
    if with_groups:
        ridge_diag[1 + p:] = penalty.ridge
        # offsets are identified only relative to the intercept; a vanishing
        # ridge would leave that direction flat
        ridge_diag[1 + p:] = max(penalty.ridge, 1e-8)

    separated = False
    if penalty.lasso > 0 or start is not None:
        l1 = np.zeros(n_cols)
        l1[1:1 + p] = penalty.lasso
        l2 = ridge_diag / d.n
        beta, trace, it, converged = _prox_newton(Z, y, l1, l2, start)
        se = z = pv = np.full(1 + p, np.nan)
    else:
        beta, trace, it, converged, separated = _irls(Z, y, ridge_diag)
        if separated:
            warnings.warn("complete or quasi-complete separation; coefficients capped", SeparationWarning,
                          stacklevel=2)
            beta = np.clip(beta, -SEPARATION_CAP, SEPARATION_CAP)
        mu = expit(Z @ beta)
        H = (Z * (mu * (1 - mu))[:, None]).T @ Z + np.diag(ridge_diag)
        try:
            cov = np.linalg.inv(H)
            se, z, pv = _wald(beta[:1 + p], np.diag(cov)[:1 + p])
        except np.linalg.LinAlgError:
            se = z = pv = np.full(1 + p, np.nan)
    if not converged and not separated:
        warnings.warn(f"logistic fit did not converge in {it} iterations", RuntimeWarning, stacklevel=2)
    coef = beta[:1 + p].copy()
    ll = _loglik(Z @ beta, y)
    k = int(np.count_nonzero(coef))
    return FitResult(coef, se, z, pv, ll, 2 * k - 2 * ll, list(d.feature_names), penalty,
                     n_iter=it, converged=bool(converged), separated=separated,
                     offsets=dict(zip(levels, beta[1 + p:].tolist())), trace=trace)


def gradient(d: Design, fit: FitResult) -> np.ndarray:
    """Per-observation-scale gradient of the smooth part for the feature coefficients."""
    with_groups = fit.penalty.ridge is not None
    Z, levels = _augmented(d, with_groups)
    beta = np.concatenate([fit.coef, [fit.offsets[g] for g in levels]]) if with_groups else fit.coef
    mu = expit(Z @ beta)
    return (d.X.T @ (d.y - mu)) / d.n


def kkt_residual(d: Design, fit: FitResult) -> float:
    """Largest violation of the LASSO optimality conditions over features."""
    g = gradient(d, fit)
    lam = fit.penalty.lasso
    b = fit.coef[1:]
    zero = b == 0
    viol = np.where(zero, np.maximum(np.abs(g) - lam, 0.0), np.abs(g - lam * np.sign(b)))
    return float(viol.max()) if viol.size else 0.0


def lambda_max(d: Design, ridge: float | None = None) -> float:
    """Smallest LASSO penalty at which every feature coefficient is zero."""
    null = Design(np.zeros((d.n, 0)), d.y, d.participant, [])
    fit = logistic_fit(null, Penalty(ridge=ridge))
    Z, levels = _augmented(null, ridge is not None)
    beta = np.concatenate([fit.coef, [fit.offsets[g] for g in levels]]) if levels else fit.coef
    mu = expit(Z @ beta)
    return float(np.max(np.abs(d.X.T @ (d.y - mu))) / d.n)


def lambda_grid(d: Design, n: int = 50, ratio: float = 1e-4, ridge: float | None = None) -> np.ndarray:
    lmax = lambda_max(d, ridge)
    return np.logspace(math.log10(lmax), math.log10(lmax * ratio), n)


def lasso_path(d: Design, lambdas: Sequence[float] | None = None, ridge: float | None = None) -> list[FitResult]:
    lambdas = lambda_grid(d, ridge=ridge) if lambdas is None else np.asarray(lambdas, dtype=float)
    if lambdas.size < 2 or np.any(np.diff(lambdas) > 0):
        raise ValueError("lambda grid must be descending with at least two values")
    path = []
    start = None
    for lam in lambdas:
        fit = logistic_fit(d, Penalty(lasso=float(lam), ridge=ridge), start=start)
        path.append(fit)
        start = np.concatenate([fit.coef, list(fit.offsets.values())]) if ridge is not None else fit.coef
    return path


def select_by_aic(path: Sequence[FitResult]) -> FitResult:
    return min(path, key=lambda f: f.aic)


def choose_ridge(d: Design, grid: Sequence[float] = tuple(np.logspace(-1, 2.5, 8)), folds: int = 5,
                 seed: int = 0) -> float:
    """Offset precision minimizing 5-fold held-out deviance of the intercept-only model."""
    rng = np.random.default_rng(seed)
    fold = rng.permutation(d.n) % folds
    null_x = np.zeros((d.n, 0))
    best, best_dev = None, math.inf
    for ridge in grid:
        dev = 0.0
        for k in range(folds):
            tr, te = fold != k, fold == k
            if d.y[tr].min() == d.y[tr].max():
                continue
            fit = logistic_fit(Design(null_x[tr], d.y[tr], d.participant[tr], []), Penalty(ridge=ridge))
            off = np.array([fit.offsets.get(g, 0.0) for g in d.participant[te]])
            eta = fit.coef[0] + off
            dev += -2 * _loglik(eta, d.y[te])
        if dev < best_dev:
            best, best_dev = float(ridge), dev
    return best


# ---- univariate screening and the regression table


def stars(p: float) -> str:
    if not p == p:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


@dataclass(frozen=True)
class ScreenRow:
    feature: str
    coef: float
    se: float
    pvalue: float
    stars: str


def univariate_screen(d: Design, ridge: float | None = None) -> list[ScreenRow]:
    """One single-feature model per column; ``ridge`` adds participant offsets."""
    rows = []
    for j, name in enumerate(d.feature_names):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeparationWarning)
            fit = logistic_fit(d.column(j), Penalty(ridge=ridge))
        rows.append(ScreenRow(name, float(fit.coef[1]), float(fit.se[1]), float(fit.pvalue[1]),
                              stars(float(fit.pvalue[1]))))
    return rows


@dataclass
class RegressionTable:
    features: list[str]
    pooled: list[ScreenRow]
    pooled_lasso: FitResult
    mixed: list[ScreenRow]
    mixed_lasso: FitResult
    ridge: float

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "pooled_univariate", "pooled_stars", "pooled_lasso",
                        "mixed_univariate", "mixed_stars", "mixed_lasso"])
            for j, name in enumerate(self.features):
                pl = self.pooled_lasso.coef[1 + j]
                ml = self.mixed_lasso.coef[1 + j]
                w.writerow([name, f"{self.pooled[j].coef:.4f}", self.pooled[j].stars,
                            f"{pl:.4f}" if pl != 0 else "",
                            f"{self.mixed[j].coef:.4f}", self.mixed[j].stars,
                            f"{ml:.4f}" if ml != 0 else ""])


def regression_table(d: Design, ridge: float | None = None, seed: int = 0) -> RegressionTable:
    if ridge is None:
        ridge = choose_ridge(d, seed=seed)
    pooled = univariate_screen(d)
    pooled_lasso = select_by_aic(lasso_path(d))
    mixed = univariate_screen(d, ridge=ridge)
    mixed_lasso = select_by_aic(lasso_path(d, ridge=ridge))
    return RegressionTable(list(d.feature_names), pooled, pooled_lasso, mixed, mixed_lasso, ridge)
