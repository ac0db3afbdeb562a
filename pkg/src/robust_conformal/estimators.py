"""Built-in nuisance learners: lasso mean regressor, logistic density ratio and
propensity models, and a nearest-neighbour conditional CDF of scores.

Any object with the same ``predict`` / ``ratio`` / ``propensity`` / ``cdf``
methods can stand in for these; the conformal routines never inspect the
learner internals. See :class:`Learners`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np


class FitError(ValueError):
    pass


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean, scale)

    def transform(self, X) -> np.ndarray:
        return (_as_matrix(X) - self.mean) / self.scale


# --------------------------------------------------------------------------
# lasso


@dataclass(frozen=True)
class RegressionModel:
    coef: np.ndarray
    intercept: float
    lam: float
    cv_mse: np.ndarray | None = None

    def predict(self, X) -> np.ndarray:
        return _as_matrix(X) @ self.coef + self.intercept


def _soft(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def lasso_objective(G: np.ndarray, c: np.ndarray, yy: float, b: np.ndarray, lam: float) -> float:
    # (1/2n)||y - Xb||^2 + lam ||b||_1 written through the Gram matrix G = X'X/n
    return 0.5 * (yy - 2.0 * c @ b + b @ G @ b) + lam * np.abs(b).sum()


def lasso_cd(
    G: np.ndarray,
    c: np.ndarray,
    lam: float,
    b0: np.ndarray | None = None,
    tol: float = 1e-7,
    max_sweeps: int = 1000,
    yy: float | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Cyclic coordinate descent for the lasso in Gram form.

    Returns the coefficients and, if ``yy = y'y/n`` is given, the objective
    after every sweep.
    """
    d = c.size
    b = np.zeros(d) if b0 is None else b0.astype(float).copy()
    grad = c - G @ b  # X'(y - Xb)/n
    diag = np.diag(G).copy()
    history: list[float] = []
    active = np.arange(d)
    full_pass = True
    for _ in range(max_sweeps):
        coords = np.arange(d) if full_pass else active
        max_delta = 0.0
        for j in coords:
            gjj = diag[j]
            if gjj <= 0.0:
                continue
            bj = b[j]
            new = _soft(grad[j] + gjj * bj, lam) / gjj
            delta = new - bj
            if delta != 0.0:
                b[j] = new
                grad -= G[:, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if yy is not None:
            history.append(lasso_objective(G, c, yy, b, lam))
        if max_delta < tol:
            if full_pass:
                break
            full_pass = True
        else:
            full_pass = False
            active = np.flatnonzero(b)
            if active.size == 0:
                full_pass = True
    return b, history


def default_lambda_grid(X: np.ndarray, y: np.ndarray, n_lambda: int = 20, ratio: float = 1e-3) -> np.ndarray:
    Xs = Standardizer.fit(X).transform(X)
    lam_max = np.max(np.abs(Xs.T @ (y - y.mean()))) / len(y)
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def _fit_path(Xs: np.ndarray, yc: np.ndarray, grid: np.ndarray) -> list[np.ndarray]:
    n = len(yc)
    G = Xs.T @ Xs / n
    c = Xs.T @ yc / n
    out = []
    b = None
    for lam in grid:
        b, _ = lasso_cd(G, c, lam, b0=b)
        out.append(b.copy())
    return out


def fit_mean_regressor(
    X,
    y,
    lambda_grid=None,
    n_folds: int = 5,
    seed: int = 0,
) -> RegressionModel:
    """L1-penalised least squares with the penalty chosen by k-fold CV MSE."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2 or X.shape[0] != y.shape[0]:
        raise FitError("need at least 2 labelled rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FitError("non-finite entries in regression data")
    n = X.shape[0]
    if lambda_grid is None:
        grid = default_lambda_grid(X, y)
    else:
        grid = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
        if np.any(grid < 0):
            raise FitError("lambda grid must be nonnegative")

    cv_mse = None
    if grid.size > 1:
        k = min(n_folds, n)
        folds = np.random.default_rng(seed).permutation(n) % k
        cv_mse = np.zeros(grid.size)
        for f in range(k):
            tr, va = folds != f, folds == f
            std = Standardizer.fit(X[tr])
            ym = y[tr].mean()
            path = _fit_path(std.transform(X[tr]), y[tr] - ym, grid)
            Xv = std.transform(X[va])
            with np.errstate(over="ignore", invalid="ignore"):
                for i, b in enumerate(path):
                    cv_mse[i] += np.sum((y[va] - ym - Xv @ b) ** 2)
        cv_mse /= n
        if not np.any(np.isfinite(cv_mse)):
            raise FitError("cross-validated error is not finite; rescale the outcome")
        lam = float(grid[int(np.argmin(cv_mse))])
        fit_grid = grid[: int(np.argmin(cv_mse)) + 1]
    else:
        lam = float(grid[0])
        fit_grid = grid

    std = Standardizer.fit(X)
    ym = y.mean()
    b = _fit_path(std.transform(X), y - ym, fit_grid)[-1]
    coef = b / std.scale
    intercept = float(ym - std.mean @ coef)
    return RegressionModel(coef, intercept, lam, cv_mse)


# --------------------------------------------------------------------------
# logistic models


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_logistic(
    X: np.ndarray,
    labels: np.ndarray,
    l2: float = 1e-3,
    max_iter: int = 5000,
    tol: float = 1e-8,
) -> tuple[Standardizer, np.ndarray, float, bool]:
    """Penalised logistic regression by Nesterov-accelerated gradient descent.

    Returns the feature standardizer, coefficients, intercept and a flag that
    is set when the training data are perfectly separated.
    """
    X = _as_matrix(X)
    a = np.asarray(labels, dtype=float)
    std = Standardizer.fit(X)
    Z = np.hstack([np.ones((X.shape[0], 1)), std.transform(X)])
    n, p = Z.shape
    pen = np.full(p, l2)
    pen[0] = 0.0
    # Lipschitz bound of the mean log-loss gradient
    L = np.linalg.norm(Z, 2) ** 2 / (4.0 * n) + l2
    step = 1.0 / L
    theta = np.zeros(p)
    theta[0] = math.log(max(a.mean(), 1e-12) / max(1.0 - a.mean(), 1e-12))
    v = theta.copy()
    t = 1.0
    for _ in range(max_iter):
        grad = Z.T @ (_sigmoid(Z @ v) - a) / n + pen * v
        new = v - step * grad
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        v = new + ((t - 1.0) / t_next) * (new - theta)
        done = np.max(np.abs(new - theta)) < tol
        theta, t = new, t_next
        if done:
            break
    margin = (2.0 * a - 1.0) * (Z @ theta)
    separated = bool(np.all(margin > 0))
    return std, theta[1:], float(theta[0]), separated


@dataclass(frozen=True)
class DensityRatioModel:
    """Odds of a target-vs-source membership classifier, clipped to ``[w_lo, w_hi]``."""

    std: Standardizer
    coef: np.ndarray
    intercept: float
    w_lo: float = 1e-3
    w_hi: float = 1e3
    separated: bool = False

    def logit(self, X) -> np.ndarray:
        return self.std.transform(X) @ self.coef + self.intercept

    def ratio(self, X) -> np.ndarray:
        z = np.clip(self.logit(X), math.log(self.w_lo), math.log(self.w_hi))
        return np.exp(z)

    __call__ = ratio


def fit_density_ratio(
    source_covariates,
    target_covariates,
    w_lo: float = 1e-3,
    w_hi: float = 1e3,
    l2: float = 1e-3,
) -> DensityRatioModel:
    Xs = _as_matrix(source_covariates)
    Xt = _as_matrix(target_covariates)
    if Xs.shape[0] == 0 or Xt.shape[0] == 0:
        raise FitError("source and target samples must be nonempty")
    if not 0 < w_lo <= w_hi < math.inf:
        raise FitError("clip bounds must satisfy 0 < w_lo <= w_hi < inf")
    X = np.vstack([Xs, Xt])
    a = np.r_[np.zeros(len(Xs)), np.ones(len(Xt))]
    std, coef, b0, separated = fit_logistic(X, a, l2=l2)
    if separated:
        warnings.warn("source and target are perfectly separated; density ratio is clipped", RuntimeWarning)
    return DensityRatioModel(std, coef, b0, w_lo, w_hi, separated)


@dataclass(frozen=True)
class PropensityModel:
    std: Standardizer
    coef: np.ndarray
    intercept: float
    eps: float = 0.01
    separated: bool = False

    def propensity(self, X) -> np.ndarray:
        z = self.std.transform(X) @ self.coef + self.intercept
        return np.clip(_sigmoid(z), self.eps, 1.0 - self.eps)

    __call__ = propensity


def fit_propensity(covariates, treatments, eps: float = 0.01, l2: float = 1e-3) -> PropensityModel:
    X = _as_matrix(covariates)
    t = np.asarray(treatments, dtype=float)
    if X.shape[0] == 0:
        raise FitError("empty covariate sample")
    if not np.all((t == 0) | (t == 1)):
        raise FitError("treatments must be 0/1")
    if t.min() == t.max():
        raise FitError("degenerate treatment arm")
    std, coef, b0, separated = fit_logistic(X, t, l2=l2)
    if separated:
        warnings.warn("treatment arms are perfectly separated; propensity is clipped", RuntimeWarning)
    return PropensityModel(std, coef, b0, eps, separated)


# --------------------------------------------------------------------------
# conditional CDF of scores


@dataclass(frozen=True)
class ConditionalCDFModel:
    std: Standardizer
    train_x: np.ndarray
    scores: np.ndarray
    k: int

    def neighbor_scores(self, X) -> np.ndarray:
        Q = self.std.transform(X)
        d2 = (
            np.sum(Q * Q, axis=1)[:, None]
            - 2.0 * Q @ self.train_x.T
            + np.sum(self.train_x * self.train_x, axis=1)[None, :]
        )
        idx = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        return np.sort(self.scores[idx], axis=1)

    def cdf(self, X, t) -> np.ndarray:
        """m(x; t) for every row of ``X`` and every ``t``; shape (len(X), len(t))."""
        nb = self.neighbor_scores(X)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        counts = np.empty((nb.shape[0], t.size))
        for i, row in enumerate(nb):
            counts[i] = np.searchsorted(row, t, side="right")
        return counts / self.k


def fit_conditional_cdf(covariates, scores, k: int | None = None) -> ConditionalCDFModel:
    X = _as_matrix(covariates)
    s = np.asarray(scores, dtype=float)
    n = X.shape[0]
    if k is None:
        k = math.ceil(math.sqrt(n))
    if k <= 0:
        raise FitError("neighbour count k must be positive")
    if k > n:
        raise FitError("neighbour count k exceeds the number of rows")
    std = Standardizer.fit(X)
    return ConditionalCDFModel(std, std.transform(X), s, int(k))


# --------------------------------------------------------------------------
# scores


class ScoreKind(str, Enum):
    ABS_RESIDUAL = "AbsResidual"


@dataclass(frozen=True)
class ScoreFunction:
    model: object
    kind: ScoreKind = ScoreKind.ABS_RESIDUAL

    def __call__(self, X, y) -> np.ndarray:
        return np.abs(np.asarray(y, dtype=float) - self.model.predict(X))


def apply_score(fn: ScoreFunction, x, y):
    out = fn(_as_matrix(x), np.atleast_1d(y))
    return float(out[0]) if np.ndim(y) == 0 else out


@dataclass(frozen=True)
class Learners:
    """Fitting callables used by the pipelines; swap any of them for a custom learner."""

    regressor: Callable = fit_mean_regressor
    density_ratio: Callable = fit_density_ratio
    conditional_cdf: Callable = fit_conditional_cdf
    propensity: Callable = fit_propensity
