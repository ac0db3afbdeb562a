"""Split conformal prediction under a decomposed distribution shift.

Four methods share one engine:

* ``CP``   plain split conformal (no weights, no robustness)
* ``WCP``  weighted by the covariate likelihood ratio
* ``RCP``  unweighted, calibrated at the robust level ``g_inverse(1 - alpha)``
* ``WRCP`` weighted *and* robust

Fitted models are immutable, so thresholds for different test points (or
different configurations) can be computed concurrently against one fit.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .divergence import KL, FDivergenceSpec, g_inverse, get_divergence
from .estimators import Learners, ScoreFunction, _as_matrix
from .quantile import (
    ScoreSet,
    conformal_quantile,
    weighted_quantile,
    weighted_quantile_batch,
)


class Method(str, Enum):
    CP = "CP"
    WCP = "WCP"
    RCP = "RCP"
    WRCP = "WRCP"
    DWRCP = "D-WRCP"

    @classmethod
    def parse(cls, name: str) -> "Method":
        for m in cls:
            if name in (m.value, m.name):
                return m
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown method {name!r}; valid methods: {valid}")

    @property
    def weighted(self) -> bool:
        return self in (Method.WCP, Method.WRCP, Method.DWRCP)

    @property
    def robust(self) -> bool:
        return self in (Method.RCP, Method.WRCP, Method.DWRCP)


@dataclass(frozen=True)
class MethodConfig:
    method: Method = Method.WRCP
    divergence: FDivergenceSpec = KL
    rho: float = 0.0
    alpha: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method) if isinstance(self.method, str) else self.method)
        object.__setattr__(self, "divergence", get_divergence(self.divergence))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if not self.method.robust and self.rho != 0.0:
            raise ValueError(f"{self.method.value} has no robustness radius; rho must be 0")

    @property
    def level(self) -> float:
        """Calibration level: ``1 - alpha`` inflated to ``g_inverse(1 - alpha)``."""
        if not self.method.robust:
            return 1.0 - self.alpha
        return _robust_level(self.divergence, self.rho, self.alpha)


@lru_cache(maxsize=1024)
def _robust_level(spec: FDivergenceSpec, rho: float, alpha: float) -> float:
    return g_inverse(spec, rho, 1.0 - alpha)


@dataclass(frozen=True)
class SplitPlan:
    tr0: np.ndarray
    tr1: np.ndarray
    test0: np.ndarray
    test1: np.ndarray
    seed: int | None = None

    def train_fold(self, k: int) -> np.ndarray:
        return self.tr1 if k else self.tr0

    def test_fold(self, k: int) -> np.ndarray:
        return self.test1 if k else self.test0

    def swapped(self) -> "SplitPlan":
        return SplitPlan(self.tr1, self.tr0, self.test1, self.test0, self.seed)


def _halves(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    cut = (n + 1) // 2  # the extra point of an odd count goes to fold 0
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def make_split_plan(n_train: int, n_test: int, seed: int | None = 0) -> SplitPlan:
    rng = np.random.default_rng(seed)
    tr0, tr1 = _halves(n_train, rng)
    te0, te1 = _halves(n_test, rng)
    return SplitPlan(tr0, tr1, te0, te1, seed)


@dataclass(frozen=True)
class PredictionInterval:
    threshold: float
    center: float
    fold: int = -1

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.threshold)

    @property
    def lower(self) -> float:
        return -math.inf if self.is_infinite else self.center - self.threshold

    @property
    def upper(self) -> float:
        return math.inf if self.is_infinite else self.center + self.threshold

    @property
    def length(self) -> float:
        return math.inf if self.is_infinite else 2.0 * self.threshold

    def __contains__(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def build_interval(x, model, threshold: float, fold: int = -1) -> PredictionInterval:
    """Invert the absolute-residual score at ``x``: ``[mu(x) - q, mu(x) + q]``."""
    if threshold < 0:
        raise ValueError("absolute-residual threshold must be nonnegative")
    center = float(model.predict(np.atleast_1d(np.asarray(x, dtype=float))[None, :])[0])
    return PredictionInterval(float(threshold), center, fold)


def wrcp_threshold(cal_scores, cal_raw_weights, test_raw_weight: float, cfg: MethodConfig) -> float:
    """Score threshold for one test point."""
    if not cfg.method.weighted:
        return conformal_quantile(cfg.level, cal_scores)
    return weighted_quantile(cfg.level, ScoreSet.from_raw(cal_scores, cal_raw_weights, test_raw_weight))


def thresholds_batch(cal_scores, cal_raw_weights, test_raw_weights, cfg: MethodConfig) -> np.ndarray:
    """:func:`wrcp_threshold` for many test points sharing one calibration fold."""
    tw = np.atleast_1d(np.asarray(test_raw_weights, dtype=float))
    if not cfg.method.weighted:
        return np.full(tw.shape, conformal_quantile(cfg.level, cal_scores))
    return weighted_quantile_batch(cfg.level, cal_scores, cal_raw_weights, tw)


def rho_rcp_adjust(rho: float, ratio_model: Callable, target_sample, source_sample) -> float:
    """Radius for unweighted RCP: ``rho`` plus a plug-in estimate of KL(Q_X || P_X).

    The ratio is self-normalised by its mean over ``source_sample`` so the
    classifier's arbitrary scale cancels; a negative Monte Carlo estimate is
    floored to zero.
    """
    w_t = np.asarray(ratio_model(_as_matrix(target_sample)), dtype=float)
    w_s = np.asarray(ratio_model(_as_matrix(source_sample)), dtype=float)
    kl = float(np.mean(np.log(w_t / w_s.mean())))
    return rho + max(kl, 0.0)


@dataclass
class WRCPFit:
    """Models fitted by the weighted robust procedure on one split.

    ``ratio`` holds the weight function used for test fold ``k``: either the
    known likelihood ratio or the classifier trained against the other fold.
    """

    plan: SplitPlan
    mu: object
    cal_x: np.ndarray
    cal_scores: np.ndarray
    test_x: np.ndarray
    ratio: dict = field(default_factory=dict)
    known_w: bool = False

    def fold_weights(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        w = self.ratio[k]
        return np.asarray(w(self.cal_x), float), np.asarray(w(self.test_x[self.plan.test_fold(k)]), float)

    def thresholds(self, cfg: MethodConfig, folds: Sequence[int] = (0, 1)) -> dict[int, np.ndarray]:
        out = {}
        for k in folds:
            idx = self.plan.test_fold(k)
            if cfg.method.weighted:
                cal_w, test_w = self.fold_weights(k)
            else:
                cal_w, test_w = np.ones(len(self.cal_scores)), np.ones(len(idx))
            out[k] = thresholds_batch(self.cal_scores, cal_w, test_w, cfg)
        return out

    def intervals(self, cfg: MethodConfig, folds: Sequence[int] = (0, 1)) -> list[PredictionInterval]:
        centers = self.mu.predict(self.test_x)
        result: list[PredictionInterval | None] = [None] * len(self.test_x)
        for k, q in self.thresholds(cfg, folds).items():
            for i, qi in zip(self.plan.test_fold(k), q):
                result[i] = PredictionInterval(float(qi), float(centers[i]), k)
        return [r for r in result if r is not None]


def fit_wrcp(
    train_x,
    train_y,
    test_x,
    known_w: Callable | None = None,
    seed: int | None = 0,
    learners: Learners | None = None,
    plan: SplitPlan | None = None,
    fit_ratio: bool = True,
) -> WRCPFit:
    """Split the data, fit the mean model and (unless known) the weight models."""
    learners = learners or Learners()
    X = _as_matrix(train_x)
    y = np.asarray(train_y, dtype=float)
    Xt = _as_matrix(test_x)
    if plan is None:
        plan = make_split_plan(len(X), len(Xt), seed)
    if len(plan.tr0) == 0 or len(plan.tr1) == 0:
        raise ValueError("empty training fold")
    mu = learners.regressor(X[plan.tr0], y[plan.tr0])
    score = ScoreFunction(mu)
    cal_x = X[plan.tr1]
    fit = WRCPFit(plan, mu, cal_x, score(cal_x, y[plan.tr1]), Xt, known_w=known_w is not None)
    if known_w is not None:
        fit.ratio = {0: known_w, 1: known_w}
    elif fit_ratio:
        for k in (0, 1):
            other = plan.test_fold(1 - k)
            if len(other) == 0 or len(plan.test_fold(k)) == 0:
                raise ValueError("empty test fold")
            fit.ratio[k] = learners.density_ratio(X[plan.tr0], Xt[other])
    return fit


def run_wrcp(
    train_x,
    train_y,
    test_x,
    cfg: MethodConfig,
    known_w: Callable | None = None,
    seed: int | None = 0,
    learners: Learners | None = None,
    plan: SplitPlan | None = None,
    leave_one_out: bool = False,
) -> list[PredictionInterval]:
    """Weighted robust conformal intervals for every test point, in input order.

    With ``leave_one_out`` each test point's classifier is trained on the
    fitting fold plus all *other* test points instead of the opposite test
    fold; one classifier per test point, so only sensible for small test sets.
    """
    learners = learners or Learners()
    loo = leave_one_out and known_w is None and cfg.method.weighted
    fit = fit_wrcp(train_x, train_y, test_x, known_w, seed, learners, plan, fit_ratio=not loo)
    if not loo:
        return fit.intervals(cfg)
    X0 = _as_matrix(train_x)[fit.plan.tr0]
    centers = fit.mu.predict(fit.test_x)
    out: list[PredictionInterval | None] = [None] * len(fit.test_x)
    for k in (0, 1):
        for j in fit.plan.test_fold(k):
            rest = np.delete(fit.test_x, j, axis=0)
            if len(rest) == 0:
                raise ValueError("leave-one-out needs at least two test points")
            w = learners.density_ratio(X0, rest)
            q = wrcp_threshold(fit.cal_scores, w(fit.cal_x), float(w(fit.test_x[j : j + 1])[0]), cfg)
            out[j] = PredictionInterval(q, float(centers[j]), k)
    return out
