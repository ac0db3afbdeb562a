"""Doubly robust (debiased) weighted robust conformal prediction.

The coverage probability at threshold ``t`` under the covariate-shifted law
is estimated by an augmented estimator that combines the weight model with a
conditional CDF model of the score; its error is a *product* of the two
models' errors. The estimate is not monotone in ``t``, so thresholds are read
off its suffix infimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conformal import MethodConfig, PredictionInterval, SplitPlan, make_split_plan
from .estimators import Learners, ScoreFunction, _as_matrix


@dataclass(frozen=True)
class CoverageCurve:
    thresholds: np.ndarray
    values: np.ndarray
    suffix_inf: np.ndarray

    @classmethod
    def from_values(cls, thresholds, values) -> "CoverageCurve":
        t = np.asarray(thresholds, dtype=float)
        v = np.asarray(values, dtype=float)
        if t.shape != v.shape:
            raise ValueError("thresholds and values must align")
        if np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        return cls(t, v, suffix_min(v))


def suffix_min(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """``out[..., j] = min(values[..., j:])``."""
    rev = np.flip(values, axis=axis)
    return np.flip(np.minimum.accumulate(rev, axis=axis), axis=axis)


def phat(t: float, scores, weights, cal_cdf, test_cdf_avg: float) -> float:
    """Augmented coverage estimate at ``t``.

    ``cal_cdf[i]`` is the CDF model evaluated at calibration point ``i`` and
    ``t``; ``test_cdf_avg`` is its average over the test fold minus the unit
    being covered. The value may leave [0, 1].
    """
    s = np.asarray(scores, dtype=float)
    w = np.asarray(weights, dtype=float)
    m = np.asarray(cal_cdf, dtype=float)
    if s.size == 0:
        raise ValueError("empty calibration fold")
    total = w.sum()
    if not total > 0:
        raise ValueError("calibration weights must have positive sum")
    return float(np.sum(w * ((s <= t) - m)) / total + test_cdf_avg)


def monotonized_threshold(curve: CoverageCurve, target_level: float) -> float:
    """Smallest candidate whose suffix infimum reaches ``target_level``; +inf if none."""
    hits = np.flatnonzero(curve.suffix_inf >= target_level)
    if hits.size == 0:
        return math.inf
    return float(curve.thresholds[hits[0]])


@dataclass(frozen=True)
class DebiasedFold:
    """Read-only tables for one cross-fitting fold.

    ``calib_term[j]`` is the weighted calibration residual at candidate ``j``;
    ``test_cdf[l, j]`` the CDF model at test unit ``l``. Every test unit's curve
    is ``calib_term + (sum(test_cdf) - test_cdf[l]) / (m - 1)``.
    """

    candidates: np.ndarray
    calib_term: np.ndarray
    test_cdf: np.ndarray

    @classmethod
    def build(cls, cal_x, cal_scores, cal_weights, cdf_model, test_x) -> "DebiasedFold":
        s = np.asarray(cal_scores, dtype=float)
        w = np.asarray(cal_weights, dtype=float)
        if s.size == 0:
            raise ValueError("empty calibration fold")
        if not w.sum() > 0:
            raise ValueError("calibration weights must have positive sum")
        t = np.unique(s)
        ind = (s[:, None] <= t[None, :]).astype(float)
        m_cal = cdf_model.cdf(cal_x, t)
        calib = (w @ (ind - m_cal)) / w.sum()
        m_test = cdf_model.cdf(test_x, t)
        # candidate +inf: indicator and CDF are both 1
        return cls(
            np.append(t, math.inf),
            np.append(calib, 0.0),
            np.hstack([m_test, np.ones((m_test.shape[0], 1))]),
        )

    def curves(self) -> np.ndarray:
        m = self.test_cdf.shape[0]
        if m < 2:
            raise ValueError("need at least two test units to form a leave-one-out average")
        loo_avg = (self.test_cdf.sum(axis=0)[None, :] - self.test_cdf) / (m - 1)
        return self.calib_term[None, :] + loo_avg

    def curve(self, unit: int) -> CoverageCurve:
        values = self.curves()[unit]
        return CoverageCurve(self.candidates, values, suffix_min(values))

    def thresholds(self, level: float) -> np.ndarray:
        inf_curves = suffix_min(self.curves(), axis=1)
        ok = inf_curves >= level
        out = np.full(ok.shape[0], math.inf)
        has = ok.any(axis=1)
        out[has] = self.candidates[ok.argmax(axis=1)[has]]
        return out


def fit_debiased_fold(
    X: np.ndarray,
    y: np.ndarray,
    Xt: np.ndarray,
    plan: SplitPlan,
    k: int,
    learners: Learners,
    mu=None,
    ratio=None,
) -> tuple[object, DebiasedFold]:
    """Fit the fold-``k`` nuisances on the opposite folds and tabulate the curves.

    ``mu`` and ``ratio`` may be passed in when they were already fitted on the
    same data (the weighted robust procedure fits identical models for ``k = 1``).
    """
    fit_tr, cal = plan.train_fold(1 - k), plan.train_fold(k)
    fit_te, tst = plan.test_fold(1 - k), plan.test_fold(k)
    if min(len(fit_tr), len(cal), len(fit_te), len(tst)) == 0:
        raise ValueError("empty fold")
    if mu is None:
        mu = learners.regressor(X[fit_tr], y[fit_tr])
    if ratio is None:
        ratio = learners.density_ratio(X[fit_tr], Xt[fit_te])
    score = ScoreFunction(mu)
    cdf_model = learners.conditional_cdf(X[fit_tr], score(X[fit_tr], y[fit_tr]))
    table = DebiasedFold.build(
        X[cal], score(X[cal], y[cal]), ratio(X[cal]), cdf_model, Xt[tst]
    )
    return mu, table


def run_dwrcp(
    train_x,
    train_y,
    test_x,
    cfg: MethodConfig,
    seed: int | None = 0,
    learners: Learners | None = None,
    plan: SplitPlan | None = None,
    folds: Sequence[int] = (0, 1),
) -> list[PredictionInterval]:
    """Cross-fitted debiased intervals, returned in test input order."""
    learners = learners or Learners()
    X = _as_matrix(train_x)
    y = np.asarray(train_y, dtype=float)
    Xt = _as_matrix(test_x)
    if plan is None:
        plan = make_split_plan(len(X), len(Xt), seed)
    level = cfg.level
    out: list[PredictionInterval | None] = [None] * len(Xt)
    for k in folds:
        mu, table = fit_debiased_fold(X, y, Xt, plan, k, learners)
        idx = plan.test_fold(k)
        centers = mu.predict(Xt[idx])
        for i, c, q in zip(idx, centers, table.thresholds(level)):
            out[i] = PredictionInterval(float(q), float(c), k)
    return [r for r in out if r is not None]
