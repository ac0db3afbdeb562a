"""Counterfactual and ITE intervals under the f-sensitivity model of hidden
confounding.

Predicting ``Y(t1)`` on the population ``T = t2`` from units observed under
``T = t1`` is a covariate shift (a function of the propensity score) plus a
conditional shift whose f-divergence is bounded by the sensitivity radius.
The caller is responsible for SUTVA: the observed ``y`` of a unit with
treatment ``t`` must be its potential outcome ``Y(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .conformal import MethodConfig, PredictionInterval, make_split_plan, thresholds_batch
from .estimators import Learners, ScoreFunction, _as_matrix

WHOLE = "whole"
Population = Union[int, str]


@dataclass(frozen=True)
class SensitivityTarget:
    """Counterfactual arm ``t1`` predicted on population ``t2`` (0, 1 or ``"whole"``)."""

    t1: int
    t2: Population

    def __post_init__(self):
        if self.t1 not in (0, 1):
            raise ValueError("t1 must be 0 or 1")
        t2 = self.t2
        if isinstance(t2, str) and t2 in ("0", "1"):
            t2 = int(t2)
        if t2 in ("o", "all", "∘"):
            t2 = WHOLE
        if t2 not in (0, 1, WHOLE):
            raise ValueError("t2 must be 0, 1 or 'whole'")
        object.__setattr__(self, "t2", t2)


@dataclass(frozen=True)
class ArmRates:
    p1: float

    def __post_init__(self):
        if not 0.0 < self.p1 < 1.0:
            raise ValueError("treated fraction must lie in (0, 1)")

    @property
    def p0(self) -> float:
        return 1.0 - self.p1


def sensitivity_weight(target: SensitivityTarget, e_x, rates: ArmRates, eps: float = 0.01):
    """Likelihood ratio of covariates from population ``t2`` against arm ``t1``."""
    e = np.clip(np.asarray(e_x, dtype=float), eps, 1.0 - eps)
    p1, p0 = rates.p1, rates.p0
    t1, t2 = target.t1, target.t2
    if t2 == t1:
        w = np.ones_like(e)
    elif t1 == 1 and t2 == 0:
        w = (1.0 - e) / e * (p1 / p0)
    elif t1 == 1:
        w = p1 / e
    elif t2 == 1:
        w = e / (1.0 - e) * (p0 / p1)
    else:
        w = p0 / (1.0 - e)
    return float(w) if np.ndim(e_x) == 0 else w


@dataclass
class CounterfactualFit:
    target: SensitivityTarget
    mu: object
    propensity: Callable
    rates: ArmRates
    cal_scores: np.ndarray
    cal_weights: np.ndarray

    def test_weights(self, test_x) -> np.ndarray:
        return sensitivity_weight(self.target, self.propensity(_as_matrix(test_x)), self.rates)

    def intervals(self, test_x, cfg: MethodConfig) -> list[PredictionInterval]:
        test_x = _as_matrix(test_x)
        q = thresholds_batch(self.cal_scores, self.cal_weights, self.test_weights(test_x), cfg)
        centers = self.mu.predict(test_x)
        return [PredictionInterval(float(qi), float(c)) for qi, c in zip(q, centers)]


def fit_counterfactual(
    x,
    t,
    y,
    target: SensitivityTarget,
    seed: int | None = 0,
    learners: Learners | None = None,
    propensity: Callable | None = None,
    eps: float = 0.01,
) -> CounterfactualFit:
    """Split, fit the arm-``t1`` outcome model and the propensity on fold 0,
    score the arm-``t1`` units of fold 1.

    A known ``propensity`` function skips the propensity fit.
    """
    learners = learners or Learners()
    X = _as_matrix(x)
    T = np.asarray(t)
    Y = np.asarray(y, dtype=float)
    if not np.all((T == 0) | (T == 1)):
        raise ValueError("treatments must be 0/1")
    plan = make_split_plan(len(X), 0, seed)
    f0, f1 = plan.tr0, plan.tr1
    arm0 = f0[T[f0] == target.t1]
    cal = f1[T[f1] == target.t1]
    if len(arm0) < 2 or len(cal) == 0:
        raise ValueError(f"empty treatment arm t={target.t1} in a fold")
    p1 = float(np.mean(T[f0] == 1))
    if not 0.0 < p1 < 1.0:
        raise ValueError("degenerate treatment arm")
    rates = ArmRates(p1)
    if propensity is None:
        model = learners.propensity(X[f0], T[f0], eps=eps)
    else:
        model = propensity
    mu = learners.regressor(X[arm0], Y[arm0])
    scores = ScoreFunction(mu)(X[cal], Y[cal])
    weights = sensitivity_weight(target, model(X[cal]), rates, eps)
    return CounterfactualFit(target, mu, model, rates, scores, np.atleast_1d(weights))


def counterfactual_interval(
    x,
    t,
    y,
    test_x,
    target: SensitivityTarget,
    cfg: MethodConfig,
    seed: int | None = 0,
    learners: Learners | None = None,
    propensity: Callable | None = None,
) -> list[PredictionInterval]:
    """Intervals for ``Y(t1)`` of test units drawn from population ``t2``."""
    fit = fit_counterfactual(x, t, y, target, seed, learners, propensity)
    return fit.intervals(test_x, cfg)


def combine_ite(treated: PredictionInterval, control: PredictionInterval) -> PredictionInterval:
    """``[L1 - U0, U1 - L0]``, which for symmetric intervals is centre difference
    plus the summed radii."""
    return PredictionInterval(treated.threshold + control.threshold, treated.center - control.center)


def ite_interval(
    x,
    t,
    y,
    test_x,
    cfg: MethodConfig,
    budget_split: tuple[float, float] | None = None,
    population: Population = WHOLE,
    seed: int | None = 0,
    learners: Learners | None = None,
    propensity: Callable | None = None,
) -> list[PredictionInterval]:
    """Union-bound interval for ``Y(1) - Y(0)`` at level ``1 - alpha``."""
    if budget_split is None:
        budget_split = (cfg.alpha / 2, cfg.alpha / 2)
    a1, a0 = budget_split
    if abs(a1 + a0 - cfg.alpha) > 1e-12:
        raise ValueError("budget split must sum to alpha")
    cfg1 = MethodConfig(cfg.method, cfg.divergence, cfg.rho, a1)
    cfg0 = MethodConfig(cfg.method, cfg.divergence, cfg.rho, a0)
    c1 = counterfactual_interval(x, t, y, test_x, SensitivityTarget(1, population), cfg1, seed, learners, propensity)
    c0 = counterfactual_interval(x, t, y, test_x, SensitivityTarget(0, population), cfg0, seed, learners, propensity)
    return [combine_ite(a, b) for a, b in zip(c1, c0)]
