from __future__ import annotations

import itertools

import numpy as np
import pytest

from robust_conformal.bench import CONFOUNDING_TILT, simulate_observational
from robust_conformal.conformal import Method, MethodConfig, PredictionInterval
from robust_conformal.quantile import conformal_quantile
from robust_conformal.sensitivity import (
    WHOLE,
    ArmRates,
    SensitivityTarget,
    combine_ite,
    counterfactual_interval,
    fit_counterfactual,
    ite_interval,
    sensitivity_weight,
)


def table_cell(t1, t2, e, p1):
    """The weight table written out cell by cell."""
    p0 = 1 - p1
    return {
        (1, 1): 1.0,
        (1, 0): (1 - e) / e * p1 / p0,
        (1, WHOLE): p1 / e,
        (0, 1): e / (1 - e) * p0 / p1,
        (0, 0): 1.0,
        (0, WHOLE): p0 / (1 - e),
    }[(t1, t2)]


def coverage(ivs, y):
    return float(np.mean([b in iv for iv, b in zip(ivs, y)]))


class TestTarget:
    def test_aliases(self):
        assert SensitivityTarget(1, "0").t2 == 0
        assert SensitivityTarget(0, "all").t2 == WHOLE
        assert SensitivityTarget(0, "∘").t2 == WHOLE

    def test_invalid(self):
        with pytest.raises(ValueError):
            SensitivityTarget(2, 0)
        with pytest.raises(ValueError):
            SensitivityTarget(1, 3)

    def test_rates(self):
        assert ArmRates(0.3).p0 == pytest.approx(0.7)
        with pytest.raises(ValueError):
            ArmRates(1.0)


class TestWeightTable:
    @pytest.mark.parametrize("t1,t2", list(itertools.product((0, 1), (0, 1, WHOLE))))
    def test_cells(self, t1, t2):
        for e, p1 in itertools.product((0.25, 0.5, 0.75), (0.3, 0.5)):
            got = sensitivity_weight(SensitivityTarget(t1, t2), e, ArmRates(p1))
            assert got == pytest.approx(table_cell(t1, t2, e, p1), rel=1e-12)

    def test_examples(self):
        assert sensitivity_weight(SensitivityTarget(1, 1), 0.9, ArmRates(0.2)) == 1.0
        assert sensitivity_weight(SensitivityTarget(1, 0), 0.5, ArmRates(0.5)) == 1.0
        assert sensitivity_weight(SensitivityTarget(1, WHOLE), 0.25, ArmRates(0.5)) == 2.0

    def test_whole_population_identity(self):
        for e, p1 in itertools.product((0.25, 0.5, 0.75), (0.3, 0.5)):
            r = ArmRates(p1)
            w1 = sensitivity_weight(SensitivityTarget(1, WHOLE), e, r)
            w0 = sensitivity_weight(SensitivityTarget(0, WHOLE), e, r)
            assert w1 * e + w0 * (1 - e) == pytest.approx(1.0, abs=1e-15)

    def test_label_swap_symmetry(self):
        flip = {0: 1, 1: 0, WHOLE: WHOLE}
        for t1, t2 in itertools.product((0, 1), (0, 1, WHOLE)):
            for e, p1 in itertools.product((0.25, 0.5, 0.75), (0.3, 0.5)):
                a = sensitivity_weight(SensitivityTarget(t1, t2), e, ArmRates(p1))
                b = sensitivity_weight(SensitivityTarget(1 - t1, flip[t2]), 1 - e, ArmRates(1 - p1))
                assert a == pytest.approx(b, rel=1e-12)

    def test_clipping(self):
        w = sensitivity_weight(SensitivityTarget(1, WHOLE), np.array([0.0, 1.0]), ArmRates(0.5))
        assert w.tolist() == pytest.approx([50.0, 0.5 / 0.99])


class TestCounterfactual:
    def test_known_constant_propensity_is_cp_on_arm(self, rng):
        X, T, y, *_ = simulate_observational(600, rng, propensity="constant", confounded=False)
        target = SensitivityTarget(1, 0)
        fit = fit_counterfactual(X, T, y, target, seed=1, propensity=lambda Z: np.full(len(Z), 0.5))
        ivs = fit.intervals(X[:20], MethodConfig(Method.WCP))
        q = conformal_quantile(0.9, fit.cal_scores)
        assert all(iv.threshold == q for iv in ivs)

    def test_cal_units_are_arm_t1(self, rng):
        X, T, y, *_ = simulate_observational(300, rng)
        fit = fit_counterfactual(X, T, y, SensitivityTarget(0, WHOLE), seed=0)
        assert len(fit.cal_scores) == len(fit.cal_weights) > 0

    def test_empty_arm(self, rng):
        X = rng.normal(size=(50, 2))
        with pytest.raises(ValueError):
            fit_counterfactual(X, np.zeros(50, int), X[:, 0], SensitivityTarget(1, 0))

    def test_bad_treatment(self, rng):
        X = rng.normal(size=(10, 2))
        with pytest.raises(ValueError):
            fit_counterfactual(X, np.full(10, 2), X[:, 0], SensitivityTarget(1, 0))

    def test_randomized_trial_coverage(self):
        covs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X, T, y, *_ = simulate_observational(1000, rng, propensity="constant", confounded=False)
            Xt, _, _, _, y1t, _ = simulate_observational(2000, rng, propensity="constant", confounded=False)
            ivs = counterfactual_interval(X, T, y, Xt, SensitivityTarget(1, 1), MethodConfig(Method.WCP), seed=seed)
            covs.append(coverage(ivs, y1t))
        assert abs(np.mean(covs) - 0.9) <= 0.03

    def test_confounded_robust_vs_naive(self):
        rho = CONFOUNDING_TILT.kl()
        naive, robust = [], []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X, T, y, *_ = simulate_observational(1000, rng)
            Xt, Tt, _, _, y1t, _ = simulate_observational(4000, rng)
            keep = Tt == 0
            target = SensitivityTarget(1, 0)
            fit = fit_counterfactual(X, T, y, target, seed=seed)
            naive.append(coverage(fit.intervals(Xt[keep], MethodConfig(Method.WCP)), y1t[keep]))
            robust.append(coverage(fit.intervals(Xt[keep], MethodConfig(Method.WRCP, "KL", rho)), y1t[keep]))
        assert np.mean(naive) < 0.9 - 0.03
        assert np.mean(robust) >= 0.9 - 0.03


class TestITE:
    def test_combine(self):
        iv = combine_ite(PredictionInterval(1.0, 0.0), PredictionInterval(1.0, 0.0))
        assert (iv.lower, iv.upper) == (-2.0, 2.0)
        iv = combine_ite(PredictionInterval(1.0, 3.0), PredictionInterval(0.5, 1.0))
        assert (iv.lower, iv.upper) == (3.0 - 1.0 - 1.0 - 0.5, 3.0 + 1.0 - 1.0 + 0.5)

    def test_infinite_side(self):
        assert combine_ite(PredictionInterval(float("inf"), 0.0), PredictionInterval(1.0, 0.0)).is_infinite

    def test_default_split(self, rng):
        X, T, y, *_ = simulate_observational(500, rng)
        Xt = X[:10]
        ite = ite_interval(X, T, y, Xt, MethodConfig(Method.WCP, alpha=0.2), seed=3)
        half = MethodConfig(Method.WCP, alpha=0.1)
        c1 = counterfactual_interval(X, T, y, Xt, SensitivityTarget(1, WHOLE), half, seed=3)
        c0 = counterfactual_interval(X, T, y, Xt, SensitivityTarget(0, WHOLE), half, seed=3)
        for a, b, c in zip(ite, c1, c0):
            assert a.lower == pytest.approx(b.lower - c.upper) and a.upper == pytest.approx(b.upper - c.lower)

    def test_split_must_sum(self, rng):
        X, T, y, *_ = simulate_observational(100, rng)
        with pytest.raises(ValueError):
            ite_interval(X, T, y, X[:2], MethodConfig(Method.WCP), budget_split=(0.05, 0.01))

    def test_confounded_ite_coverage(self):
        rho = CONFOUNDING_TILT.kl()
        covs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X, T, y, *_ = simulate_observational(1000, rng)
            Xt, _, _, y0t, y1t, _ = simulate_observational(2000, rng)
            ivs = ite_interval(X, T, y, Xt, MethodConfig(Method.WRCP, "KL", rho), seed=seed)
            covs.append(coverage(ivs, y1t - y0t))
        assert np.mean(covs) >= 0.9 - 0.03
