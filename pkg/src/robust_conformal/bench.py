"""Synthetic shift scenarios, coverage metrics and the Monte Carlo experiment runner.

Source law: ``X ~ N(0, I_d)``, ``Y = X'beta + N(0, 1)`` with ten coefficients
of 0.47 on the first ten coordinates. Target law: covariates shifted to
``N(beta0, I_d)`` with ``beta0 = (eta, -eta, 0, ...)`` and the noise reweighted
by a two-region tilt on ``|Y - mean(X)|``. The tilt constants are renormalised
so the target conditional is a probability law; with the default constants
the resulting ``KL(Q_{Y|X} || P_{Y|X})`` is about 0.0100.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import stats

from .conformal import Method, MethodConfig, fit_wrcp, make_split_plan, rho_rcp_adjust, thresholds_batch
from .debiased import fit_debiased_fold
from .divergence import KL, get_divergence
from .estimators import Learners

DEFAULT_RHO_GRID = (0.005, 0.01, 0.015, 0.02, 0.025)
DEFAULT_METHODS = ("CP", "WCP", "RCP", "WRCP", "D-WRCP")


class Scenario(str, Enum):
    LINEAR = "Linear"
    NO_X_SHIFT = "NoXShift"
    NO_COND_SHIFT = "NoCondShift"
    NONLINEAR = "Nonlinear"


@dataclass(frozen=True)
class TiltSpec:
    """Density ratio ``c_in`` on ``|eps| < threshold`` and ``c_out`` outside,
    relative to a standard normal ``eps``; renormalised before use."""

    c_in: float = 0.96
    c_out: float = 1.59
    threshold: float = 1.86

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.threshold) <= 0:
            raise ValueError("tilt constants must be positive")

    @property
    def p_in(self) -> float:
        return float(2.0 * stats.norm.cdf(self.threshold) - 1.0)

    @property
    def p_out(self) -> float:
        return float(2.0 * stats.norm.sf(self.threshold))

    @property
    def raw_mass(self) -> float:
        """Total mass of the tilted law before renormalisation."""
        return self.c_in * self.p_in + self.c_out * self.p_out

    @property
    def region_probs(self) -> tuple[float, float]:
        z = self.raw_mass
        return self.c_in * self.p_in / z, self.c_out * self.p_out / z

    def kl(self) -> float:
        """Closed-form KL of the renormalised tilted law from N(0, 1)."""
        z = self.raw_mass
        total = 0.0
        for c, p in ((self.c_in, self.p_in), (self.c_out, self.p_out)):
            r = c / z
            total += p * r * math.log(r)
        return total

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        q_in, _ = self.region_probs
        inside = rng.random(n) < q_in
        tau = self.threshold
        eps = np.empty(n)
        n_in = int(inside.sum())
        eps[inside] = stats.truncnorm.rvs(-tau, tau, size=n_in, random_state=rng)
        mag = stats.truncnorm.rvs(tau, np.inf, size=n - n_in, random_state=rng)
        sign = np.where(rng.random(n - n_in) < 0.5, -1.0, 1.0)
        eps[~inside] = sign * mag
        return eps


NO_TILT = TiltSpec(1.0, 1.0, 1.86)


@dataclass(frozen=True)
class SimConfig:
    scenario: Scenario = Scenario.LINEAR
    d: int = 50
    sparsity: int = 10
    coef: float = 0.47
    eta: float = 0.5
    tilt: TiltSpec = field(default_factory=TiltSpec)
    n_train: int = 500
    n_test: int = 500
    rho_grid: tuple = DEFAULT_RHO_GRID
    alpha: float = 0.1
    n_runs: int = 20
    seed: int = 0
    methods: tuple = DEFAULT_METHODS
    divergences: tuple = ("KL",)
    length_cap: float = 17.0

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if isinstance(self.tilt, dict):
            object.__setattr__(self, "tilt", TiltSpec(**self.tilt))
        object.__setattr__(self, "rho_grid", tuple(float(r) for r in self.rho_grid))
        object.__setattr__(self, "methods", tuple(Method.parse(m).value for m in self.methods))
        for name in self.divergences:
            get_divergence(name)
        object.__setattr__(self, "divergences", tuple(self.divergences))
        if self.d < 2 and self.scenario != Scenario.NONLINEAR and self.eta != 0:
            raise ValueError("covariate shift needs d >= 2")
        if self.sparsity > self.d:
            raise ValueError("sparsity exceeds dimension")

    @property
    def beta(self) -> np.ndarray:
        b = np.zeros(self.d)
        b[: self.sparsity] = self.coef
        return b

    @property
    def shift(self) -> np.ndarray:
        b0 = np.zeros(self.d)
        if self.scenario != Scenario.NO_X_SHIFT and self.d >= 2:
            b0[0], b0[1] = self.eta, -self.eta
        return b0

    @property
    def target_tilt(self) -> TiltSpec | None:
        return None if self.scenario == Scenario.NO_COND_SHIFT else self.tilt

    @property
    def rho_star(self) -> float:
        t = self.target_tilt
        return 0.0 if t is None else t.kl()

    def mean(self, X: np.ndarray) -> np.ndarray:
        if self.scenario == Scenario.NONLINEAR:
            return 1.0 / ((1.0 + np.exp(X[:, 0])) * (1.0 + np.exp(-X[:, 1])))
        return X @ self.beta

    def true_ratio(self, X) -> np.ndarray:
        """Exact covariate likelihood ratio dQ_X/dP_X."""
        b0 = self.shift
        return np.exp(np.asarray(X) @ b0 - 0.5 * b0 @ b0)


def simulate_source(cfg: SimConfig, rng: np.random.Generator, n: int | None = None):
    n = cfg.n_train if n is None else n
    X = rng.standard_normal((n, cfg.d))
    return X, cfg.mean(X) + rng.standard_normal(n)


def simulate_target(cfg: SimConfig, rng: np.random.Generator, n: int | None = None):
    n = cfg.n_test if n is None else n
    X = rng.standard_normal((n, cfg.d)) + cfg.shift
    tilt = cfg.target_tilt
    eps = rng.standard_normal(n) if tilt is None else tilt.sample(n, rng)
    return X, cfg.mean(X) + eps


# --------------------------------------------------------------------------
# observational data with hidden confounding

# Stronger tilt for the sensitivity scenario: the untreated arm's Y(1) puts
# twice the mass outside the 90% band of the treated arm's noise.
CONFOUNDING_TILT = TiltSpec(c_in=0.8 / 0.9, c_out=2.0, threshold=float(stats.norm.isf(0.05)))


def simulate_observational(
    n: int,
    rng: np.random.Generator,
    d: int = 5,
    confounded: bool = True,
    propensity: str = "logistic",
    tilt: TiltSpec = CONFOUNDING_TILT,
):
    """Units ``(X, T, Y, Y(0), Y(1))``.

    ``Y(t) | X, T = t`` is Gaussian around the arm mean; when confounded,
    ``Y(t) | X, T = 1 - t`` carries ``tilt`` instead, so the conditional law
    of each counterfactual differs from its factual one by ``tilt.kl()`` in KL.
    """
    X = rng.standard_normal((n, d))
    if propensity == "logistic":
        e = 1.0 / (1.0 + np.exp(-0.5 * X[:, 0]))
    elif propensity == "constant":
        e = np.full(n, 0.5)
    else:
        raise ValueError("propensity must be 'logistic' or 'constant'")
    T = (rng.random(n) < e).astype(int)
    gamma = np.linspace(1.0, 0.2, d)
    mu0 = X @ gamma
    mu1 = mu0 + 1.0 + 0.5 * X[:, 1]
    n1 = int(T.sum())
    eps1 = rng.standard_normal(n)
    eps0 = rng.standard_normal(n)
    if confounded:
        eps1[T == 0] = tilt.sample(n - n1, rng)
        eps0[T == 1] = tilt.sample(n1, rng)
    y1 = mu1 + eps1
    y0 = mu0 + eps0
    y = np.where(T == 1, y1, y0)
    return X, T, y, y0, y1, e


# --------------------------------------------------------------------------
# metrics and reports


def metrics(lower, upper, truths, cap: float = 17.0) -> dict:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = np.asarray(truths, dtype=float)
    if y.size == 0:
        raise ValueError("no test points")
    length = upper - lower
    infinite = ~np.isfinite(length)
    return {
        "coverage": float(np.mean((lower <= y) & (y <= upper))),
        "length": float(np.mean(np.minimum(length, cap))),
        "infinite_rate": float(np.mean(infinite)),
    }


@dataclass
class ReportRow:
    method: str
    divergence: str
    rho: float
    rho_used: float
    coverage: float
    coverage_hw: float
    length: float
    length_hw: float
    infinite_rate: float
    runtime: float
    n_runs: int

    @property
    def key(self) -> tuple:
        return (self.method, self.divergence, self.rho)


CSV_FIELDS = [f for f in ReportRow.__dataclass_fields__]


@dataclass
class ExperimentReport:
    config: dict
    rho_star: float
    rows: list
    per_run: dict

    def row(self, method: str, rho: float, divergence: str | None = None) -> ReportRow:
        for r in self.rows:
            if r.method == method and math.isclose(r.rho, rho) and (divergence is None or r.divergence == divergence):
                return r
        raise KeyError((method, rho, divergence))

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "rho_star": self.rho_star,
            "rows": [asdict(r) for r in self.rows],
            "per_run": {"|".join(map(str, k)): v for k, v in self.per_run.items()},
        }


def _divergence_label(method: str, divergence: str) -> str:
    if method in ("CP", "WCP"):
        return "none"
    if method == "RCP":
        return "KL"
    return divergence


def cell_keys(cfg: SimConfig) -> list[tuple]:
    keys = []
    for m in cfg.methods:
        divs = cfg.divergences if m in ("WRCP", "D-WRCP") else ("KL",)
        for div in divs:
            for rho in cfg.rho_grid:
                keys.append((m, _divergence_label(m, div), rho))
    return keys


def run_once(cfg: SimConfig, run: int, learners: Learners | None = None, skip: frozenset = frozenset()) -> dict:
    """One Monte Carlo replicate; returns ``{cell key: metrics dict}``.

    All methods are evaluated on test fold 1; test fold 0 and training fold 0
    fit the weight classifier, training fold 0 the mean and CDF models.
    """
    learners = learners or Learners()
    rng = np.random.default_rng([cfg.seed, run])
    X, y = simulate_source(cfg, rng)
    Xt, yt = simulate_target(cfg, rng)
    plan = make_split_plan(len(X), len(Xt), int(rng.integers(2**31)))
    todo = [k for k in cell_keys(cfg) if k not in skip]
    if not todo:
        return {}
    fit = fit_wrcp(X, y, Xt, plan=plan, learners=learners, fit_ratio=False)
    ratio = learners.density_ratio(X[plan.tr0], Xt[plan.test0])
    fit.ratio[1] = ratio
    idx = plan.test1
    centers = fit.mu.predict(Xt[idx])
    truth = yt[idx]
    cal_w, test_w = fit.fold_weights(1)
    ones_cal, ones_test = np.ones(len(fit.cal_scores)), np.ones(len(idx))

    table = None
    kl_x = None
    out = {}
    for key in todo:
        method, div, rho = key
        t0 = time.perf_counter()
        rho_used = rho
        if method == "D-WRCP":
            if table is None:
                _, table = fit_debiased_fold(X, y, Xt, plan, 1, learners, mu=fit.mu, ratio=ratio)
            q = table.thresholds(MethodConfig(Method.DWRCP, div, rho, cfg.alpha).level)
        elif method == "RCP":
            if kl_x is None:
                # plug-in on the set-aside folds that trained the classifier
                kl_x = rho_rcp_adjust(0.0, ratio, Xt[plan.test0], X[plan.tr0])
            rho_used = rho + kl_x
            q = thresholds_batch(fit.cal_scores, ones_cal, ones_test, MethodConfig(Method.RCP, KL, rho_used, cfg.alpha))
        elif method in ("CP", "WCP"):
            mc = MethodConfig(Method.parse(method), KL, 0.0, cfg.alpha)
            q = thresholds_batch(fit.cal_scores, cal_w, test_w, mc)
        else:
            q = thresholds_batch(fit.cal_scores, cal_w, test_w, MethodConfig(Method.WRCP, div, rho, cfg.alpha))
        res = metrics(centers - q, centers + q, truth, cfg.length_cap)
        res["rho_used"] = rho_used
        res["runtime"] = time.perf_counter() - t0
        out[key] = res
    return out


def _run_star(args):
    return run_once(*args)


def default_jobs() -> int:
    return int(os.environ.get("ROBUST_CONFORMAL_JOBS", "1"))


def run_experiment(
    cfg: SimConfig,
    jobs: int | None = None,
    learners: Learners | None = None,
    skip=frozenset(),
) -> ExperimentReport:
    """Monte Carlo over ``cfg.n_runs`` replicates; each replicate seeds its own
    generator from ``(cfg.seed, run)`` so the report is identical for any ``jobs``."""
    jobs = default_jobs() if jobs is None else jobs
    skip = frozenset(skip)
    args = [(cfg, r, learners, skip) for r in range(cfg.n_runs)]
    if jobs > 1 and cfg.n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_star, args))
    else:
        results = [run_once(*a) for a in args]

    rows = []
    per_run = {}
    for key in cell_keys(cfg):
        if key in skip:
            continue
        vals = [res[key] for res in results]
        cov = np.array([v["coverage"] for v in vals])
        length = np.array([v["length"] for v in vals])
        n = len(vals)
        se = (lambda a: 1.96 * a.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0)
        rows.append(
            ReportRow(
                method=key[0],
                divergence=key[1],
                rho=key[2],
                rho_used=float(np.mean([v["rho_used"] for v in vals])),
                coverage=float(cov.mean()),
                coverage_hw=float(se(cov)),
                length=float(length.mean()),
                length_hw=float(se(length)),
                infinite_rate=float(np.mean([v["infinite_rate"] for v in vals])),
                runtime=float(sum(v["runtime"] for v in vals)),
                n_runs=n,
            )
        )
        per_run[key] = vals
    return ExperimentReport(config=config_dict(cfg), rho_star=cfg.rho_star, rows=rows, per_run=per_run)


def config_dict(cfg: SimConfig) -> dict:
    out = asdict(cfg)
    out["scenario"] = cfg.scenario.value
    out["rho_grid"] = list(cfg.rho_grid)
    out["methods"] = list(cfg.methods)
    out["divergences"] = list(cfg.divergences)
    return out


def f_comparison(cfg: SimConfig, jobs: int | None = None) -> ExperimentReport:
    """WRCP side by side under KL, TV and chi-squared generators."""
    return run_experiment(replace(cfg, methods=("WRCP",), divergences=("KL", "TV", "ChiSq")), jobs)
