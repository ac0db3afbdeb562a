"""f-divergence generators and the worst-case coverage maps built on them.

For a source coverage probability ``beta`` and a ball of radius ``rho``,
:func:`g_value` returns the smallest coverage any conditional law within the
ball can have; :func:`g_inverse` inverts it to give the inflated calibration
level used by the robust conformal procedures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

BISECT_TOL = 1e-10
_MAX_ITER = 200


class DivergenceName(str, Enum):
    KL = "KL"
    TV = "TV"
    CHISQ = "ChiSq"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class FDivergenceSpec:
    """Convex generator ``f`` with ``f(1) = 0`` and its boundary limits.

    ``f_at_zero`` is ``lim f(t)`` as ``t -> 0+`` and ``recession_slope`` is
    ``lim f(t)/t`` as ``t -> inf``; the latter defines ``0 * f(a/0) = a * slope``.
    """

    name: DivergenceName
    f: Callable[[float], float]
    f_at_zero: float
    recession_slope: float

    def __call__(self, t: float) -> float:
        if t == 0.0:
            return self.f_at_zero
        return self.f(t)

    @classmethod
    def custom(cls, f, f_at_zero: float, recession_slope: float) -> "FDivergenceSpec":
        if abs(f(1.0)) > 1e-12:
            raise ValueError("custom generator must satisfy f(1) = 0")
        return cls(DivergenceName.CUSTOM, f, float(f_at_zero), float(recession_slope))


def _kl(t: float) -> float:
    return t * math.log(t)


def _tv(t: float) -> float:
    return 0.5 * abs(t - 1.0)


def _chisq(t: float) -> float:
    return (t - 1.0) ** 2


KL = FDivergenceSpec(DivergenceName.KL, _kl, 0.0, math.inf)
TV = FDivergenceSpec(DivergenceName.TV, _tv, 0.5, 0.5)
CHISQ = FDivergenceSpec(DivergenceName.CHISQ, _chisq, 1.0, math.inf)

BUILTINS = {"KL": KL, "TV": TV, "ChiSq": CHISQ}


def get_divergence(name: str | FDivergenceSpec) -> FDivergenceSpec:
    if isinstance(name, FDivergenceSpec):
        return name
    try:
        return BUILTINS[name]
    except KeyError:
        raise ValueError(
            f"unknown divergence {name!r}; expected one of {sorted(BUILTINS)}"
        ) from None


def _scaled_term(spec: FDivergenceSpec, c: float, a: float) -> float:
    # perspective c * f(a / c), extended to c = 0 by the recession slope
    if c == 0.0:
        if a == 0.0:
            return 0.0
        return a * spec.recession_slope
    return c * spec(a / c)


def eval_perspective(spec: FDivergenceSpec, beta: float, z: float) -> float:
    """Divergence between Bernoulli(z) and Bernoulli(beta) under ``spec``."""
    val = _scaled_term(spec, beta, z) + _scaled_term(spec, 1.0 - beta, 1.0 - z)
    # f(1) = 0 exactly; avoid rounding noise near z = beta
    if val < 0.0:
        return 0.0
    return val


def g_value(spec: FDivergenceSpec, rho: float, beta: float) -> float:
    """Smallest ``z`` in [0, 1] whose divergence from ``beta`` is at most ``rho``.

    The perspective is convex in ``z`` with its zero at ``z = beta``, so it is
    nonincreasing on ``[0, beta]`` and the boundary is found by bisection.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if rho == 0.0 or beta <= 0.0:
        return max(beta, 0.0)
    if math.isinf(rho):
        return 0.0 if beta < 1.0 else _g_bisect(spec, rho, beta)
    return _g_bisect(spec, rho, beta)


def _g_bisect(spec: FDivergenceSpec, rho: float, beta: float) -> float:
    if eval_perspective(spec, beta, 0.0) <= rho:
        return 0.0
    lo, hi = 0.0, beta  # h(lo) > rho >= h(hi)
    for _ in range(_MAX_ITER):
        if hi - lo <= BISECT_TOL:
            break
        mid = 0.5 * (lo + hi)
        if eval_perspective(spec, beta, mid) <= rho:
            hi = mid
        else:
            lo = mid
    return hi


def g_inverse(spec: FDivergenceSpec, rho: float, tau: float) -> float:
    """Largest ``beta`` with ``g_value(beta) <= tau``; bisection on ``beta``."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if rho == 0.0:
        return tau
    if g_value(spec, rho, 1.0) <= tau:
        return 1.0
    lo, hi = 0.0, 1.0  # g(lo) <= tau < g(hi)
    if g_value(spec, rho, lo) > tau:
        return 0.0
    for _ in range(_MAX_ITER):
        if hi - lo <= BISECT_TOL:
            break
        mid = 0.5 * (lo + hi)
        if g_value(spec, rho, mid) <= tau:
            lo = mid
        else:
            hi = mid
    return lo


def g_condition_check(spec: FDivergenceSpec, rho: float, alpha: float) -> bool:
    """True when the robust set keeps the exact ``1 - alpha`` guarantee."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return g_value(spec, rho, 1.0) >= 1.0 - alpha


def zero_region_edge(spec: FDivergenceSpec, rho: float) -> float:
    """``sup{beta : g_value(beta) = 0}``, bracketed by bisection."""
    if rho == 0.0:
        return 0.0
    if g_value(spec, rho, 1.0) == 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if g_value(spec, rho, mid) == 0.0:
            lo = mid
        else:
            hi = mid
    return lo
