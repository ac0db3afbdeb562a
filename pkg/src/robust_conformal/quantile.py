"""Quantiles of discrete score distributions carrying an atom at +inf."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# slack on cumulative-mass comparisons; absorbs float drift in k/(n+1) sums
MASS_TOL = 1e-12


class DegenerateWeightsError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    weights: np.ndarray
    inf_mass: float

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if scores.shape != weights.shape or scores.ndim != 1:
            raise ValueError("scores and weights must be 1-d arrays of equal length")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if np.any(weights < 0) or self.inf_mass < 0:
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_raw(cls, scores, raw_weights, test_weight: float) -> "ScoreSet":
        w, inf_mass = normalize_weights(raw_weights, test_weight)
        return cls(np.asarray(scores, dtype=float), w, inf_mass)


def normalize_weights(raw_weights, test_weight: float) -> tuple[np.ndarray, float]:
    raw = np.asarray(raw_weights, dtype=float)
    if np.any(raw < 0) or test_weight < 0:
        raise ValueError("weights must be nonnegative")
    total = raw.sum() + test_weight
    if not total > 0:
        raise DegenerateWeightsError("degenerate weights")
    return raw / total, float(test_weight / total)


def weighted_quantile(level: float, score_set: ScoreSet) -> float:
    """Smallest score whose cumulative weight reaches ``level``, else +inf.

    Equal scores pool their weight; a level landing exactly on a cumulative
    boundary resolves to that score.
    """
    if score_set.scores.size == 0:
        return math.inf
    order = np.argsort(score_set.scores, kind="stable")
    s = score_set.scores[order]
    cum = np.cumsum(score_set.weights[order])
    # only the last index of each run of ties is a valid threshold
    last_of_run = np.append(s[1:] != s[:-1], True)
    hits = np.flatnonzero(last_of_run & (cum >= level - MASS_TOL))
    if hits.size == 0:
        return math.inf
    return float(s[hits[0]])


def conformal_quantile(level: float, scores) -> float:
    """The ``ceil((n+1) * level)``-th smallest of ``scores`` together with +inf."""
    s = np.sort(np.asarray(scores, dtype=float))
    n = s.size
    k = math.ceil((n + 1) * (level - MASS_TOL))
    k = max(k, 1)
    if k > n:
        return math.inf
    return float(s[k - 1])


def weighted_quantile_batch(level: float, scores, raw_weights, test_weights) -> np.ndarray:
    """Vectorized :func:`weighted_quantile` for many test weights sharing a calibration set.

    Equivalent to ``weighted_quantile(level, ScoreSet.from_raw(scores, raw_weights, t))``
    for each ``t`` in ``test_weights``.
    """
    scores = np.asarray(scores, dtype=float)
    raw = np.asarray(raw_weights, dtype=float)
    tw = np.atleast_1d(np.asarray(test_weights, dtype=float))
    if np.any(raw < 0) or np.any(tw < 0):
        raise ValueError("weights must be nonnegative")
    totals = raw.sum() + tw
    if np.any(~(totals > 0)):
        raise DegenerateWeightsError("degenerate weights")
    out = np.full(tw.shape, math.inf)
    if scores.size == 0:
        return out
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    last_of_run = np.append(s[1:] != s[:-1], True)
    s_runs = s[last_of_run]
    cum_raw = np.cumsum(raw[order])[last_of_run]
    # cumulative normalized mass per (test point, distinct score)
    cum = cum_raw[None, :] / totals[:, None]
    ok = cum >= level - MASS_TOL
    has = ok.any(axis=1)
    first = ok.argmax(axis=1)
    out[has] = s_runs[first[has]]
    return out
