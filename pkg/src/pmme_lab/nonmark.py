"""Distinguishability revival: trace-distance series, their rates and the BLP measure.

The measure integrates the positive part of ``dD/dt`` for a pair of initial
states.  From data the rate is a forward difference of the sampled distance;
from a model it is a central difference on a dense, refined grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import fmt
from .model import ModelParams
from .qstate import NAMED_STATES, bloch_trace_distance
from .recon import BlochSeries
from .solver import bloch_trajectory, build_propagator

DEFAULT_PAIRS = (("plus", "minus"), ("plus_i", "minus_i"))
MODEL_GRID = 2000
REFINE_TOL = 1e-4
MAX_DOUBLINGS = 8
# distance increments this small relative to D are rounding, not revival
ROUNDING_FLOOR = 64 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class DistanceSeries:
    times: np.ndarray
    distance: np.ndarray
    labels: tuple = ("", "")

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        d = np.array(self.distance, dtype=float).reshape(-1)
        if t.shape != d.shape:
            raise ValueError("times and distances differ in length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("distance series times must be strictly increasing")
        if np.any(d < 0) or np.any(d > 1 + 1e-12):
            raise ValueError("trace distances must lie in [0, 1]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "distance", np.clip(d, 0.0, 1.0))
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True, eq=False)
class NonMarkovReport:
    N: float
    contributions: np.ndarray
    method: str
    labels: tuple = ("", "")
    grid_points: int | None = None
    last_change: float | None = None
    converged: bool = True
    ci: tuple | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"N": self.N, "method": self.method, "pair": list(self.labels),
             "n_positive_intervals": int(np.count_nonzero(self.contributions))}
        if self.grid_points is not None:
            d.update(grid_points=self.grid_points, last_change=self.last_change, converged=self.converged)
        if self.ci is not None:
            d["ci"] = list(self.ci)
        d.update(self.extra)
        return d


def distance_series(s1: BlochSeries, s2: BlochSeries) -> DistanceSeries:
    if len(s1) != len(s2) or not np.array_equal(s1.times, s2.times):
        raise ValueError(f"series {s1.prep_label!r} and {s2.prep_label!r} have different time grids")
    return DistanceSeries(s1.times, bloch_trace_distance(s1.vectors, s2.vectors), (s1.prep_label, s2.prep_label))


def sigma_series(d: DistanceSeries):
    """Forward differences ``(D[i+1] - D[i]) / (t[i+1] - t[i])`` placed at ``t[i]``."""
    if len(d) < 2:
        raise ValueError("need at least two points")
    return d.times[:-1], np.diff(d.distance) / np.diff(d.times)


def _denoise(rate: np.ndarray, times: np.ndarray, distance: np.ndarray) -> np.ndarray:
    """Zero the rates whose implied increments are at rounding level."""
    step = np.gradient(times) if len(times) > 1 else np.ones_like(times)
    scale = ROUNDING_FLOOR * max(float(np.max(distance)), 1e-300)
    return np.where(np.abs(rate * step[: len(rate)]) <= scale, 0.0, rate)


def positive_area(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-interval integral of ``max(y, 0)`` for the piecewise-linear interpolant of ``(t, y)``.

    Intervals that change sign are split at the exact zero crossing.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    a, b = y[:-1], y[1:]
    h = np.diff(t)
    both = (a >= 0) & (b >= 0)
    out = np.where(both, 0.5 * h * (a + b), 0.0)
    cross = (a > 0) != (b > 0)
    cross &= ~both
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.maximum(a, b)
        frac = np.where(cross, pos / (np.abs(a) + np.abs(b)), 0.0)
    out = np.where(cross, 0.5 * h * frac * pos, out)
    return out


def n_measure(d: DistanceSeries) -> NonMarkovReport:
    """Data path: integrate the positive part of the interpolated forward-difference rate."""
    if len(d) < 3:
        raise ValueError("the data path needs at least three points")
    ts, rate = sigma_series(d)
    rate = _denoise(rate, d.times, d.distance)
    contrib = positive_area(ts, rate)
    return NonMarkovReport(math.fsum(contrib), contrib, "data-forward-difference", d.labels)


def pair_vectors(pair) -> tuple[np.ndarray, np.ndarray]:
    out = []
    for p in pair:
        out.append(np.asarray(NAMED_STATES[p] if isinstance(p, str) else p, dtype=float))
    return out[0], out[1]


def model_distance(theta: ModelParams, pair, times, prop=None) -> np.ndarray:
    prop = prop or build_propagator(theta)
    v1, v2 = pair_vectors(pair)
    return bloch_trace_distance(bloch_trajectory(prop, theta, v1, times), bloch_trajectory(prop, theta, v2, times))


def _model_pass(theta, prop, pair, horizon: float, n: int):
    t = np.linspace(0.0, horizon, n)
    D = model_distance(theta, pair, t, prop)
    rate = _denoise(np.gradient(D, t), t, D)
    contrib = positive_area(t, rate)
    return math.fsum(contrib), contrib


def n_measure_model(
    theta: ModelParams,
    pair=DEFAULT_PAIRS[0],
    horizon: float = 100.0,
    n_grid: int = MODEL_GRID,
    tol: float = REFINE_TOL,
    max_doublings: int = MAX_DOUBLINGS,
) -> NonMarkovReport:
    """Model path: dense central differences, grid doubled until the measure settles within ``tol``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    prop = build_propagator(theta)
    n = n_grid
    N, contrib = _model_pass(theta, prop, pair, horizon, n)
    change = math.inf
    for _ in range(max_doublings):
        n = 2 * n - 1  # nests the previous grid
        N_new, contrib = _model_pass(theta, prop, pair, horizon, n)
        change = abs(N_new - N)
        N = N_new
        if change < tol:
            break
    labels = tuple(p if isinstance(p, str) else str(list(p)) for p in pair)
    return NonMarkovReport(math.fsum(contrib), contrib, "model-exact", labels, n, change, change < tol)


def n_measure_data_ci(
    s1: BlochSeries, s2: BlochSeries, resamples: int = 200, seed: int = 0, level: float = 0.95
) -> NonMarkovReport:
    """Data-path measure with a percentile interval from Gaussian resampling of both series."""
    base = n_measure(distance_series(s1, s2))
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    values = []
    for _ in range(resamples):
        a = s1.vectors + rng.normal(size=s1.vectors.shape) * s1.sigma
        b = s2.vectors + rng.normal(size=s2.vectors.shape) * s2.sigma
        d = np.clip(bloch_trace_distance(a, b), 0.0, 1.0)
        values.append(n_measure(DistanceSeries(s1.times, d, base.labels)).N)
    alpha = (1 - level) / 2
    ci = (float(np.quantile(values, alpha)), float(np.quantile(values, 1 - alpha)))
    return NonMarkovReport(base.N, base.contributions, base.method, base.labels, ci=ci,
                           extra={"bootstrap_resamples": resamples, "seed": int(seed)})


def write_distance_csv(d: DistanceSeries, path) -> None:
    """Columns ``t, D, sigma``; the last row has no forward difference."""
    _, rate = sigma_series(d) if len(d) > 1 else (None, np.array([]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "D", "sigma"])
        for i, (t, D) in enumerate(zip(d.times, d.distance)):
            w.writerow([fmt(t), fmt(D), fmt(rate[i]) if i < len(rate) else ""])


def model_distance_series(theta: ModelParams, pair, times) -> DistanceSeries:
    times = np.asarray(times, dtype=float)
    labels = tuple(p if isinstance(p, str) else str(list(p)) for p in pair)
    return DistanceSeries(times, np.clip(model_distance(theta, pair, times), 0, 1), labels)


def n_measure_pairs(theta: ModelParams, pairs: Sequence = DEFAULT_PAIRS, horizon: float = 100.0) -> list:
    return [n_measure_model(theta, p, horizon) for p in pairs]
