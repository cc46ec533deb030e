"""From counts to Bloch-vector time series.

Pipeline per time point: iterative Bayesian unfolding of the readout error,
linear inversion with radial projection onto the Bloch ball, and a Bayesian
(Dirichlet-weighted) bootstrap for per-component uncertainties.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ._io import fmt
from .experiment import BASES, EXACT, DatasetError, ReadoutModel, TomographyDataset
from .qstate import BlochVector, project_to_ball

DEFAULT_ITERATIONS = 100
DEFAULT_RESAMPLES = 250
SIGMA_FLOOR = 1e-4
SIMPLEX_TOL = 1e-9


class UnfoldingError(ArithmeticError):
    """The response matrix annihilates the current prior for an observed outcome."""


def _unfold(p: np.ndarray, M: np.ndarray, iterations: int, check: bool = False) -> np.ndarray:
    """Vectorised unfolding over the leading axes of ``p`` (last axis = outcome)."""
    t = np.full(p.shape, 1.0 / p.shape[-1])
    for _ in range(iterations):
        folded = t @ M.T  # (M t)_j
        observed = p > 0
        if np.any(observed & (folded <= 0)):
            raise UnfoldingError("zero denominator: response matrix annihilates the prior")
        ratio = np.divide(p, folded, out=np.zeros_like(p), where=observed)
        t = t * (ratio @ M)
        if check:
            if not (np.all(t >= 0) and np.allclose(t.sum(axis=-1), 1, atol=1e-12)):
                raise UnfoldingError("iterate left the probability simplex")
    return t


def bayes_unfold(p, M, iterations: int = DEFAULT_ITERATIONS, check_simplex: bool = False) -> np.ndarray:
    """Iterative Bayesian unfolding ``t_i <- t_i sum_j M_ji p_j / (M t)_j`` from a uniform prior."""
    M = M.matrix if isinstance(M, ReadoutModel) else np.asarray(M, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != M.shape[0]:
        raise ValueError("frequency vector and response matrix disagree in size")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1) > SIMPLEX_TOL):
        raise ValueError("observed frequencies must be nonnegative and sum to 1")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    return _unfold(p, M, iterations, check_simplex)


def unfold_p_one(f_one, readout: ReadoutModel, iterations: int = DEFAULT_ITERATIONS) -> np.ndarray:
    """Mitigated frequency of outcome 1 for an array of observed frequencies."""
    f_one = np.asarray(f_one, dtype=float)
    p = np.stack([1 - f_one, f_one], axis=-1)
    return _unfold(p, readout.matrix, iterations)[..., 1]


def mle_bloch_array(f) -> np.ndarray:
    """Vectorised estimator: ``v = 1 - 2 f`` projected radially into the unit ball."""
    return project_to_ball(1 - 2 * np.asarray(f, dtype=float))


def mle_bloch(frame) -> BlochVector:
    f = np.asarray(frame, dtype=float).reshape(3)
    if np.any(f < 0) or np.any(f > 1):
        raise ValueError("frequencies must lie in [0, 1]")
    return BlochVector.from_array(mle_bloch_array(f))


def _beta_frequencies(counts, shots, resamples: int, rng) -> np.ndarray:
    """Dirichlet(1,...,1)-weighted outcome-1 frequencies, shape ``(resamples,) + counts.shape``.

    Summing flat Dirichlet weights over the shots with outcome 1 gives a
    Beta(k, n - k) variable, so it is drawn directly.
    """
    counts = np.asarray(counts)
    shots = np.asarray(shots)
    a = np.maximum(counts, 1)
    b = np.maximum(shots - counts, 1)
    draws = rng.beta(a, b, size=(resamples,) + counts.shape)
    draws = np.where(counts == 0, 0.0, draws)
    return np.where(counts == shots, 1.0, draws)


def bootstrap_sigma(
    counts,
    shots,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    readout: ReadoutModel | None = None,
    iterations: int = DEFAULT_ITERATIONS,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-component standard deviations of the Bloch estimate for one frame (or a stack of frames).

    ``counts`` and ``shots`` have shape ``(..., 3)`` in basis order x, y, z.
    """
    if resamples < 2:
        raise ValueError("bootstrap needs at least 2 resamples")
    counts = np.asarray(counts)
    shots = np.broadcast_to(np.asarray(shots), counts.shape)
    if np.any(counts < 0) or np.any(counts > shots) or np.any(shots <= 0):
        raise ValueError("invalid counts for bootstrap")
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(key=int(seed)))
    f = _beta_frequencies(counts, shots, resamples, rng)
    if readout is not None:
        f = unfold_p_one(f, readout, iterations)
    v = mle_bloch_array(f)
    # centring on one draw keeps constant resamples at exactly zero spread
    return (v - v[:1]).std(axis=0, ddof=1)


@dataclass(frozen=True, eq=False)
class BlochSeries:
    """Reconstructed Bloch vectors with per-component uncertainties for one preparation."""

    prep_label: str
    times: np.ndarray
    vectors: np.ndarray  # (n, 3)
    sigma: np.ndarray  # (n, 3)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.vectors, dtype=float).reshape(len(t), 3)
        s = np.array(self.sigma, dtype=float).reshape(len(t), 3)
        if len(t) and np.any(np.diff(t) <= 0):
            raise ValueError("series times must be strictly increasing")
        if np.any(np.linalg.norm(v, axis=1) > 1 + 1e-9):
            raise ValueError("series contains vectors outside the Bloch ball")
        if np.any(s <= 0):
            raise ValueError("series uncertainties must be positive")
        for arr in (t, v, s):
            arr.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "sigma", s)

    def __len__(self):
        return len(self.times)

    @property
    def v0(self) -> np.ndarray | None:
        """Ideal preparation Bloch vector, when recorded."""
        v = self.metadata.get("prep_bloch")
        return None if v is None else np.asarray(v, dtype=float)

    def points(self):
        for t, v, s in zip(self.times, self.vectors, self.sigma):
            yield float(t), BlochVector.from_array(v), tuple(float(x) for x in s)

    def to_dict(self) -> dict:
        return {
            "prep": self.prep_label,
            "metadata": self.metadata,
            "points": [
                {"t": float(t), "v": [float(x) for x in v], "sigma": [float(x) for x in s]}
                for t, v, s in zip(self.times, self.vectors, self.sigma)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlochSeries":
        pts = d["points"]
        return cls(
            d["prep"],
            [p["t"] for p in pts],
            [p["v"] for p in pts],
            [p["sigma"] for p in pts],
            dict(d.get("metadata") or {}),
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "vx", "vy", "vz", "sigma_x", "sigma_y", "sigma_z"])
            for t, v, s in zip(self.times, self.vectors, self.sigma):
                w.writerow([fmt(x) for x in (t, *v, *s)])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def reconstruct_series(
    dataset: TomographyDataset,
    prep_label: str,
    mitigate: bool = True,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    iterations: int = DEFAULT_ITERATIONS,
) -> BlochSeries:
    """Mitigate, estimate and bootstrap every frame of one preparation.

    Exact datasets (or ``resamples=0``) skip the bootstrap and carry the floor
    uncertainty.
    """
    frames = dataset.frames(prep_label)
    times = np.array([t for t, _ in frames])
    records = [[fr[b] for b in BASES] for _, fr in frames]
    freqs = np.array([[r.frequency for r in row] for row in records])
    exact = all(r.shots == EXACT for row in records for r in row)
    if not exact and any(r.shots == EXACT for row in records for r in row):
        raise DatasetError(f"preparation {prep_label!r} mixes exact and sampled records")

    readout = dataset.readout if mitigate else None
    f = unfold_p_one(freqs, readout, iterations) if readout is not None else freqs
    vectors = mle_bloch_array(f)

    if exact or resamples == 0:
        sigma = np.full(vectors.shape, SIGMA_FLOOR)
    else:
        counts = np.array([[r.count_one for r in row] for row in records])
        shots = np.array([[r.shots for r in row] for row in records])
        idx = dataset.preps.labels.index(prep_label)
        rng = np.random.Generator(np.random.Philox(key=[int(seed), idx]))
        sigma = bootstrap_sigma(counts, shots, resamples, readout=readout, iterations=iterations, rng=rng)
        sigma = np.maximum(sigma, SIGMA_FLOOR)

    meta = {
        "mitigated": readout is not None,
        "readout_present": dataset.readout is not None,
        "exact": exact,
        "bootstrap_resamples": 0 if exact else int(resamples),
        "seed": int(seed),
        "prep_bloch": [float(x) for x in dataset.preps[prep_label].as_array()],
    }
    return BlochSeries(prep_label, times, vectors, sigma, meta)


def reconstruct_all(dataset: TomographyDataset, labels=None, **kwargs) -> dict:
    labels = dataset.preps.labels if labels is None else labels
    return {lbl: reconstruct_series(dataset, lbl, **kwargs) for lbl in labels}
