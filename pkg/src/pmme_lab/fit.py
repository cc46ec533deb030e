"""Weighted least-squares fits of the nested models M0 / M1 / M2, AIC ranking and prediction checks.

The optimiser works in an unconstrained coordinate vector ``x``:

* ``omega_z`` as is,
* ``log gamma_z``, ``log Gamma_s``, ``logit Gamma_r``,
* Exp kernel: ``log b0``,
* Rational2 kernel: ``a0`` as is, ``log b0``, ``log b1``,

so every point the simplex visits is a feasible parameter set.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import qmc

from ._io import fmt
from .model import MODEL_KERNELS, N_PARAMS, KernelSpec, ModelParams, ParameterError
from .qstate import bloch_trace_distance
from .recon import BlochSeries
from .solver import PropagatorError, bloch_trajectory, build_propagator

RATE_DECADES = (-4.0, 0.0)
OMEGA_RANGE = (-2.0, 2.0)
SCREEN_FEVALS = 400  # budget per start before the best few are polished
POLISH_STARTS = 3
AIC_TIE = 1e-9
BAD_CHI2 = 1e300
CHI2_FLOOR = 1e-12  # absolute stopping floor for (near-)noiseless data


class FitError(ValueError):
    """Invalid fitting input (empty series, mixed data in a ranking, ...)."""


@dataclass(frozen=True)
class FitConfig:
    model_id: str = "M1"
    multistart: int = 16
    tol: float = 1e-10
    seed: int = 0
    max_iter: int = 20000
    jobs: int = 1
    bootstrap: int = 0  # parametric-bootstrap refits for confidence intervals
    ci_level: float = 0.95

    def __post_init__(self):
        if self.model_id not in MODEL_KERNELS:
            raise FitError(f"unknown model id {self.model_id!r}")
        if self.multistart < 1:
            raise FitError("multistart must be >= 1")
        if self.max_iter < 1 or self.tol <= 0:
            raise FitError("max_iter must be >= 1 and tol > 0")

    def with_model(self, model_id: str) -> "FitConfig":
        return FitConfig(model_id, self.multistart, self.tol, self.seed, self.max_iter,
                         self.jobs, self.bootstrap, self.ci_level)


@dataclass(eq=False)
class FitResult:
    model_id: str
    theta: ModelParams
    chi2: float
    n_params: int
    aic: float
    converged: bool
    data_key: str
    n_points: int
    starts: list = field(default_factory=list)
    ci: dict | None = None
    series_labels: tuple = ()

    def __post_init__(self):
        if self.n_params != N_PARAMS[self.model_id]:
            raise FitError(f"{self.model_id} has {N_PARAMS[self.model_id]} parameters, not {self.n_params}")

    def to_dict(self) -> dict:
        return {
            "model": self.model_id,
            "theta": self.theta.to_dict(),
            "chi2": self.chi2,
            "n_params": self.n_params,
            "aic": self.aic,
            "converged": self.converged,
            "n_points": self.n_points,
            "data_key": self.data_key,
            "series": list(self.series_labels),
            "starts": self.starts,
            "ci": self.ci,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            d["model"], ModelParams.from_dict(d["theta"]), float(d["chi2"]), int(d["n_params"]),
            float(d["aic"]), bool(d["converged"]), d.get("data_key", ""), int(d.get("n_points", 0)),
            list(d.get("starts") or []), d.get("ci"), tuple(d.get("series") or ()),
        )


# -- coordinates --------------------------------------------------------------

def encode(theta: ModelParams) -> np.ndarray:
    x = [theta.omega_z, math.log(theta.gamma_z), math.log(theta.Gamma_s), float(logit(theta.Gamma_r))]
    k = theta.kernel
    if k.kind == "Exp":
        x.append(math.log(max(k.b0, 1e-300)))
    elif k.kind == "Rational2":
        x += [k.a0, math.log(k.b0), math.log(k.b1)]
    return np.array(x)


def decode(x, model_id: str) -> ModelParams:
    x = np.asarray(x, dtype=float)
    wz, lgz, lgs, lgr = x[:4]
    gr = float(expit(lgr))
    if not gr < 1.0:
        gr = np.nextafter(1.0, 0.0)
    kind = MODEL_KERNELS[model_id]
    if kind == "Delta":
        kernel = KernelSpec.delta()
    elif kind == "Exp":
        kernel = KernelSpec.exp(math.exp(x[4]))
    else:
        kernel = KernelSpec.rational2(float(x[4]), math.exp(x[5]), math.exp(x[6]))
    return ModelParams.from_rates(float(wz), math.exp(lgz), math.exp(lgs), gr, kernel)


# -- objective ----------------------------------------------------------------

def _as_list(series) -> list[BlochSeries]:
    if isinstance(series, BlochSeries):
        return [series]
    out = list(series)
    if not out:
        raise FitError("no series to fit")
    return out


def _prep_vector(s: BlochSeries) -> np.ndarray:
    v0 = s.v0
    if v0 is None:
        raise FitError(f"series {s.prep_label!r} does not record its preparation state")
    return v0


def predict_series(theta: ModelParams, series: BlochSeries, prop=None) -> np.ndarray:
    prop = prop or build_propagator(theta)
    return bloch_trajectory(prop, theta, _prep_vector(series), series.times)


def chi_squared(theta: ModelParams, series) -> float:
    """``sum_j sum_k (v_hat_jk - v_jk(theta))^2 / sigma_jk^2`` over one or several series."""
    prop = build_propagator(theta)
    total = 0.0
    for s in _as_list(series):
        if len(s) == 0:
            raise FitError("empty series")
        pred = bloch_trajectory(prop, theta, _prep_vector(s), s.times)
        if not np.all(np.isfinite(pred)):
            raise FloatingPointError(f"non-finite model prediction for {theta}")
        total += float((((s.vectors - pred) / s.sigma) ** 2).sum())
    return total


class _Objective:
    """Picklable chi^2 in optimiser coordinates; counts evaluations."""

    def __init__(self, series: list[BlochSeries], model_id: str):
        self.model_id = model_id
        self.data = [(s.times, s.vectors, s.sigma, _prep_vector(s)) for s in series]
        self.nfev = 0

    def theta(self, x) -> ModelParams | None:
        try:
            return decode(x, self.model_id)
        except (ParameterError, OverflowError, ValueError):
            return None

    def __call__(self, x) -> float:
        self.nfev += 1
        if not np.all(np.isfinite(x)):
            return BAD_CHI2
        theta = self.theta(x)
        if theta is None:
            return BAD_CHI2
        assert theta.gamma_z > 0 and theta.gamma_plus > 0 and theta.gamma_minus > 0 and theta.Gamma_r < 1
        try:
            prop = build_propagator(theta)
            total = 0.0
            # explosive trial points overflow here; they are mapped to BAD_CHI2 below
            with np.errstate(over="ignore", invalid="ignore"):
                for t, v, s, v0 in self.data:
                    pred = bloch_trajectory(prop, theta, v0, t)
                    total += float((((v - pred) / s) ** 2).sum())
        except (PropagatorError, FloatingPointError, ZeroDivisionError, OverflowError):
            return BAD_CHI2
        return total if math.isfinite(total) else BAD_CHI2


def _nelder_mead(obj: _Objective, x0, budget: int, tol: float):
    """Nelder-Mead restarted from its own optimum until the relative chi^2 gain drops below ``tol``."""
    x = np.asarray(x0, dtype=float)
    f = obj(x)
    used = 1
    converged = False
    while used < budget:
        res = minimize(
            obj, x, method="Nelder-Mead",
            options={"maxfev": budget - used, "xatol": 1e-9, "fatol": tol * f + CHI2_FLOOR, "adaptive": True},
        )
        used += res.nfev
        gain = f - res.fun
        if res.fun < f:
            x, f = res.x, float(res.fun)
        if gain <= tol * f + CHI2_FLOOR:
            converged = f < BAD_CHI2
            break
    return x, f, used, converged


# -- starting points ----------------------------------------------------------

def omega_guess(series, omegas=None) -> float | None:
    """Peak of the coherence periodogram ``|sum_j c(t_j) e^{-i w t_j}|``.

    ``c = vx - i vy`` rotates as ``e^{+i omega_z t}``, so the sign of the
    detuning is resolved.  Returns ``None`` without usable coherence.
    """
    series = _as_list(series)
    t_max = max(float(s.times[-1]) for s in series)
    if omegas is None:
        step = 2 * math.pi / (8 * t_max)
        omegas = np.arange(-3.0, 3.0 + step, step)
    power = np.zeros(len(omegas))
    used = False
    for s in series:
        v0 = s.v0
        c0 = complex(v0[0], -v0[1]) if v0 is not None else 0
        if abs(c0) < 0.1:
            continue
        c = (s.vectors[:, 0] - 1j * s.vectors[:, 1]) / c0
        w = np.gradient(s.times) if len(s) > 1 else np.ones(1)
        phase = np.exp(-1j * np.outer(omegas, s.times))
        power += np.abs(phase @ (c * w)) ** 2
        used = True
    if not used:
        return None
    return float(omegas[int(np.argmax(power))])


def _lhs_starts(model_id: str, n: int, seed: int) -> np.ndarray:
    dims = N_PARAMS[model_id]
    u = qmc.LatinHypercube(d=dims, seed=np.random.default_rng(seed)).random(n)
    lo, hi = RATE_DECADES
    ln10 = math.log(10)
    x = np.empty((n, dims))
    x[:, 0] = OMEGA_RANGE[0] + u[:, 0] * (OMEGA_RANGE[1] - OMEGA_RANGE[0])
    x[:, 1] = (lo + u[:, 1] * (hi - lo)) * ln10
    x[:, 2] = (lo + u[:, 2] * (hi - lo)) * ln10
    x[:, 3] = logit(0.02 + 0.96 * u[:, 3])
    if dims == 5:
        x[:, 4] = (lo + u[:, 4] * (hi - lo)) * ln10
    elif dims == 7:
        x[:, 4] = -1 + 2 * u[:, 4]
        x[:, 5] = (lo + u[:, 5] * (hi - lo)) * ln10
        x[:, 6] = (lo + u[:, 6] * (hi - lo)) * ln10
    return x


def embed(theta: ModelParams, model_id: str) -> ModelParams | None:
    """Express a smaller model's parameters in a larger nested model.

    M1 -> M2 is exact (pole/zero cancellation).  M0 -> M1 uses a fast kernel
    whose integral rescales the dephasing rate, exact as ``b0 -> inf``.
    """
    src = theta.model_id
    if src == model_id:
        return theta
    if src == "M0" and model_id in ("M1", "M2"):
        scale = 1e3 * max(abs(theta.omega_z), theta.Gamma_s, theta.gamma_z, 1e-3)
        # the memory term sees 1/(2 g + b0) near the slow poles, so g/(2 g + b0) = gamma_z
        gz = theta.gamma_z
        g = gz * scale / (1 - 2 * gz) if gz < 0.25 else gz * scale
        m1 = ModelParams(theta.omega_z, g, theta.gamma_plus, theta.gamma_minus, KernelSpec.exp(scale))
        return m1 if model_id == "M1" else embed(m1, "M2")
    if src == "M1" and model_id == "M2":
        b = theta.kernel.b0
        c = 1e-3 * max(b, 1e-6)
        return ModelParams(theta.omega_z, theta.gamma_z, theta.gamma_plus, theta.gamma_minus,
                           KernelSpec.rational2(c, b * c, b + c))
    return None


def _start_points(series, config: FitConfig, warm_starts) -> list[np.ndarray]:
    starts = list(_lhs_starts(config.model_id, config.multistart, config.seed))
    w = omega_guess(series)
    if w is not None:
        # half of the starts get the data-driven detuning
        for i in range(0, len(starts), 2):
            starts[i][0] = w
    for theta in warm_starts or ():
        e = embed(theta, config.model_id)
        if e is not None:
            starts.append(encode(e))
    return starts


def _run_start(args):
    series, model_id, x0, budget, tol = args
    obj = _Objective(series, model_id)
    return _nelder_mead(obj, x0, budget, tol)


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def data_key(series) -> str:
    h = hashlib.sha256()
    for s in _as_list(series):
        h.update(s.prep_label.encode())
        for arr in (s.times, s.vectors, s.sigma):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def aic_value(chi2: float, series, n_params: int) -> float:
    """``-2 ln L + 2p`` for independent Gaussian errors with known sigma."""
    log_norm = sum(float(np.log(2 * np.pi * s.sigma**2).sum()) for s in _as_list(series))
    return chi2 + log_norm + 2 * n_params


def fit_model(series, config: FitConfig | None = None, warm_starts: Sequence[ModelParams] = ()) -> FitResult:
    """Multistart fit of one model to one series (or jointly to several).

    All starts are screened with a small evaluation budget; the best few are
    then polished by restarted Nelder-Mead until the relative chi^2 change
    falls below ``config.tol``.
    """
    config = config or FitConfig()
    series = _as_list(series)
    p = N_PARAMS[config.model_id]
    n_points = sum(len(s) for s in series)
    if any(len(s) < p + 1 for s in series) and n_points < p + 1:
        raise FitError(f"{config.model_id} needs at least {p + 1} time points")

    starts = _start_points(series, config, warm_starts)
    screen_budget = min(SCREEN_FEVALS, config.max_iter)
    screened = _map(_run_start, [(series, config.model_id, x0, screen_budget, 1e-6) for x0 in starts], config.jobs)
    f0 = [_Objective(series, config.model_id)(x0) for x0 in starts]
    order = sorted(range(len(starts)), key=lambda i: (screened[i][1], i))
    chosen = order[:POLISH_STARTS]
    polished = _map(
        _run_start,
        [(series, config.model_id, screened[i][0], config.max_iter, config.tol) for i in chosen],
        config.jobs,
    )

    records = []
    for i, x0 in enumerate(starts):
        records.append({"start": i, "chi2_initial": f0[i], "chi2_screen": screened[i][1],
                        "nfev": screened[i][2], "polished": i in chosen})
    best = None
    for i, (x, f, used, conv) in zip(chosen, polished):
        records[i]["chi2_final"] = f
        records[i]["nfev"] += used
        records[i]["converged"] = conv
        if best is None or f < best[1]:
            best = (x, f, conv)
    x, chi2, conv = best
    theta = decode(x, config.model_id)
    chi2 = chi_squared(theta, series)
    result = FitResult(
        config.model_id, theta, chi2, p, aic_value(chi2, series, p), bool(conv and chi2 < BAD_CHI2),
        data_key(series), n_points, records, None, tuple(s.prep_label for s in series),
    )
    if config.bootstrap:
        result.ci = bootstrap_ci(result, series, config)
    return result


def fit_nested(series, models=("M0", "M1", "M2"), config: FitConfig | None = None) -> dict:
    """Fit models in nesting order, warm-starting each from the previous optimum."""
    config = config or FitConfig()
    out: dict[str, FitResult] = {}
    order = sorted(models, key=lambda m: N_PARAMS[m])
    for m in order:
        warm = [r.theta for r in out.values()]
        out[m] = fit_model(series, config.with_model(m), warm)
    return {m: out[m] for m in models}


# -- uncertainty --------------------------------------------------------------

PARAM_NAMES = ("omega_z", "gamma_z", "gamma_plus", "gamma_minus")


def _param_vector(theta: ModelParams) -> dict:
    d = {n: getattr(theta, n) for n in PARAM_NAMES}
    k = theta.kernel
    if k.kind == "Exp":
        d["b0"] = k.b0
    elif k.kind == "Rational2":
        d.update(a0=k.a0, b0=k.b0, b1=k.b1)
    return d


def bootstrap_ci(result: FitResult, series, config: FitConfig) -> dict:
    """Percentile intervals from parametric-bootstrap refits.

    Synthetic series are drawn around the fitted trajectory with the observed
    per-component sigma; each is refit from the fitted optimum.
    """
    series = _as_list(series)
    rng = np.random.Generator(np.random.Philox(key=[int(config.seed), 0xB007]))
    preds = [predict_series(result.theta, s) for s in series]
    samples = []
    for _ in range(config.bootstrap):
        fake = []
        for s, pred in zip(series, preds):
            v = pred + rng.normal(size=pred.shape) * s.sigma
            n = np.linalg.norm(v, axis=1, keepdims=True)
            v = np.where(n > 1, v / n, v)
            fake.append(BlochSeries(s.prep_label, s.times, v, s.sigma, s.metadata))
        obj = _Objective(fake, result.model_id)
        x, _, _, _ = _nelder_mead(obj, encode(result.theta), min(config.max_iter, 4000), 1e-8)
        samples.append(_param_vector(decode(x, result.model_id)))
    alpha = (1 - config.ci_level) / 2
    return {
        k: [float(np.quantile([s[k] for s in samples], alpha)), float(np.quantile([s[k] for s in samples], 1 - alpha))]
        for k in samples[0]
    }


# -- model selection ----------------------------------------------------------

def support_band(delta: float) -> str:
    """Heuristic level of empirical support for an AIC offset."""
    if delta <= 2:
        return "substantial"
    if delta < 4:
        return "substantial to considerably less"
    if delta <= 7:
        return "considerably less"
    if delta <= 10:
        return "considerably less to essentially none"
    return "essentially none"


@dataclass(frozen=True)
class RankEntry:
    model_id: str
    aic: float
    delta: float
    band: str
    n_params: int


def aic_rank(results: Sequence[FitResult]) -> list[RankEntry]:
    """Rank fits of the same data by AIC; ``delta`` is the offset from the best."""
    results = list(results)
    if not results:
        raise FitError("nothing to rank")
    keys = {r.data_key for r in results}
    if len(keys) != 1:
        raise FitError("aic_rank needs fits of one identical data set")
    lowest = min(r.aic for r in results)
    # parsimony among models tied with the lowest AIC
    best = min((r for r in results if r.aic - lowest <= AIC_TIE), key=lambda r: (r.n_params, r.aic))
    order = [best] + sorted((r for r in results if r is not best), key=lambda r: (r.aic, r.n_params))
    ranked = []
    for r in order:
        delta = 0.0 if r is best else abs(r.aic - best.aic)
        ranked.append(RankEntry(r.model_id, r.aic, delta, support_band(delta), r.n_params))
    return ranked


def ranking_to_dict(ranking: Sequence[RankEntry]) -> list:
    return [{"model": e.model_id, "aic": e.aic, "delta": e.delta, "band": e.band, "n_params": e.n_params}
            for e in ranking]


# -- prediction checks --------------------------------------------------------

@dataclass(frozen=True)
class PredictionReport:
    model_id: str
    labels: tuple
    p5: float
    p50: float
    p95: float
    distances: dict

    def to_dict(self) -> dict:
        return {"model": self.model_id, "series": list(self.labels), "p5": self.p5, "median": self.p50,
                "p95": self.p95, "distances": {k: [float(x) for x in v] for k, v in self.distances.items()}}


def prediction_distances(theta: ModelParams, series: BlochSeries) -> np.ndarray:
    return bloch_trace_distance(series.vectors, predict_series(theta, series))


def validate_predictions(
    fit: FitResult, test_series: Sequence[BlochSeries], allow_fit_series: bool = False
) -> PredictionReport:
    """Trace distances between observed and predicted states pooled over all test points.

    Series used for fitting are rejected unless ``allow_fit_series`` is set
    (in-sample distances).
    """
    test_series = _as_list(test_series)
    overlap = set(fit.series_labels) & {s.prep_label for s in test_series}
    if overlap and not allow_fit_series:
        raise FitError(f"test series {sorted(overlap)} were used for fitting")
    prop = build_propagator(fit.theta)
    dists = {}
    for s in test_series:
        pred = bloch_trajectory(prop, fit.theta, _prep_vector(s), s.times)
        dists[s.prep_label] = bloch_trace_distance(s.vectors, pred)
    pooled = np.concatenate(list(dists.values()))
    p5, p50, p95 = (float(x) for x in np.percentile(pooled, [5, 50, 95]))
    return PredictionReport(fit.model_id, tuple(dists), p5, p50, p95, dists)


def write_reports_csv(reports: Sequence[PredictionReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "series", "p5", "median", "p95"])
        for r in reports:
            w.writerow([r.model_id, "+".join(r.labels), fmt(r.p5), fmt(r.p50), fmt(r.p95)])


def save_fits(results, path, ranking=None) -> None:
    doc = {"fits": [r.to_dict() for r in results]}
    if ranking is not None:
        doc["ranking"] = ranking_to_dict(ranking)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
