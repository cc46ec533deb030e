import csv
import json
import math

import numpy as np
import pytest

from pmme_lab import fit as fit_mod
from pmme_lab.experiment import EXACT, TABLE_I, default_times, simulate_dataset
from pmme_lab.model import KernelSpec, ModelParams
from pmme_lab.recon import BlochSeries, reconstruct_series
from pmme_lab.fit import (
    FitConfig,
    FitError,
    FitResult,
    aic_rank,
    aic_value,
    chi_squared,
    decode,
    embed,
    encode,
    fit_model,
    fit_nested,
    omega_guess,
    ranking_to_dict,
    save_fits,
    support_band,
    validate_predictions,
    write_reports_csv,
)
from pmme_lab.solver import trajectory

M0_TRUTH = ModelParams(0.5, 0.02, 0.002, 0.012)
M1_TRUTH = ModelParams(0.5, 0.02, 0.002, 0.012, KernelSpec.exp(0.05))
PARAMS = ("omega_z", "gamma_z", "gamma_plus", "gamma_minus")


def exact_series(theta, label="psi0", times=None):
    ds = simulate_dataset(theta, TABLE_I.subset([label]), default_times() if times is None else times, shots=EXACT)
    return reconstruct_series(ds, label)


def noisy_series(theta, seed, labels=("psi0",), resamples=100):
    ds = simulate_dataset(theta, TABLE_I.subset(list(labels)), seed=seed)
    return [reconstruct_series(ds, lbl, resamples=resamples, seed=seed) for lbl in labels]


def fake_result(model_id, aic, key="k", theta=M1_TRUTH):
    p = {"M0": 4, "M1": 5, "M2": 7}[model_id]
    return FitResult(model_id, theta, 0.0, p, aic, True, key, 10)


# -- chi^2 -------------------------------------------------------------------------

def test_chi2_zero_at_truth():
    assert chi_squared(M1_TRUTH, exact_series(M1_TRUTH)) < 1e-12


def test_chi2_single_component_two_sigma():
    v = trajectory(M0_TRUTH, (0, 0, 1), [1.0])
    v[0, 2] -= 0.2
    s = BlochSeries("one", [1.0], v, [[0.1, 0.1, 0.1]], {"prep_bloch": [0, 0, 1]})
    assert chi_squared(M0_TRUTH, s) == pytest.approx(4.0, abs=1e-12)


def test_chi2_matches_double_loop():
    series = noisy_series(M1_TRUTH, seed=3, labels=("psi0", "psi2"), resamples=30)
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta = ModelParams.from_rates(rng.uniform(0, 1), 10 ** rng.uniform(-3, -1), 10 ** rng.uniform(-3, -1),
                                       rng.uniform(0.05, 0.9), KernelSpec.exp(10 ** rng.uniform(-2, 0)))
        ref = 0.0
        for s in series:
            pred = trajectory(theta, s.v0, s.times)
            for j in range(len(s)):
                for k in range(3):
                    ref += (s.vectors[j, k] - pred[j, k]) ** 2 / s.sigma[j, k] ** 2
        assert chi_squared(theta, series) == pytest.approx(ref, rel=1e-12)


def test_chi2_requires_preparation():
    s = BlochSeries("x", [1.0], [[0, 0, 1]], [[1, 1, 1]])
    with pytest.raises(FitError):
        chi_squared(M0_TRUTH, s)


# -- coordinates -------------------------------------------------------------------

@pytest.mark.parametrize("theta", [
    M0_TRUTH, M1_TRUTH, ModelParams(-0.3, 0.05, 0.001, 0.02, KernelSpec.rational2(-0.02, 0.03, 0.4)),
])
def test_encode_decode_round_trip(theta):
    back = decode(encode(theta), theta.model_id)
    for name in PARAMS:
        assert getattr(back, name) == pytest.approx(getattr(theta, name), rel=1e-12)
    assert back.kernel.kind == theta.kernel.kind


def test_decode_is_always_feasible():
    rng = np.random.default_rng(1)
    for model_id, dims in (("M0", 4), ("M1", 5), ("M2", 7)):
        for _ in range(500):
            theta = decode(rng.normal(scale=8, size=dims), model_id)
            assert theta.gamma_z > 0 and theta.gamma_plus > 0 and theta.gamma_minus > 0 and theta.Gamma_r < 1


def test_embeddings_reproduce_the_smaller_model():
    t = np.linspace(0, 100, 301)
    m2 = embed(M1_TRUTH, "M2")
    assert m2.kernel.kind == "Rational2"
    np.testing.assert_allclose(trajectory(m2, (1, 0, 0), t), trajectory(M1_TRUTH, (1, 0, 0), t), atol=1e-9)
    m1 = embed(M0_TRUTH, "M1")
    np.testing.assert_allclose(trajectory(m1, (1, 0, 0), t), trajectory(M0_TRUTH, (1, 0, 0), t), atol=1e-3)
    assert embed(M1_TRUTH, "M0") is None


def test_omega_guess_resolves_sign():
    for wz in (0.5, -0.5, 1.3):
        theta = ModelParams(wz, 0.02, 0.002, 0.012)
        assert omega_guess(exact_series(theta, times=np.linspace(0.1, 100, 200))) == pytest.approx(wz, abs=0.02)
    assert omega_guess(exact_series(M1_TRUTH, label="psi1")) is None


# -- fitting -------------------------------------------------------------------------

def test_m0_exact_recovery():
    s = exact_series(M0_TRUTH)
    r = fit_model(s, FitConfig("M0", multistart=8, seed=0))
    assert r.converged and r.n_params == 4
    for name in PARAMS:
        assert getattr(r.theta, name) == pytest.approx(getattr(M0_TRUTH, name), rel=1e-3)


def test_nested_fits_on_noiseless_data():
    s = exact_series(M1_TRUTH)
    fits = fit_nested(s, ("M0", "M1", "M2"), FitConfig(multistart=8, seed=0))
    c0, c1, c2 = (fits[m].chi2 for m in ("M0", "M1", "M2"))
    assert c2 <= c1 + 1e-9 and c1 <= c0 + 1e-9
    # M2 with a cancelling pole/zero pair reduces to M1
    assert abs(c2 - c1) < 1e-6
    assert fits["M1"].converged and fits["M2"].converged


def test_fit_never_evaluates_infeasible_theta(monkeypatch):
    seen = []
    real = fit_mod.decode

    def spy(x, model_id):
        theta = real(x, model_id)
        seen.append(theta)
        return theta

    monkeypatch.setattr(fit_mod, "decode", spy)
    fit_model(noisy_series(M1_TRUTH, 1, resamples=20), FitConfig("M1", multistart=3, seed=0, max_iter=600))
    assert len(seen) > 100
    assert all(t.gamma_z > 0 and t.gamma_plus > 0 and t.gamma_minus > 0 and t.Gamma_r < 1 for t in seen)


def test_best_chi2_not_above_any_start():
    r = fit_model(noisy_series(M1_TRUTH, 2, resamples=20), FitConfig("M1", multistart=6, seed=3))
    assert len(r.starts) >= 6
    assert all(r.chi2 <= rec["chi2_initial"] + 1e-9 for rec in r.starts)
    assert r.chi2 <= min(rec["chi2_screen"] for rec in r.starts) + 1e-9


def test_fit_is_deterministic_and_parallel_safe():
    s = noisy_series(M0_TRUTH, 5, resamples=20)
    a = fit_model(s, FitConfig("M0", multistart=4, seed=11))
    b = fit_model(s, FitConfig("M0", multistart=4, seed=11))
    c = fit_model(s, FitConfig("M0", multistart=4, seed=11, jobs=2))
    assert a.to_dict() == b.to_dict() == c.to_dict()


def test_too_few_points():
    s = exact_series(M1_TRUTH, times=[1.0, 2.0, 3.0])
    with pytest.raises(FitError):
        fit_model(s, FitConfig("M1"))


def test_config_validation():
    with pytest.raises(FitError):
        FitConfig("M3")
    with pytest.raises(FitError):
        FitConfig(multistart=0)


def test_result_round_trip(tmp_path):
    r = fit_model(exact_series(M0_TRUTH), FitConfig("M0", multistart=2, seed=0))
    back = FitResult.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.to_dict() == r.to_dict()
    save_fits([r], tmp_path / "fits.json", aic_rank([r]))
    doc = json.loads((tmp_path / "fits.json").read_text())
    assert doc["fits"][0]["model"] == "M0" and doc["ranking"][0]["delta"] == 0
    with pytest.raises(FitError):
        FitResult("M1", M1_TRUTH, 0.0, 4, 0.0, True, "", 0)


def test_bootstrap_interval_coverage():
    hits = {n: 0 for n in PARAMS}
    for seed in range(50):
        (s,) = noisy_series(M0_TRUTH, seed, resamples=250)
        r = fit_model(s, FitConfig("M0", multistart=4, seed=seed, bootstrap=20))
        for n in PARAMS:
            lo, hi = r.ci[n]
            hits[n] += lo <= getattr(M0_TRUTH, n) <= hi
    assert all(h / 50 >= 0.8 for h in hits.values()), hits


# -- AIC ranking -----------------------------------------------------------------------

def test_aic_arithmetic():
    # sigma = 1/sqrt(2 pi) zeroes the normalisation, so -2 ln L = chi^2 = 20
    s = BlochSeries("p", [1.0], [[0, 0, 0]], np.full((1, 3), 1 / math.sqrt(2 * math.pi)))
    assert aic_value(20.0, s, 5) == pytest.approx(30.0, abs=1e-12)


def test_rank_ordering_and_bands():
    ranking = aic_rank([fake_result("M0", 19.46), fake_result("M1", 10.43), fake_result("M2", 10.0)])
    assert [e.model_id for e in ranking] == ["M2", "M1", "M0"]
    np.testing.assert_allclose([e.delta for e in ranking], [0, 0.43, 9.46], atol=1e-12)
    assert [e.band for e in ranking] == ["substantial", "substantial", "considerably less to essentially none"]
    assert sum(e.delta == 0 for e in ranking) == 1
    assert ranking_to_dict(ranking)[2]["model"] == "M0"


def test_rank_tie_prefers_parsimony():
    ranking = aic_rank([fake_result("M2", 5.0), fake_result("M1", 5.0 + 1e-12)])
    assert ranking[0].model_id == "M1" and ranking[0].delta == 0 and ranking[1].delta >= 0
    assert sum(e.delta == 0 for e in ranking) == 1


def test_rank_rejects_mixed_data():
    with pytest.raises(FitError):
        aic_rank([fake_result("M0", 1.0, "a"), fake_result("M1", 2.0, "b")])
    with pytest.raises(FitError):
        aic_rank([])


@pytest.mark.parametrize("delta,band", [(0, "substantial"), (3, "substantial to considerably less"),
                                        (5, "considerably less"), (8, "considerably less to essentially none"),
                                        (12, "essentially none")])
def test_support_bands(delta, band):
    assert support_band(delta) == band


# -- validation ----------------------------------------------------------------------------

def test_perfect_predictions_give_zero_percentiles():
    fit = fake_result("M1", 0.0)
    fit.series_labels = ("psi0",)
    tests = [exact_series(M1_TRUTH, lbl) for lbl in ("psi1", "psi2", "psi3", "psi4")]
    rep = validate_predictions(fit, tests)
    assert max(rep.p5, rep.p50, rep.p95) < 1e-9
    assert rep.labels == ("psi1", "psi2", "psi3", "psi4")


def test_validation_rejects_fitting_series(tmp_path):
    fit = fake_result("M1", 0.0)
    fit.series_labels = ("psi0",)
    s = exact_series(M1_TRUTH)
    with pytest.raises(FitError):
        validate_predictions(fit, [s])
    rep = validate_predictions(fit, [s], allow_fit_series=True)
    write_reports_csv([rep], tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["model", "series", "p5", "median", "p95"] and rows[1][:2] == ["M1", "psi0"]


def test_percentiles_pool_all_points():
    fit = fake_result("M0", 0.0, theta=M0_TRUTH)
    tests = noisy_series(M1_TRUTH, 4, labels=("psi2", "psi3"), resamples=0)
    rep = validate_predictions(fit, tests)
    pooled = np.concatenate([rep.distances["psi2"], rep.distances["psi3"]])
    assert rep.p50 == pytest.approx(float(np.median(pooled)), abs=1e-15)
    assert rep.p5 <= rep.p50 <= rep.p95
