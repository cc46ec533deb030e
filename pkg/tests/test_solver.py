import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from pmme_lab.model import KernelSpec, ModelParams, damping_basis, lindblad_generator_matrix
from pmme_lab.qstate import BlochVector, DensityMatrix, bloch_components, bloch_to_density
from pmme_lab.solver import (
    MERGE_TOL,
    PropagatorError,
    _cluster,
    _cubic_roots,
    build_propagator,
    choi_check,
    choi_eigenvalues,
    choi_matrix,
    cp_violations,
    propagate,
    propagate_matrix,
    reference_bloch,
    reference_integrate,
    trajectory,
    write_trajectory_csv,
)

from conftest import is_stable, random_theta, random_unit_vector

GRID = np.linspace(0, 100, 10001)


def max_dev(theta, v0, times=GRID):
    return np.abs(trajectory(theta, v0, times) - reference_bloch(theta, v0, times)).max()


# -- propagator structure -------------------------------------------------------

def test_delta_closed_forms():
    theta = ModelParams.from_rates(1.0, 0.1, 0.1, 0.25)
    prop = build_propagator(theta)
    assert prop.xi(4, 10.0) == pytest.approx(math.exp(-1), abs=1e-15)
    t = np.linspace(0, 20, 41)
    np.testing.assert_allclose(prop.xi(2, t), np.exp((-0.25 + 1j) * t), atol=1e-14)
    assert [len(x) for x in prop.terms] == [1, 1, 1, 1]
    assert prop.terms[0][0] == (0j, 1 + 0j, 1)


def test_exp_example_is_a_double_pole():
    # x = 2 + b0/gz = 4 and the pole quadratic Z^2 + 4Z + 2/gz has zero discriminant
    theta = ModelParams(1.0, 0.5, 0.01, 0.09, KernelSpec.exp(1.0))
    prop = build_propagator(theta)
    assert max(term.multiplicity for term in prop.terms[1]) == 2
    assert np.isfinite(prop.xi(2, GRID)).all()
    assert max_dev(theta, (1, 0, 0)) < 1e-6


def test_exp_distinct_poles_match_oracle():
    theta = ModelParams(1.0, 0.5, 0.01, 0.09, KernelSpec.exp(2.0))
    prop = build_propagator(theta)
    assert [t.multiplicity for t in prop.terms[1]] == [1, 1]
    assert max_dev(theta, (0.6, 0.0, 0.8)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["Delta", "Exp", "Rational2"]))
def test_xi_invariants(seed, kind):
    theta = random_theta(np.random.default_rng(seed), kind)
    prop = build_propagator(theta)
    assert abs(sum(term.residue for term in prop.terms[1] if term.multiplicity == 1) - 1) < 1e-10
    t = np.linspace(0, 100, 301)
    np.testing.assert_allclose(prop.xi(3, t), prop.xi(2, t).conj(), atol=1e-12)
    np.testing.assert_array_equal(prop.xi(1, t), 1)
    np.testing.assert_allclose(prop.xi_all(0.0), 1, atol=1e-10)


def test_cubic_roots_against_numpy():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = rng.normal(size=3) + 1j * rng.normal(size=3)
        ours = np.sort_complex(np.array(_cubic_roots(*a)))
        ref = np.sort_complex(np.roots([1, *a]))
        np.testing.assert_allclose(ours, ref, atol=1e-9)


def test_cluster_merges_close_roots():
    assert _cluster([1.0, 1.0 + 1e-9, 2.0]) == [(1.0 + 5e-10, 2), (2.0, 1)]
    assert len(_cluster([1.0, 1.0 + 10 * MERGE_TOL])) == 2


def test_memory_kernel_requires_dephasing():
    theta = ModelParams(1.0, 1e-320, 0.01, 0.09, KernelSpec.exp(1.0))
    with pytest.raises(PropagatorError):
        build_propagator(theta)


# -- propagate ------------------------------------------------------------------

@pytest.mark.parametrize("kernel", [KernelSpec.delta(), KernelSpec.exp(0.05), KernelSpec.rational2(0.1, 0.05, 0.4)])
def test_gibbs_state_is_stationary(kernel):
    theta = ModelParams.from_rates(0.8, 0.05, 0.03, 0.2, kernel)
    prop = build_propagator(theta)
    R1 = DensityMatrix(damping_basis(theta).R[0])
    for t in (0.0, 1.3, 17.0, 250.0):
        np.testing.assert_allclose(propagate(prop, theta, R1, t).matrix, R1.matrix, atol=1e-15)


def test_delta_steady_state():
    theta = ModelParams.from_rates(1.0, 0.1, 0.1, 1 / 9)
    prop = build_propagator(theta)
    one = bloch_to_density(BlochVector(0, 0, -1))
    for t in (1e4, 1e6, 1e9, math.inf):
        v = bloch_components(propagate(prop, theta, one, t).matrix)
        np.testing.assert_allclose(v, [0, 0, 0.8], atol=1e-12)


@pytest.mark.parametrize("kind", ["Delta", "Exp", "Rational2"])
def test_time_zero_is_identity(kind):
    rng = np.random.default_rng(9)
    theta = random_theta(rng, kind)
    prop = build_propagator(theta)
    rho0 = bloch_to_density(BlochVector(*random_unit_vector(rng)))
    np.testing.assert_allclose(propagate(prop, theta, rho0, 0.0).matrix, rho0.matrix, atol=1e-10)


def test_negative_time_rejected():
    theta = ModelParams(1.0, 0.1, 0.01, 0.09)
    with pytest.raises(ValueError):
        propagate(build_propagator(theta), theta, bloch_to_density(BlochVector(0, 0, 1)), -1.0)


def test_trace_exact_and_hermitian():
    rng = np.random.default_rng(10)
    for kind in ("Delta", "Exp", "Rational2"):
        for _ in range(10):
            theta = random_theta(rng, kind)
            prop = build_propagator(theta)
            rho0 = bloch_to_density(BlochVector(*random_unit_vector(rng)))
            m = propagate_matrix(prop, damping_basis(theta), rho0, np.linspace(0, 100, 201))
            assert np.all(np.trace(m, axis1=-2, axis2=-1) == 1)
            assert np.abs(m - np.swapaxes(m, -1, -2).conj()).max() < 1e-12


def test_delta_semigroup():
    rng = np.random.default_rng(11)
    for _ in range(10):
        theta = random_theta(rng, "Delta")
        prop = build_propagator(theta)
        rho0 = bloch_to_density(BlochVector(*random_unit_vector(rng)))
        t1, t2 = rng.uniform(0, 30, size=2)
        direct = propagate(prop, theta, rho0, t1 + t2).matrix
        composed = propagate(prop, theta, propagate(prop, theta, rho0, t1), t2).matrix
        assert np.abs(direct - composed).max() < 1e-10


@pytest.mark.parametrize("kernel", [KernelSpec.exp(0.05), KernelSpec.rational2(0.05, 0.02, 0.2)])
def test_memory_breaks_semigroup(kernel):
    theta = ModelParams(0.5, 0.1, 0.002, 0.012, kernel)
    prop = build_propagator(theta)
    rho0 = bloch_to_density(BlochVector(1, 0, 0))
    worst = 0.0
    for t1 in (2.0, 5.0, 10.0):
        for t2 in (2.0, 5.0, 10.0):
            direct = propagate(prop, theta, rho0, t1 + t2).matrix
            composed = propagate(prop, theta, propagate(prop, theta, rho0, t1), t2).matrix
            worst = max(worst, np.abs(direct - composed).max())
    assert worst > 1e-3


def test_trajectory_matches_density_route():
    theta = ModelParams(0.5, 0.02, 0.002, 0.012, KernelSpec.rational2(0.02, 0.05, 0.3))
    prop = build_propagator(theta)
    v0 = np.array([0.5, -0.75, -0.41])
    v0 /= np.linalg.norm(v0)
    t = np.linspace(0, 100, 51)
    ref = np.array([bloch_components(propagate(prop, theta, BlochVector(*v0), x).matrix) for x in t])
    np.testing.assert_allclose(trajectory(theta, v0, t, prop), ref, atol=1e-14)


def test_trajectory_csv(tmp_path):
    theta = ModelParams(1.0, 0.1, 0.01, 0.09)
    t = np.linspace(0, 5, 6)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, t, trajectory(theta, (0, 0, -1), t))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "vx", "vy", "vz", "purity"]
    assert len(rows) == 7
    assert float(rows[1][3]) == -1 and float(rows[1][4]) == 1


# -- reference integrator ---------------------------------------------------------

def test_reference_delta_matches_matrix_exponential():
    theta = ModelParams.from_rates(1.0, 0.1, 0.1, 0.25)
    times = np.linspace(0, 10, 2001)
    v0 = np.array([0.6, 0.0, 0.8])
    got = reference_bloch(theta, v0, times, richardson=False)[-1]
    r = expm(lindblad_generator_matrix(theta) * 10) @ (np.concatenate([[1.0], v0]) / np.sqrt(2))
    np.testing.assert_allclose(got, r[1:] * np.sqrt(2), atol=1e-8)


def test_reference_second_order_convergence():
    theta = ModelParams(0.8, 0.05, 0.01, 0.05, KernelSpec.exp(0.2))
    v0 = (1, 0, 0)
    exact = trajectory(theta, v0, [10.0])[0]
    errs = []
    for n in (1001, 2001, 4001):
        times = np.linspace(0, 10, n)
        got = reference_bloch(theta, v0, times, richardson=False, max_step=1.0)[-1]
        errs.append(np.abs(got - exact).max())
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_reference_returns_density_matrices():
    theta = ModelParams(0.8, 0.05, 0.01, 0.05, KernelSpec.exp(0.2))
    rho0 = bloch_to_density(BlochVector(0, 1, 0))
    out = reference_integrate(theta, rho0, np.linspace(0, 1, 101))
    assert len(out) == 101
    assert out[0] == rho0 or np.allclose(out[0].matrix, rho0.matrix, atol=1e-15)


@pytest.mark.parametrize("times", [np.array([0, 0.01, 0.03]), np.linspace(0, 1, 11), np.linspace(0.5, 1, 51)])
def test_reference_rejects_bad_grids(times):
    with pytest.raises(ValueError):
        reference_bloch(ModelParams(1.0, 0.1, 0.01, 0.09), (0, 0, 1), times)


@pytest.mark.parametrize("kind", ["Exp", "Rational2"])
def test_memory_kernels_match_oracle(kind):
    rng = np.random.default_rng({"Exp": 21, "Rational2": 22}[kind])
    checked = 0
    while checked < 4:
        theta = random_theta(rng, kind)
        if not is_stable(theta):
            continue
        assert max_dev(theta, random_unit_vector(rng)) < 1e-6
        checked += 1


# -- complete positivity --------------------------------------------------------------

def test_choi_identity_at_time_zero():
    theta = ModelParams(0.5, 0.02, 0.002, 0.012, KernelSpec.exp(0.05))
    rep = choi_check(build_propagator(theta), theta, 0.0)
    np.testing.assert_allclose(np.sort(rep.eigenvalues.real), [0, 0, 0, 2], atol=1e-12)
    assert rep.cp_ok


def test_choi_long_time_limit():
    theta = ModelParams.from_rates(1.0, 0.1, 0.1, 1 / 9)
    ev = choi_eigenvalues(0.0, 0.0, 1 / 9)
    np.testing.assert_allclose(np.sort(ev.real), [0.1, 0.1, 0.9, 0.9], atol=1e-15)
    C = choi_matrix(build_propagator(theta), theta, 1e6)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(C)), [0.1, 0.1, 0.9, 0.9], atol=1e-12)


def test_delta_is_always_cp():
    rng = np.random.default_rng(30)
    for _ in range(40):
        theta = random_theta(rng, "Delta")
        assert cp_violations(theta, np.linspace(0, 200, 101)) == []


def test_closed_form_matches_assembled_choi():
    rng = np.random.default_rng(31)
    for kind in ("Exp", "Rational2"):
        for _ in range(100):
            theta = random_theta(rng, kind)
            if not is_stable(theta):
                continue
            prop = build_propagator(theta)
            t = rng.uniform(0, 100)
            rep = choi_check(prop, theta, t)
            C = choi_matrix(prop, theta, t)
            num = np.linalg.eigvalsh(C)
            np.testing.assert_allclose(np.sort(rep.eigenvalues.real), num, atol=1e-10)
            assert rep.cp_ok == (num.min() >= -1e-10)
            assert abs(rep.eigenvalues.sum() - 2) < 1e-10


def test_cp_violation_detected():
    # kernel integral a0/b0 ~ 14 overshoots the coherence through zero and back past the CP bound
    theta = ModelParams(0.41, 0.0204, 0.0064, 0.0608, KernelSpec.rational2(0.835, 0.058, 0.166))
    bad = cp_violations(theta, np.linspace(0, 50, 501))
    assert bad
    rep = choi_check(build_propagator(theta), theta, bad[0])
    assert not rep.cp_ok and rep.margin < -1e-10
