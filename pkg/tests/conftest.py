import numpy as np
import pytest

from pmme_lab.model import KernelSpec, ModelParams
from pmme_lab.solver import build_propagator

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict = {}


def random_theta(rng: np.random.Generator, kind: str) -> ModelParams:
    """Desk-scale parameters: rates 1e-3..1e-1 per us, |omega_z| <= 2 rad/us."""
    wz = rng.uniform(-2, 2)
    gz = 10 ** rng.uniform(-3, -1)
    gs = 10 ** rng.uniform(-3, -1)
    gr = rng.uniform(0.05, 0.9)
    if kind == "Delta":
        k = KernelSpec.delta()
    elif kind == "Exp":
        k = KernelSpec.exp(10 ** rng.uniform(-2, 0))
    else:
        k = KernelSpec.rational2(rng.uniform(0, 1), 10 ** rng.uniform(-2, 0), 10 ** rng.uniform(-1.3, 0.3))
    return ModelParams.from_rates(wz, gz, gs, gr, k)


def is_stable(theta: ModelParams) -> bool:
    prop = build_propagator(theta)
    return all(term.pole.real <= 1e-12 for terms in prop.terms for term in terms)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_ball_vector(rng: np.random.Generator) -> np.ndarray:
    return random_unit_vector(rng) * rng.uniform(0, 1) ** (1 / 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
