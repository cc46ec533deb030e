"""Analytic propagation of the post-Markovian master equation.

The solution is written in the damping basis as
``rho(t) = sum_i xi_i(t) Tr[L_i rho(0)] R_i`` where each ``xi_i`` is the inverse
Laplace transform of ``1/(s - l0_i - l1_i k~(s - l_i))``.  For the three kernel
families the transform is rational, so ``xi_i`` is a finite sum of
``residue * t^(m-1) e^(pole t) / (m-1)!`` terms found with the residue theorem.

A brute-force time-domain integrator (``reference_integrate``) and the Choi
matrix complete-positivity test live here as well.
"""
from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import expm

from ._io import fmt
from .model import (
    DampingBasis,
    KernelSpec,
    ModelParams,
    damping_basis,
    lindbladian_parts,
    pauli_transfer_matrix,
)
from .qstate import (
    BlochVector,
    DensityMatrix,
    bloch_components,
    bloch_to_density,
    density_to_bloch,
)

T_CAP = 1e6  # us; later times are evaluated at the cap
MERGE_TOL = 1e-6  # Cardano splits an exact double root by ~sqrt(eps); merge error is O(delta^2)
CP_TOL = 1e-10
DEFAULT_STEP = 0.005  # us, internal oracle step


class PropagatorError(ArithmeticError):
    """Raised when the pole/residue construction meets non-finite input."""


class PoleTerm(NamedTuple):
    pole: complex
    residue: complex
    multiplicity: int


@dataclass(frozen=True)
class Propagator:
    """Pole-residue form of the four damping-basis factors ``xi_1..xi_4``."""

    terms: tuple  # four tuples of PoleTerm

    def xi(self, i: int, t) -> np.ndarray:
        """Evaluate ``xi_i`` (1-based index) at times ``t``."""
        t = np.minimum(np.asarray(t, dtype=float), T_CAP)
        out = np.zeros(t.shape, dtype=complex)
        with np.errstate(under="ignore"):
            for pole, res, m in self.terms[i - 1]:
                out += res * t ** (m - 1) / math.factorial(m - 1) * np.exp(pole * t)
        return out

    def xi_all(self, t) -> np.ndarray:
        """Array of shape ``t.shape + (4,)``; ``xi_3`` is the conjugate of ``xi_2``."""
        x2 = self.xi(2, t)
        t = np.asarray(t, dtype=float)
        return np.stack([np.ones(t.shape, dtype=complex), x2, x2.conj(), self.xi(4, t)], axis=-1)


# -- roots ------------------------------------------------------------------

def _quadratic_roots(b: complex, c: complex):
    """Roots of ``Z^2 + b Z + c`` without cancellation."""
    sq = cmath.sqrt(b * b - 4 * c)
    if abs(b + sq) < abs(b - sq):
        sq = -sq
    q = -0.5 * (b + sq)
    if q == 0:
        return [0j, 0j]
    return [q, c / q]


def _cbrt(z: complex) -> complex:
    if z == 0:
        return 0j
    return cmath.exp(cmath.log(z) / 3)


def _cubic_roots(a2: complex, a1: complex, a0: complex):
    """Roots of the monic cubic ``Z^3 + a2 Z^2 + a1 Z + a0`` by Cardano's formula.

    Uses the depressed form ``t^3 + p t - q = 0`` with ``Z = t - a2/3``.
    """
    p = a1 - a2 * a2 / 3
    q = -(2 * a2**3 / 27 - a2 * a1 / 3 + a0)
    disc = (p / 3) ** 3 + (q / 2) ** 2
    sq = cmath.sqrt(disc)
    if abs(q / 2 - sq) > abs(q / 2 + sq):
        sq = -sq
    S = _cbrt(q / 2 + sq)
    T = -p / (3 * S) if S != 0 else 0j
    w = complex(-0.5, math.sqrt(3) / 2)
    roots = [S + T, w * S + w.conjugate() * T, w.conjugate() * S + w * T]
    return [_newton_polish(r - a2 / 3, (1, a2, a1, a0)) for r in roots]


def _newton_polish(z: complex, coeffs, steps: int = 2) -> complex:
    """A few Newton steps on a polynomial (highest degree first); keeps only improvements."""
    for _ in range(steps):
        f = fp = 0j
        for c in coeffs:
            fp = fp * z + f
            f = f * z + c
        if fp == 0:
            break
        znew = z - f / fp
        fnew = 0j
        for c in coeffs:
            fnew = fnew * znew + c
        if abs(fnew) >= abs(f):
            break
        z = znew
    return z


def _cluster(roots, tol: float = MERGE_TOL):
    """Group nearly equal roots into ``(mean_root, multiplicity)`` pairs."""
    clusters: list[list[complex]] = []
    for r in roots:
        for cl in clusters:
            c0 = cl[0]
            if abs(r - c0) < tol * max(1.0, abs(c0)):
                cl.append(r)
                break
        else:
            clusters.append([r])
    return [(sum(cl) / len(cl), len(cl)) for cl in clusters]


# -- residues ---------------------------------------------------------------

def _taylor(coeffs_low_first, z0: complex, order: int):
    """Taylor coefficients of a polynomial about ``z0`` up to ``order``."""
    c = list(coeffs_low_first)
    out = []
    fact = 1
    for j in range(order + 1):
        val = 0j
        for k in range(len(c) - 1, -1, -1):
            val = val * z0 + c[k]
        out.append(val / fact)
        c = [k * c[k] for k in range(1, len(c))] or [0]
        fact *= j + 1
    return out


def _series_mul(a, b, order):
    return [sum(a[i] * b[j - i] for i in range(j + 1)) for j in range(order + 1)]


def _pole_terms(numerator_low_first, poles, scale: complex, shift: complex):
    """Inverse Laplace terms of ``N(Z)/prod (Z - Z_k)^m_k`` in the scaled time ``tau = scale t``.

    Poles in ``Z`` map to ``s = scale (Z - shift)``.
    """
    terms = []
    for k, (z0, m) in enumerate(poles):
        order = m - 1
        h = _taylor(numerator_low_first, z0, order)
        for j, (zk, mk) in enumerate(poles):
            if j == k:
                continue
            d = z0 - zk
            inv = [math.comb(mk + n - 1, n) * (-1) ** n / d ** (mk + n) for n in range(order + 1)]
            h = _series_mul(h, inv, order)
        s0 = scale * (z0 - shift)
        for j in range(m):
            n = m - 1 - j
            terms.append(PoleTerm(s0, h[j] * scale**n, n + 1))
    return terms


def build_propagator(theta: ModelParams) -> Propagator:
    kernel = theta.kernel
    gs, gz, wz = theta.Gamma_s, theta.gamma_z, theta.omega_z
    one = (PoleTerm(0j, 1 + 0j, 1),)
    four = (PoleTerm(complex(-gs), 1 + 0j, 1),)
    if kernel.kind == "Delta":
        lam2 = complex(-gs / 2 - 2 * gz, wz)
        two = (PoleTerm(lam2, 1 + 0j, 1),)
    else:
        two = tuple(_xi2_terms(kernel, gs, gz, wz))
    three = tuple(PoleTerm(p.pole.conjugate(), p.residue.conjugate(), p.multiplicity) for p in two)
    for term in two:
        if not (cmath.isfinite(term.pole) and cmath.isfinite(term.residue)):
            raise PropagatorError(f"non-finite pole/residue for {theta}")
    return Propagator((one, two, three, four))


def _xi2_terms(kernel: KernelSpec, gs: float, gz: float, wz: float):
    if not gz > 0:
        raise PropagatorError("memory kernels require gamma_z > 0")
    amp = 1.0 / gz  # k(0) = 1/us expressed in units of gamma_z
    if kernel.kind == "Exp":
        x = 2 + kernel.b0 / gz
        y = complex(gs / (2 * gz), -wz / gz)
        if not all(map(cmath.isfinite, (x, y, amp))):
            raise PropagatorError("non-finite kernel substitution")
        # Z = z + y:  Z^2 + x Z + 2 amp, numerator Z + x
        roots = _quadratic_roots(x, 2 * amp)
        numerator = (x, 1.0)
    else:
        y = complex(gs / (2 * gz) + 2, -wz / gz)
        w = amp
        x = kernel.a0 / gz**2
        u = kernel.b0 / gz**2
        v = kernel.b1 / gz
        if not all(map(cmath.isfinite, (x, y, u, v, w))):
            raise PropagatorError("non-finite kernel substitution")
        # Z = z + y:  (Z - 2) p1(Z) + 2 w Z + 2 x with p1 = Z^2 + v Z + u
        roots = _cubic_roots(v - 2, u - 2 * v + 2 * w, 2 * (x - u))
        numerator = (u, v, 1.0)
    poles = _cluster(roots)
    return _pole_terms(numerator, poles, gz, y)


# -- propagation ------------------------------------------------------------

def initial_coordinates(basis: DampingBasis, rho0) -> np.ndarray:
    """``mu_i(0) = Tr[L_i rho(0)]``."""
    m = rho0.matrix if isinstance(rho0, DensityMatrix) else np.asarray(rho0)
    return np.einsum("iab,ba->i", basis.L, m)


def propagate_matrix(prop: Propagator, basis: DampingBasis, rho0, t) -> np.ndarray:
    """Unvalidated density matrices at times ``t`` (shape ``t.shape + (2, 2)``)."""
    mu0 = initial_coordinates(basis, rho0)
    xi = prop.xi_all(t)
    m = np.einsum("...i,i,iab->...ab", xi, mu0, basis.R)
    # xi_1 == 1 fixes the trace; set the diagonal so floating point honours it exactly
    m[..., 0, 0] = m[..., 0, 0].real
    m[..., 1, 1] = 1.0 - m[..., 0, 0].real
    return m


def propagate(prop: Propagator, theta: ModelParams, rho0, t: float) -> DensityMatrix:
    if t < 0:
        raise ValueError("t must be >= 0")
    if isinstance(rho0, BlochVector):
        rho0 = bloch_to_density(rho0)
    m = propagate_matrix(prop, damping_basis(theta), rho0, float(t))
    return DensityMatrix(m)


def bloch_trajectory(prop: Propagator, theta: ModelParams, v0, times) -> np.ndarray:
    """Bloch vectors (n, 3) along ``times`` starting from Bloch vector ``v0``."""
    v0 = np.asarray(v0.as_array() if isinstance(v0, BlochVector) else v0, dtype=float)
    gr = theta.Gamma_r
    xi = prop.xi_all(np.asarray(times, dtype=float))
    coh = xi[:, 1] * complex(v0[0], -v0[1])
    mu4 = -gr * (1 + v0[2]) / 2 + (1 - v0[2]) / 2
    vz = (1 - gr) / (1 + gr) - 2 * xi[:, 3].real * mu4 / (1 + gr)
    return np.column_stack([coh.real, -coh.imag, vz])


def trajectory(theta: ModelParams, v0, times, prop: Propagator | None = None) -> np.ndarray:
    return bloch_trajectory(prop or build_propagator(theta), theta, v0, times)


def write_trajectory_csv(path, times, bloch) -> None:
    """CSV with columns ``t, vx, vy, vz, purity``."""
    bloch = np.asarray(bloch)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "vx", "vy", "vz", "purity"])
        for t, v in zip(times, bloch):
            p = (1 + float(v @ v)) / 2
            w.writerow([fmt(t)] + [fmt(c) for c in v] + [fmt(p)])


# -- reference integrator -----------------------------------------------------

def _kernel_realization(k: KernelSpec):
    """State-space triple with ``k(t) = c . expm(A t) b``."""
    if k.kind == "Exp":
        return np.array([[-k.b0]]), np.array([1.0]), np.array([1.0])
    A = np.array([[0.0, 1.0], [-k.b0, -k.b1]])
    return A, np.array([0.0, 1.0]), np.array([k.a0, 1.0])


def _step_matrix(ell0, ell1, kernel: KernelSpec, ell, h: float) -> np.ndarray:
    """One-step linear map of the RK4 / trapezoidal-memory scheme.

    State is ``(r, T)`` with ``r`` the 4 Pauli coordinates and ``T`` the
    trapezoidal memory sum held in the kernel's state-space coordinates, so the
    convolution is updated recursively without revisiting the history.
    """
    if kernel.kind == "Delta":
        gen = ell0 + ell1
        n = 4

        def rhs(r, _mem):
            return gen @ r

        def mem_at(T, r0, r, tau):
            return None
    else:
        A, b, c = _kernel_realization(kernel)
        m = A.shape[0]
        n = 4 + 4 * m
        G = np.kron(A, np.eye(4)) + np.kron(np.eye(m), ell)
        B = np.kron(b.reshape(m, 1), np.eye(4))
        C = np.kron(c.reshape(1, m), np.eye(4))
        E_half = expm(G * h / 2)
        E_full = expm(G * h)

        def mem_at(T, r0, r, tau):
            E = E_half if tau < h else E_full
            return E @ T + (tau / 2) * (E @ (B @ r0) + B @ r)

        def rhs(r, mem):
            return ell0 @ r + ell1 @ (C @ mem)

    S = np.zeros((n, n))
    for col in range(n):
        Y = np.zeros(n)
        Y[col] = 1.0
        r0, T0 = Y[:4], Y[4:]
        k1 = rhs(r0, T0)
        r2 = r0 + h / 2 * k1
        k2 = rhs(r2, mem_at(T0, r0, r2, h / 2))
        r3 = r0 + h / 2 * k2
        k3 = rhs(r3, mem_at(T0, r0, r3, h / 2))
        r4 = r0 + h * k3
        k4 = rhs(r4, mem_at(T0, r0, r4, h))
        r1 = r0 + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        S[:4, col] = r1
        if n > 4:
            S[4:, col] = mem_at(T0, r0, r1, h)
    return S


def _integrate_pauli(theta: ModelParams, r0: np.ndarray, n_steps: int, h: float, stride: int = 1):
    L0, L1 = lindbladian_parts(theta)
    ell0 = pauli_transfer_matrix(L0).real
    ell1 = pauli_transfer_matrix(L1).real
    S = _step_matrix(ell0, ell1, theta.kernel, ell0 + ell1, h)
    Y = np.zeros(S.shape[0])
    Y[:4] = r0
    out = np.empty((n_steps // stride + 1, 4))
    out[0] = r0
    for i in range(1, n_steps + 1):
        Y = S @ Y
        if i % stride == 0:
            out[i // stride] = Y[:4]
    return out


def _check_grid(times) -> float:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("time grid needs at least two points")
    if times[0] != 0:
        raise ValueError("time grid must start at t = 0")
    steps = np.diff(times)
    h = (times[-1] - times[0]) / (times.size - 1)
    if not np.allclose(steps, h, rtol=1e-9, atol=1e-12):
        raise ValueError("reference_integrate requires a uniform time grid")
    if not 0 < h <= 0.01 + 1e-12:
        raise ValueError(f"grid step {h} must be in (0, 0.01] us")
    return h


def reference_bloch(
    theta: ModelParams, v0, times, richardson: bool = True, max_step: float = DEFAULT_STEP
) -> np.ndarray:
    """Bloch vectors (n, 3) from direct time-domain integration on a uniform grid.

    Each grid interval is split into equal substeps no longer than
    ``max_step``.  With ``richardson`` the substep is halved once and the two
    O(h^2) results are extrapolated.
    """
    h_grid = _check_grid(times)
    sub = max(1, math.ceil(h_grid / max_step - 1e-9))
    h = h_grid / sub
    v0 = np.asarray(v0.as_array() if isinstance(v0, BlochVector) else v0, dtype=float)
    r0 = np.concatenate([[1.0], v0]) / np.sqrt(2)
    n = len(times) - 1
    coarse = _integrate_pauli(theta, r0, n * sub, h, stride=sub)
    if richardson:
        fine = _integrate_pauli(theta, r0, 2 * n * sub, h / 2, stride=2 * sub)
        coarse = (4 * fine - coarse) / 3
    return coarse[:, 1:] * np.sqrt(2)


def reference_integrate(theta: ModelParams, rho0, times, richardson: bool = True) -> list[DensityMatrix]:
    if isinstance(rho0, DensityMatrix):
        v0 = density_to_bloch(rho0)
    else:
        v0 = rho0
    bloch = reference_bloch(theta, v0, times, richardson=richardson)
    out = []
    for v in bloch:
        m = 0.5 * np.array([[1 + v[2], v[0] - 1j * v[1]], [v[0] + 1j * v[1], 1 - v[2]]])
        out.append(DensityMatrix(m))
    return out


# -- complete positivity ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChoiReport:
    time: float
    eigenvalues: np.ndarray
    cp_ok: bool
    margin: float


def choi_matrix(prop: Propagator, theta: ModelParams, t: float) -> np.ndarray:
    """``C = sum_k xi_k(t) L_k^T (x) R_k``."""
    basis = damping_basis(theta)
    xi = prop.xi_all(float(t))
    return sum(xi[k] * np.kron(basis.L[k].T, basis.R[k]) for k in range(4))


def choi_eigenvalues(xi2: complex, xi4: complex, Gamma_r: float) -> np.ndarray:
    gr = Gamma_r
    xi4 = complex(xi4).real
    lam1 = (1 - xi4) / (1 + gr)
    lam2 = gr * (1 - xi4) / (1 + gr)
    a = (1 + gr * xi4) / (1 + gr)
    d = (gr + xi4) / (1 + gr)
    root = math.sqrt(((a - d) / 2) ** 2 + abs(xi2) ** 2)
    mean = (1 + xi4) / 2
    return np.array([lam1, lam2, mean + root, mean - root], dtype=complex)


def choi_check(prop: Propagator, theta: ModelParams, t: float) -> ChoiReport:
    if t < 0:
        raise ValueError("t must be >= 0")
    xi = prop.xi_all(float(t))
    ev = choi_eigenvalues(xi[1], xi[3], theta.Gamma_r)
    margin = float(ev.real.min())
    return ChoiReport(float(t), ev, margin >= -CP_TOL, margin)


def cp_violations(theta: ModelParams, times: Sequence[float], prop: Propagator | None = None):
    """Times at which the Choi matrix has a negative eigenvalue."""
    prop = prop or build_propagator(theta)
    return [float(t) for t in times if not choi_check(prop, theta, float(t)).cp_ok]
