"""Single-qubit states: Bloch vectors, density matrices, trace distance and purity.

Convention: ``rho = (I + v . sigma) / 2`` with ``sigma_z = diag(1, -1)``, so the
ground state ``|0>`` sits at ``vz = +1`` and ``|1>`` at ``vz = -1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BALL_TOL = 1e-9
ALGEBRA_TOL = 1e-12

SIGMA_I = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (SIGMA_X, SIGMA_Y, SIGMA_Z)


class StateError(ValueError):
    """Raised when an input does not describe a physical qubit state."""


@dataclass(frozen=True)
class BlochVector:
    vx: float
    vy: float
    vz: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise StateError(f"non-finite Bloch vector {self.as_array()}")
        if self.norm() > 1 + BALL_TOL:
            raise StateError(f"Bloch vector norm {self.norm():.12g} exceeds 1")

    @classmethod
    def from_array(cls, v) -> "BlochVector":
        vx, vy, vz = (float(c) for c in np.asarray(v, dtype=float).reshape(3))
        return cls(vx, vy, vz)

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.vz], dtype=float)

    def norm(self) -> float:
        return float(np.sqrt(self.vx**2 + self.vy**2 + self.vz**2))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """A 2x2 density matrix; validated on construction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex).reshape(2, 2)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if np.abs(m - m.conj().T).max() > ALGEBRA_TOL:
            raise StateError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1) > ALGEBRA_TOL:
            raise StateError(f"density matrix trace {np.trace(m)} != 1")
        if np.linalg.eigvalsh(m).min() < -ALGEBRA_TOL:
            raise StateError("density matrix has a negative eigenvalue")

    def __eq__(self, other):
        if not isinstance(other, DensityMatrix):
            return NotImplemented
        return bool(np.array_equal(self.matrix, other.matrix))

    def __hash__(self):
        return hash(self.matrix.tobytes())


def bloch_to_density(v: BlochVector) -> DensityMatrix:
    if not isinstance(v, BlochVector):
        v = BlochVector.from_array(v)
    m = 0.5 * (SIGMA_I + v.vx * SIGMA_X + v.vy * SIGMA_Y + v.vz * SIGMA_Z)
    return DensityMatrix(m)


def density_to_bloch(rho) -> BlochVector:
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    return BlochVector.from_array(bloch_components(m))


def bloch_components(m) -> np.ndarray:
    """Bloch components of one or a stack of 2x2 matrices (no validation)."""
    m = np.asarray(m)
    vx = 2 * m[..., 0, 1].real
    vy = -2 * m[..., 0, 1].imag
    vz = (m[..., 0, 0] - m[..., 1, 1]).real
    return np.stack([vx, vy, vz], axis=-1)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, DensityMatrix):
        return x.matrix
    if isinstance(x, BlochVector):
        return bloch_to_density(x).matrix
    return np.asarray(x, dtype=complex)


def trace_distance(a, b) -> float:
    """Half the trace norm of ``a - b``."""
    diff = _as_matrix(a) - _as_matrix(b)
    d = 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())
    return min(max(d, 0.0), 1.0)


def bloch_trace_distance(v1, v2) -> np.ndarray:
    """Vectorised trace distance: half the Euclidean Bloch distance."""
    return 0.5 * np.linalg.norm(np.asarray(v1) - np.asarray(v2), axis=-1)


def purity(rho) -> float:
    m = _as_matrix(rho)
    return float(np.trace(m @ m).real)


def project_to_ball(v) -> np.ndarray:
    """Radially project Bloch vectors with norm above one back onto the sphere."""
    v = np.array(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(n > 1.0, 1.0 / np.where(n > 0, n, 1.0), 1.0)
    return v * scale


# Named pure states used throughout (labels follow the usual Pauli eigenstate names).
NAMED_STATES = {
    "zero": (0.0, 0.0, 1.0),
    "one": (0.0, 0.0, -1.0),
    "plus": (1.0, 0.0, 0.0),
    "minus": (-1.0, 0.0, 0.0),
    "plus_i": (0.0, 1.0, 0.0),
    "minus_i": (0.0, -1.0, 0.0),
}
