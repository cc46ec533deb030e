"""Model parameters, memory kernels, the Lindbladian in the Pauli basis and its damping basis.

Units are fixed: time in microseconds, rates in 1/us, ``omega_z`` in rad/us.
The kernel amplitude is fixed to ``k(0) = 1`` (in 1/us), so the Laplace
transforms carry unit leading coefficients.
"""
from __future__ import annotations

import cmath
from dataclasses import dataclass, field

import numpy as np

from .qstate import SIGMA_I, SIGMA_X, SIGMA_Y, SIGMA_Z

# Normalised Pauli operator basis {I, X, Y, Z} / sqrt(2).
PAULI_BASIS = tuple(p / np.sqrt(2) for p in (SIGMA_I, SIGMA_X, SIGMA_Y, SIGMA_Z))

SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|: relaxation to |0>
SIGMA_PLUS = np.array([[0, 0], [1, 0]], dtype=complex)  # |1><0|: thermal excitation

KERNEL_KINDS = ("Delta", "Exp", "Rational2")
MODEL_KERNELS = {"M0": "Delta", "M1": "Exp", "M2": "Rational2"}
KERNEL_MODELS = {v: k for k, v in MODEL_KERNELS.items()}
N_PARAMS = {"M0": 4, "M1": 5, "M2": 7}


class ParameterError(ValueError):
    """Raised for parameter sets violating positivity, KMS or kernel constraints."""


class KernelPoleError(ZeroDivisionError):
    """Raised when a kernel transform is evaluated at one of its poles."""


@dataclass(frozen=True)
class KernelSpec:
    """Memory kernel with ``k(0) = 1``.

    ``Delta`` is the Markovian impulse, ``Exp`` has Laplace transform
    ``1/(s + b0)`` and ``Rational2`` has ``(s + a0)/(s^2 + b1 s + b0)``.
    """

    kind: str = "Delta"
    b0: float | None = None
    a0: float | None = None
    b1: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ParameterError(f"unknown kernel kind {self.kind!r}")
        needed = {"Delta": (), "Exp": ("b0",), "Rational2": ("a0", "b0", "b1")}[self.kind]
        for name in ("a0", "b0", "b1"):
            value = getattr(self, name)
            if name in needed:
                if value is None or not np.isfinite(value):
                    raise ParameterError(f"{self.kind} kernel needs finite {name}")
                object.__setattr__(self, name, float(value))
            elif value is not None:
                raise ParameterError(f"{self.kind} kernel takes no {name}")
        if self.kind == "Exp" and self.b0 < 0:
            raise ParameterError("Exp kernel requires b0 >= 0")
        if self.kind == "Rational2" and not (self.b0 > 0 and self.b1 > 0):
            raise ParameterError("Rational2 kernel requires b0 > 0 and b1 > 0")

    @classmethod
    def delta(cls) -> "KernelSpec":
        return cls("Delta")

    @classmethod
    def exp(cls, b0: float) -> "KernelSpec":
        return cls("Exp", b0=b0)

    @classmethod
    def rational2(cls, a0: float, b0: float, b1: float) -> "KernelSpec":
        return cls("Rational2", b0=b0, a0=a0, b1=b1)

    @property
    def discriminant(self) -> float:
        """``B = b1^2 - 4 b0`` of the second-order kernel."""
        if self.kind != "Rational2":
            raise AttributeError("discriminant is defined for Rational2 kernels only")
        return self.b1**2 - 4 * self.b0

    @property
    def mu(self) -> float:
        """Kernel oscillation/decay frequency ``sqrt(|B|)/2`` (the pole offset from ``-b1/2``)."""
        return float(np.sqrt(abs(self.discriminant))) / 2

    @property
    def model_id(self) -> str:
        return KERNEL_MODELS[self.kind]


@dataclass(frozen=True)
class ModelParams:
    omega_z: float
    gamma_z: float
    gamma_plus: float
    gamma_minus: float
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        for name in ("omega_z", "gamma_z", "gamma_plus", "gamma_minus"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ParameterError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if not (self.gamma_z > 0 and self.gamma_plus > 0 and self.gamma_minus > 0):
            raise ParameterError("gamma_z, gamma_plus and gamma_minus must be positive")
        if not self.gamma_plus < self.gamma_minus:
            raise ParameterError("KMS condition violated: gamma_plus/gamma_minus must be < 1")
        if not isinstance(self.kernel, KernelSpec):
            raise ParameterError("kernel must be a KernelSpec")

    @classmethod
    def from_rates(cls, omega_z, gamma_z, Gamma_s, Gamma_r, kernel=None) -> "ModelParams":
        """Build from the sum ``Gamma_s`` and ratio ``Gamma_r`` of the excitation/relaxation rates."""
        gamma_minus = Gamma_s / (1 + Gamma_r)
        return cls(omega_z, gamma_z, Gamma_r * gamma_minus, gamma_minus, kernel or KernelSpec())

    @property
    def Gamma_s(self) -> float:
        return self.gamma_plus + self.gamma_minus

    @property
    def Gamma_r(self) -> float:
        return self.gamma_plus / self.gamma_minus

    @property
    def model_id(self) -> str:
        return self.kernel.model_id

    def to_dict(self) -> dict:
        d = {
            "omega_z_rad_per_us": self.omega_z,
            "gamma_z_per_us": self.gamma_z,
            "gamma_plus_per_us": self.gamma_plus,
            "gamma_minus_per_us": self.gamma_minus,
            "kernel": self.kernel.kind,
        }
        if self.kernel.kind == "Exp":
            d["kernel_b0_per_us"] = self.kernel.b0
        elif self.kernel.kind == "Rational2":
            d["kernel_a0_per_us2"] = self.kernel.a0
            d["kernel_b0_per_us2"] = self.kernel.b0
            d["kernel_b1_per_us"] = self.kernel.b1
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        try:
            kind = d.get("kernel", "Delta")
            if kind == "Delta":
                kernel = KernelSpec.delta()
            elif kind == "Exp":
                kernel = KernelSpec.exp(d["kernel_b0_per_us"])
            elif kind == "Rational2":
                kernel = KernelSpec.rational2(
                    d["kernel_a0_per_us2"], d["kernel_b0_per_us2"], d["kernel_b1_per_us"]
                )
            else:
                raise ParameterError(f"unknown kernel tag {kind!r}")
            return cls(
                d["omega_z_rad_per_us"],
                d["gamma_z_per_us"],
                d["gamma_plus_per_us"],
                d["gamma_minus_per_us"],
                kernel,
            )
        except KeyError as exc:
            raise ParameterError(f"missing parameter key {exc.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class DampingBasis:
    """Eigenvalues and left/right eigenoperators of the Lindbladian, ordered as
    ``{0, -Gs/2 - 2gz + i wz, -Gs/2 - 2gz - i wz, -Gs}``."""

    lambda_: np.ndarray
    lambda0: np.ndarray
    lambda1: np.ndarray
    R: np.ndarray  # (4, 2, 2)
    L: np.ndarray  # (4, 2, 2)


def lindblad_generator_matrix(theta: ModelParams) -> np.ndarray:
    """Real 4x4 matrix ``l_ij = Tr[F_i L(F_j)]`` in the normalised Pauli basis."""
    a = -theta.Gamma_s / 2 - 2 * theta.gamma_z
    w = theta.omega_z
    ell = np.zeros((4, 4))
    ell[1, 1] = ell[2, 2] = a
    ell[1, 2] = w
    ell[2, 1] = -w
    ell[3, 0] = theta.gamma_minus - theta.gamma_plus
    ell[3, 3] = -theta.Gamma_s
    return ell


def lindbladian_parts(theta: ModelParams):
    """Return the superoperators ``(L0, L1)`` acting on 2x2 matrices.

    ``L0`` is the Hamiltonian ``H = -wz/2 sz`` plus generalised amplitude
    damping, ``L1`` is pure dephasing.
    """
    H = -0.5 * theta.omega_z * SIGMA_Z

    def dissipator(V, A):
        VdV = V.conj().T @ V
        return V @ A @ V.conj().T - 0.5 * (VdV @ A + A @ VdV)

    def L0(A):
        return (
            -1j * (H @ A - A @ H)
            + theta.gamma_minus * dissipator(SIGMA_MINUS, A)
            + theta.gamma_plus * dissipator(SIGMA_PLUS, A)
        )

    def L1(A):
        return theta.gamma_z * (SIGMA_Z @ A @ SIGMA_Z - A)

    return L0, L1


def pauli_transfer_matrix(superop) -> np.ndarray:
    """Complex matrix ``Tr[F_i S(F_j)]`` of a superoperator in the normalised Pauli basis."""
    out = np.empty((4, 4), dtype=complex)
    for j, Fj in enumerate(PAULI_BASIS):
        SF = superop(Fj)
        for i, Fi in enumerate(PAULI_BASIS):
            out[i, j] = np.trace(Fi @ SF)
    return out


def damping_basis(theta: ModelParams) -> DampingBasis:
    gr = theta.Gamma_r
    gs = theta.Gamma_s
    gz = theta.gamma_z
    wz = theta.omega_z
    lam0 = np.array([0, -gs / 2 + 1j * wz, -gs / 2 - 1j * wz, -gs], dtype=complex)
    lam1 = np.array([0, -2 * gz, -2 * gz, 0], dtype=complex)
    R = np.array(
        [
            [[1 / (1 + gr), 0], [0, gr / (1 + gr)]],
            [[0, 1], [0, 0]],
            [[0, 0], [1, 0]],
            [[-1 / (1 + gr), 0], [0, 1 / (1 + gr)]],
        ],
        dtype=complex,
    )
    L = np.array(
        [
            [[1, 0], [0, 1]],
            [[0, 0], [1, 0]],
            [[0, 1], [0, 0]],
            [[-gr, 0], [0, 1]],
        ],
        dtype=complex,
    )
    for arr in (lam0, lam1, R, L):
        arr.setflags(write=False)
    lam = lam0 + lam1
    lam.setflags(write=False)
    return DampingBasis(lam, lam0, lam1, R, L)


def kernel_laplace(k: KernelSpec, s: complex) -> complex:
    if k.kind == "Delta":
        return 1.0 + 0j
    if k.kind == "Exp":
        den = s + k.b0
        num = 1.0
    else:
        den = s * s + k.b1 * s + k.b0
        num = s + k.a0
    if den == 0:
        raise KernelPoleError(f"s = {s} is a pole of the {k.kind} kernel")
    return num / den


def kernel_time(k: KernelSpec, t):
    """Time-domain kernel ``k(t)`` for the Exp and Rational2 variants.

    The second-order kernel uses a complex ``mu`` so the over- and
    under-damped branches share one expression.
    """
    t = np.asarray(t, dtype=float)
    if k.kind == "Delta":
        raise ValueError("the Delta kernel has no pointwise time-domain value")
    if k.kind == "Exp":
        return np.exp(-k.b0 * t)
    mu = cmath.sqrt(k.discriminant) / 2
    c = (2 * k.a0 - k.b1) / 2
    if abs(mu) < 1e-12:
        shape = 1 + c * t
    else:
        shape = np.cosh(mu * t) + c * np.sinh(mu * t) / mu
    return (np.exp(-k.b1 * t / 2) * shape).real
