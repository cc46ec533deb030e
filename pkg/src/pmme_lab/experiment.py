"""Tomography datasets: schema, synthetic generation and validated loading."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._io import fmt
from .model import ModelParams
from .qstate import BlochVector
from .solver import bloch_trajectory, build_propagator, choi_check

SCHEMA_VERSION = 1
BASES = ("x", "y", "z")
DEFAULT_SHOTS = 8192
EXACT = 0  # shots sentinel for infinite-shot frequencies
UNIT_TOL = 1e-9
STOCHASTIC_TOL = 1e-12


class DatasetError(ValueError):
    """Schema or consistency violation in a tomography dataset."""


class CPViolationWarning(UserWarning):
    """The generating model is not completely positive at some requested time."""


def default_times(n: int = 25, t_min: float = 0.1, t_max: float = 100.0) -> np.ndarray:
    return round_sig(np.geomspace(t_min, t_max, n))


def round_sig(x, digits: int = 12):
    """Round floats (or arrays) to ``digits`` significant digits."""
    if np.ndim(x):
        return np.array([round_sig(v, digits) for v in np.asarray(x, dtype=float)])
    return float(f"{float(x):.{digits}g}")


@dataclass(frozen=True)
class PreparationSet:
    """Ordered, uniquely labelled pure preparation states."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((str(lbl), v if isinstance(v, BlochVector) else BlochVector.from_array(v))
                        for lbl, v in self.entries)
        object.__setattr__(self, "entries", entries)
        labels = [lbl for lbl, _ in entries]
        if len(set(labels)) != len(labels):
            raise DatasetError(f"duplicate preparation labels in {labels}")
        for lbl, v in entries:
            if abs(v.norm() - 1) > UNIT_TOL:
                raise DatasetError(f"preparation {lbl!r} is not a pure state (|v| = {v.norm():.12g})")

    @property
    def labels(self) -> list[str]:
        return [lbl for lbl, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, label: str) -> BlochVector:
        for lbl, v in self.entries:
            if lbl == label:
                return v
        raise KeyError(label)

    def subset(self, labels: Iterable[str]) -> "PreparationSet":
        return PreparationSet(tuple((lbl, self[lbl]) for lbl in labels))

    def to_list(self) -> list:
        return [{"label": lbl, "bloch": list(v.as_array())} for lbl, v in self.entries]

    @classmethod
    def from_list(cls, items) -> "PreparationSet":
        try:
            return cls(tuple((d["label"], d["bloch"]) for d in items))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed preparation entry: {exc}") from None


_psi4 = np.array([0.50, -0.75, -0.41])
TABLE_I = PreparationSet(
    (
        ("psi0", (math.sqrt(8 / 9), 0.0, -1 / 3)),
        ("psi1", (0.0, 0.0, -1.0)),
        ("psi2", (-math.sqrt(2 / 9), math.sqrt(2 / 3), -1 / 3)),
        ("psi3", (-math.sqrt(2 / 9), -math.sqrt(2 / 3), -1 / 3)),
        # printed to two digits, so renormalised onto the sphere
        ("psi4", tuple(_psi4 / np.linalg.norm(_psi4))),
    )
)


@dataclass(frozen=True)
class TomographyRecord:
    """Counts of outcome 1 for one (prep, t, basis) cell.

    ``shots == 0`` marks an exact record whose frequency is stored in ``p_one``.
    """

    prep_label: str
    t: float
    basis: str
    count_one: int
    shots: int
    p_one: float | None = None

    def __post_init__(self):
        if self.basis not in BASES:
            raise DatasetError(f"unknown basis {self.basis!r}")
        if not (math.isfinite(self.t) and self.t >= 0):
            raise DatasetError(f"invalid time {self.t!r}")
        if self.shots == EXACT:
            if self.p_one is None or not 0 <= self.p_one <= 1:
                raise DatasetError("exact record needs p_one in [0, 1]")
        else:
            if self.shots < 0 or self.count_one < 0:
                raise DatasetError("counts must be nonnegative")
            if self.count_one > self.shots:
                raise DatasetError(
                    f"count_one {self.count_one} > shots {self.shots} at "
                    f"({self.prep_label}, {self.t}, {self.basis})"
                )

    @property
    def frequency(self) -> float:
        return self.p_one if self.shots == EXACT else self.count_one / self.shots

    def to_dict(self) -> dict:
        d = {"prep": self.prep_label, "t": self.t, "basis": self.basis,
             "count_one": self.count_one, "shots": self.shots}
        if self.shots == EXACT:
            d["p_one"] = self.p_one
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TomographyRecord":
        try:
            return cls(str(d["prep"]), float(d["t"]), str(d["basis"]), int(d["count_one"]),
                       int(d["shots"]), None if d.get("p_one") is None else float(d["p_one"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"malformed record {d!r}: {exc}") from None


@dataclass(frozen=True, eq=False)
class ReadoutModel:
    """Column-stochastic response matrix ``M[k, j] = P(measure k | prepared j)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(2, 2)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
            raise DatasetError("readout entries must lie in [0, 1]")
        sums = m.sum(axis=0)
        if np.abs(sums - 1).max() > STOCHASTIC_TOL:
            raise DatasetError(f"readout columns sum to {sums.tolist()}, not 1")

    def __eq__(self, other):
        return isinstance(other, ReadoutModel) and np.array_equal(self.matrix, other.matrix)

    __hash__ = None

    @classmethod
    def identity(cls) -> "ReadoutModel":
        return cls(np.eye(2))

    @classmethod
    def from_error_rates(cls, p1_given0: float, p0_given1: float) -> "ReadoutModel":
        return cls([[1 - p1_given0, p0_given1], [p1_given0, 1 - p0_given1]])

    @classmethod
    def from_calibration(cls, ones_prep0: int, shots0: int, ones_prep1: int, shots1: int) -> "ReadoutModel":
        """Estimate M from counts of outcome 1 after preparing |0> and |1>."""
        return cls.from_error_rates(ones_prep0 / shots0, 1 - ones_prep1 / shots1)

    def apply(self, p_one):
        """Observed probability of outcome 1 given the true one."""
        p_one = np.asarray(p_one, dtype=float)
        return self.matrix[1, 0] * (1 - p_one) + self.matrix[1, 1] * p_one


@dataclass(frozen=True, eq=False)
class TomographyDataset:
    preps: PreparationSet
    records: tuple
    readout: ReadoutModel | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        self._validate()

    def _validate(self):
        labels = set(self.preps.labels)
        cells: dict[tuple, set] = {}
        for r in self.records:
            if r.prep_label not in labels:
                raise DatasetError(f"record references unknown preparation {r.prep_label!r}")
            key = (r.prep_label, r.t)
            seen = cells.setdefault(key, set())
            if r.basis in seen:
                raise DatasetError(f"duplicate record for ({r.prep_label}, {r.t}, {r.basis})")
            seen.add(r.basis)
        missing = [(p, t, b) for (p, t), seen in cells.items() for b in BASES if b not in seen]
        if missing:
            desc = ", ".join(f"({p}, {t:g}, {b})" for p, t, b in missing)
            raise DatasetError(f"incomplete tomography frames: missing {desc}")

    def __eq__(self, other):
        if not isinstance(other, TomographyDataset):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    @property
    def exact(self) -> bool:
        return all(r.shots == EXACT for r in self.records)

    def times(self, prep_label: str) -> np.ndarray:
        return np.array(sorted({r.t for r in self.records if r.prep_label == prep_label}))

    def frames(self, prep_label: str):
        """Sorted list of ``(t, {basis: record})`` for one preparation."""
        if prep_label not in self.preps.labels:
            raise DatasetError(f"unknown preparation {prep_label!r}")
        by_t: dict[float, dict] = {}
        for r in self.records:
            if r.prep_label == prep_label:
                by_t.setdefault(r.t, {})[r.basis] = r
        if not by_t:
            raise DatasetError(f"no records for preparation {prep_label!r}")
        return sorted(by_t.items())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "preparations": self.preps.to_list(),
            "readout": None if self.readout is None else self.readout.matrix.tolist(),
            "metadata": self.metadata,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TomographyDataset":
        if not isinstance(d, dict):
            raise DatasetError("dataset document must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema_version {d.get('schema_version')!r}")
        for key in ("preparations", "records"):
            if not isinstance(d.get(key), list):
                raise DatasetError(f"dataset field {key!r} must be a list")
        preps = PreparationSet.from_list(d["preparations"])
        readout = None if d.get("readout") is None else ReadoutModel(d["readout"])
        records = tuple(TomographyRecord.from_dict(r) for r in d["records"])
        return cls(preps, records, readout, dict(d.get("metadata") or {}))


def simulate_dataset(
    theta: ModelParams,
    preps: PreparationSet = TABLE_I,
    times: Sequence[float] | None = None,
    shots: int = DEFAULT_SHOTS,
    readout: ReadoutModel | None = None,
    seed: int = 0,
    metadata: dict | None = None,
) -> TomographyDataset:
    """Sample counts for every (prep, t, basis) cell from the model ``theta``.

    ``shots = 0`` stores exact frequencies rounded to 12 digits.  Sampling uses
    a Philox stream keyed by ``seed`` and visits cells in a fixed order.
    """
    times = default_times() if times is None else round_sig(np.asarray(times, dtype=float))
    if np.any(times < 0) or not np.all(np.isfinite(times)):
        raise DatasetError("times must be finite and >= 0")
    if shots < 0:
        raise DatasetError("shots must be >= 1 (or 0 for exact mode)")
    readout = readout or ReadoutModel.identity()
    prop = build_propagator(theta)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))

    violations = sorted({float(t) for t in times if not choi_check(prop, theta, float(t)).cp_ok})
    if violations:
        warnings.warn(
            f"model is not completely positive at {len(violations)} requested time(s), first t = {violations[0]:g}",
            CPViolationWarning,
            stacklevel=2,
        )

    records = []
    for label, v0 in preps:
        bloch = bloch_trajectory(prop, theta, v0, times)
        p_true = np.clip((1 - bloch) / 2, 0.0, 1.0)
        p_obs = np.clip(readout.apply(p_true), 0.0, 1.0)
        if shots == EXACT:
            for j, t in enumerate(times):
                for k, b in enumerate(BASES):
                    records.append(TomographyRecord(label, float(t), b, 0, EXACT, round(float(p_obs[j, k]), 12)))
        else:
            counts = rng.binomial(shots, p_obs)
            for j, t in enumerate(times):
                for k, b in enumerate(BASES):
                    records.append(TomographyRecord(label, float(t), b, int(counts[j, k]), shots))

    meta = {
        "generator": "simulate_dataset",
        "seed": int(seed),
        "shots": int(shots),
        "theta": theta.to_dict(),
        "cp_violation_times": violations,
    }
    meta.update(metadata or {})
    return TomographyDataset(preps, tuple(records), readout, meta)


def save_dataset(dataset: TomographyDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset.to_dict(), fh, indent=1)
        fh.write("\n")


def load_dataset(path) -> TomographyDataset:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from None
    return TomographyDataset.from_dict(doc)


def write_probabilities_csv(dataset: TomographyDataset, path) -> None:
    """CSV of per-cell frequencies of outcome 1 (exact probabilities in exact mode)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prep", "t", "basis", "p_one"])
        for r in dataset.records:
            w.writerow([r.prep_label, fmt(r.t), r.basis, fmt(r.frequency)])
