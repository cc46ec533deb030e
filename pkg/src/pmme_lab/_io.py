"""JSON helpers for command output: 12 significant digits, stable layout."""
from __future__ import annotations

import json
import math

import numpy as np

SIG_DIGITS = 12


def normalize(obj, digits: int = SIG_DIGITS):
    """Recursively convert numpy types and round floats to ``digits`` significant digits."""
    if isinstance(obj, dict):
        return {str(k): normalize(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [normalize(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return normalize(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return str(x)
        return float(f"{x:.{digits}g}")
    if isinstance(obj, complex):
        return [normalize(obj.real, digits), normalize(obj.imag, digits)]
    return obj


def dumps(obj) -> str:
    return json.dumps(normalize(obj), indent=1) + "\n"


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def fmt(x) -> str:
    """CSV number format: 12 significant digits, no negative zero."""
    return f"{float(x) + 0.0:.{SIG_DIGITS}g}"
