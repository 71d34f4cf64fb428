"""Shared output helpers: every number written to disk carries 10 significant digits."""

import json
import math

import numpy as np

SIG_DIGITS = 10


def fmt(x) -> str:
    """Format a scalar with 10 significant digits; integers and bools pass through."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{SIG_DIGITS}g}"


def round_sig(obj):
    """Recursively round floats in a JSON-able structure to 10 significant digits."""
    if isinstance(obj, dict):
        return {k: round_sig(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_sig(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return round_sig(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return str(x)
        return float(f"{x:.{SIG_DIGITS}g}")
    return obj


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(round_sig(obj), fh, indent=2)
        fh.write("\n")
