"""Error types and small input validation helpers shared across modules."""
from __future__ import annotations

import numpy as np


class RgmShiftError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RgmShiftError, ValueError):
    pass


class ConstraintViolation(RgmShiftError, ValueError):
    pass


class DegenerateGraph(RgmShiftError, ValueError):
    pass


class NumericError(RgmShiftError, FloatingPointError):
    def __init__(self, msg, layer=None):
        super().__init__(msg if layer is None else f"{msg} (layer {layer})")
        self.layer = layer


class SizeCapExceeded(RgmShiftError, ValueError):
    pass


class TrainingFailure(RgmShiftError, RuntimeError):
    pass


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise InvalidArgument(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_nonneg(value, name):
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise InvalidArgument(f"{name} must be finite and >= 0, got {value!r}")
    return value


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise InvalidArgument(f"{name} must be finite and > 0, got {value!r}")
    return value


def check_probability(value, name, open_interval=False):
    value = float(value)
    if open_interval:
        ok = 0.0 < value < 1.0
    else:
        ok = 0.0 <= value <= 1.0
    if not ok:
        raise InvalidArgument(f"{name} out of range: {value!r}")
    return value


def as_matrix(x, name="x", ncols=None, dtype=float):
    """Return a 2-D float array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InvalidArgument(f"{name} must be 2-D, got shape {arr.shape}")
    if ncols is not None and arr.shape[1] != ncols:
        raise InvalidArgument(f"{name} must have {ncols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return arr


def as_vector(x, name="x", dim=None):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise InvalidArgument(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return arr


def check_symmetric(a, name="matrix", tol=1e-8):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgument(f"{name} must be square, got shape {a.shape}")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol:
        raise InvalidArgument(f"{name} is not symmetric (max asymmetry {asym:.3g})")
    return a


def make_rng(seed):
    """numpy Generator from an int seed, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(seed, n):
    """Independent child seed sequences for parallel or repeated work."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)
