"""Input validation helpers shared by the estimators and pure functions."""

import numbers

import numpy as np


class DegenerateTriggerError(ValueError):
    """Raised when a trigger has zero discrepancy objective (log of zero)."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loop produces a non-finite loss."""

    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


def check_image(x, name="x", channels=None):
    """Return ``x`` as a float64 H×W×C array with values in [0, 255]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"{name} must be H×W×C, got shape {x.shape}")
    if channels is not None and x.shape[2] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {x.shape[2]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError(f"{name} values must lie in [0, 255]")
    return x


def check_pattern(delta, name="delta", bound=255.0):
    """Return a trigger pattern as float64 H×W×C, checking |values| <= bound."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim == 2:
        delta = delta[:, :, None]
    if delta.ndim != 3:
        raise ValueError(f"{name} must be H×W×C, got shape {delta.shape}")
    if not np.all(np.isfinite(delta)):
        raise ValueError(f"{name} contains non-finite values")
    if delta.size and np.abs(delta).max() > bound:
        raise ValueError(f"{name} values must lie in [-{bound}, {bound}]")
    return delta


def check_mask(mask, shape=None, name="mask"):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.ndim != 2:
        raise ValueError(f"{name} must be H×W, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"{name} shape {mask.shape} does not match {tuple(shape)}")
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return mask


def check_same_shape(a, b, names=("x", "y")):
    if np.shape(a) != np.shape(b):
        raise ValueError(
            f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}"
        )


def check_half_width(v):
    if not isinstance(v, numbers.Integral) or isinstance(v, bool) or v < 1:
        raise ValueError(f"kernel half-width must be an integer >= 1, got {v!r}")
    return int(v)


def check_fraction(value, name, low=0.0, high=1.0, low_inclusive=False, high_inclusive=True):
    """Check ``value`` lies in an interval; returns it as float."""
    value = float(value)
    ok_low = value >= low if low_inclusive else value > low
    ok_high = value <= high if high_inclusive else value < high
    if not (ok_low and ok_high and np.isfinite(value)):
        lb = "[" if low_inclusive else "("
        hb = "]" if high_inclusive else ")"
        raise ValueError(f"{name} must lie in {lb}{low}, {high}{hb}, got {value}")
    return value
