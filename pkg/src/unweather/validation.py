"""Error taxonomy and input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class UnweatherError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(UnweatherError, ValueError):
    """Shapes of the operands do not satisfy the operation's contract."""


class ConfigurationError(UnweatherError, ValueError):
    """A configuration value is illegal (bad kernel size, K out of range, ...)."""


class ContractError(UnweatherError, RuntimeError):
    """An internal precondition was violated (non-scalar loss, bad index, ...)."""


class ValidationError(UnweatherError, ValueError):
    """User-supplied data failed validation (descriptor, image range, ...)."""


class NumericsError(UnweatherError, ArithmeticError):
    """Non-finite values were encountered where finite values are required."""


class TrainingAborted(UnweatherError, RuntimeError):
    """Training stopped early; carries the failing step number."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step


def check_same_shape(a_shape, b_shape, op: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise DimensionError(f"{op}: shapes {tuple(a_shape)} and {tuple(b_shape)} disagree")


def as_image(arr, name: str = "image") -> np.ndarray:
    """Validate and return a float H x W x 3 image with values in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{name}: expected H x W x 3 array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"{name}: expected float values in [0, 1], got dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name}: contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValidationError(
            f"{name}: values outside [0, 1] (min {arr.min():.4g}, max {arr.max():.4g})"
        )
    return arr


def as_image_stack(arrs, name: str = "X") -> np.ndarray:
    """Validate a batch of images: (n, H, W, 3) float in [0, 1]."""
    arr = np.asarray(arrs)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"{name}: expected (n, H, W, 3) image stack, got shape {arr.shape}")
    for i in range(arr.shape[0]):
        as_image(arr[i], name=f"{name}[{i}]")
    return arr


def check_probability_vector(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError(f"{name}: expected a nonempty 1-D vector")
    if np.any(v < 0) or not np.isclose(v.sum(), 1.0, atol=1e-6):
        raise ValidationError(f"{name}: entries must be nonnegative and sum to 1, got {v}")
    return v


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise ConfigurationError(f"{name}: expected a positive integer, got {value!r}")
    return int(value)


def check_unit_interval(value, name: str) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or not np.isfinite(value):
        raise ValidationError(f"{name}: expected a value in [0, 1], got {value!r}")
    return value
