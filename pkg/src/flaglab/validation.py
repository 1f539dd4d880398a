"""Input validation helpers.

Small check_* utilities in the spirit of sklearn's validation module; they
raise ContractError with the offending argument named, so estimator and
CLI errors stay actionable.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def check_array(x, name: str, *, ndim: int | None = None, finite: bool = True,
                dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ContractError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if finite and not np.isfinite(arr).all():
        raise ContractError(f"{name}: contains non-finite values")
    return arr


def check_shape(x: np.ndarray, name: str, shape: tuple[int | None, ...]) -> np.ndarray:
    if len(x.shape) != len(shape) or any(
        s is not None and s != got for s, got in zip(shape, x.shape)
    ):
        raise ContractError(f"{name}: expected shape {shape}, got {x.shape}")
    return x


def check_positive(value, name: str):
    if not np.isscalar(value) or not np.isfinite(value) or value <= 0:
        raise ContractError(f"{name}: must be a positive finite scalar, got {value!r}")
    return value


def check_in_unit_interval(t, name: str = "t"):
    arr = np.asarray(t, dtype=np.float64)
    if not np.isfinite(arr).all() or (arr < 0).any() or (arr > 1).any():
        raise ContractError(f"{name}: must lie in [0, 1], got values outside")
    return t


def same_shape(a, b, name_a: str, name_b: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(
            f"{name_a} and {name_b} must have identical shapes, "
            f"got {tuple(a.shape)} vs {tuple(b.shape)}"
        )
