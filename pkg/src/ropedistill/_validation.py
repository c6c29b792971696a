"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def check_tokens(X, vocab_size: int, max_len: int | None = None, *, min_len: int = 2) -> np.ndarray:
    """Return ``X`` as a 2-d int64 token array or raise InputError."""
    try:
        arr = np.asarray(X)
    except Exception as exc:  # ragged nested lists
        raise InputError(f"tokens must form a rectangular array: {exc}") from exc
    if arr.dtype == object:
        raise InputError("tokens must form a rectangular array of integers")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError(f"tokens must be 1-d or 2-d, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InputError("no sequences given")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(np.isfinite(arr)) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise InputError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.shape[1] < min_len:
        raise InputError(f"sequences need at least {min_len} tokens, got {arr.shape[1]}")
    if max_len is not None and arr.shape[1] > max_len:
        raise InputError(f"sequence length {arr.shape[1]} exceeds max_len {max_len}")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise InputError(f"token ids must lie in [0, {vocab_size})")
    return arr.astype(np.int64, copy=False)


def check_fraction(name: str, value: float, *, closed_low: bool = True, closed_high: bool = False) -> float:
    value = float(value)
    lo_ok = value >= 0 if closed_low else value > 0
    hi_ok = value <= 1 if closed_high else value < 1
    if not (lo_ok and hi_ok):
        raise InputError(f"{name} must lie in {'[' if closed_low else '('}0, 1{']' if closed_high else ')'}, got {value}")
    return value
