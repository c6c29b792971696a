"""Rotary position embeddings driven by an explicit per-token index vector.

An index vector is a 1-d (or batched 2-d) ``int64`` array assigning a RoPE
index to every token. Rotation uses the half-split layout: feature ``j`` is
paired with feature ``j + head_dim // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import DTYPE, Tensor, as_tensor

DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class RopeFrequencies:
    """Per-pair inverse frequencies ``base ** (-2j / head_dim)``."""

    head_dim: int
    base: float = DEFAULT_BASE

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise DimensionError(f"head_dim must be even and positive, got {self.head_dim}")
        if not self.base > 1.0:
            raise ContractError(f"RoPE base must exceed 1, got {self.base}")

    @property
    def inv_freq(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2, dtype=DTYPE)
        return self.base ** (-2.0 * j / self.head_dim)

    def to_dict(self) -> dict:
        return {"head_dim": self.head_dim, "base": self.base}


def standard_indices(L: int) -> np.ndarray:
    """The unperturbed assignment ``r_i = i``."""
    if L < 1:
        raise DimensionError(f"sequence length must be >= 1, got {L}")
    return np.arange(L, dtype=np.int64)


def check_indices(r, L: int | None = None) -> np.ndarray:
    r = np.asarray(r)
    if r.ndim not in (1, 2):
        raise DimensionError(f"index vector must be 1-d or batched 2-d, got shape {r.shape}")
    if not np.issubdtype(r.dtype, np.integer):
        raise ContractError("RoPE indices must be integers")
    if L is not None and r.shape[-1] != L:
        raise DimensionError(f"index vector length {r.shape[-1]} != sequence length {L}")
    if r.size and r.min() < 0:
        raise ContractError("RoPE indices must be non-negative")
    return r.astype(np.int64, copy=False)


def rope_tables(r: np.ndarray, freqs: RopeFrequencies) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``r.shape + (head_dim // 2,)``."""
    angles = np.asarray(r, dtype=DTYPE)[..., None] * freqs.inv_freq
    return np.cos(angles), np.sin(angles)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate the last axis of ``x`` pairwise by the angles behind ``cos``/``sin``.

    ``cos`` and ``sin`` hold ``head_dim // 2`` columns and must broadcast
    against ``x[..., :head_dim // 2]``.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rotary needs an even feature size, got {d}")
    h = d // 2
    if cos.shape[-1] != h:
        raise DimensionError(f"rotary tables have {cos.shape[-1]} columns, expected {h}")
    x1, x2 = x.data[..., :h], x.data[..., h:]
    try:
        out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    except ValueError:
        out = None
    if out is None or out.shape != x.shape:
        raise DimensionError(f"rotary tables {cos.shape} do not fit tensor {x.shape}")

    def _bw(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return Tensor._from_op(out, (x,), _bw, "rotary")


def rotate(v, index: int, freqs: RopeFrequencies) -> Tensor:
    """Rotate a single head vector (or a stack of them) to RoPE index ``index``."""
    v = as_tensor(v)
    if v.shape[-1] % 2:
        raise DimensionError(f"odd head_dim {v.shape[-1]}")
    if v.shape[-1] != freqs.head_dim:
        raise DimensionError(f"vector size {v.shape[-1]} != head_dim {freqs.head_dim}")
    if index < 0:
        raise ContractError(f"RoPE index must be non-negative, got {index}")
    cos, sin = rope_tables(np.int64(index), freqs)
    return apply_rotary(v, cos, sin)


def rescale_base(freqs: RopeFrequencies, new_base: float) -> RopeFrequencies:
    """Same head size, frequencies recomputed from ``new_base`` (ABF-style)."""
    if not new_base > 0:
        raise ContractError(f"RoPE base must be positive, got {new_base}")
    return RopeFrequencies(head_dim=freqs.head_dim, base=float(new_base))


def ntk_scaled_base(base: float, head_dim: int, factor: float) -> float:
    """Base that stretches the lowest frequency's period by ``factor``."""
    if factor < 1:
        raise ContractError(f"scaling factor must be >= 1, got {factor}")
    return float(base * factor ** (head_dim / (head_dim - 2)))


def scale_indices_for_extrapolation(r, train_len: int, eval_len: int) -> np.ndarray:
    """Linearly compress indices by ``train_len / eval_len``, rounding halves up."""
    if train_len < 1 or eval_len < train_len:
        raise ContractError(f"need eval_len >= train_len >= 1, got train={train_len}, eval={eval_len}")
    r = check_indices(r)
    if eval_len == train_len:
        return r.copy()
    return np.floor(r * (train_len / eval_len) + 0.5).astype(np.int64)
