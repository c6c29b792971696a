"""RoPE-index perturbations ("views") and their samplers.

A view keeps the token sequence and causal mask untouched and only changes
the index vector fed to the rotary embedding. ``PerturbationSpec`` records one
sampled transformation; ``spec.indices(L)`` rebuilds its index vector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .rope import standard_indices

KINDS = ("identity", "skip", "cyclic", "dilation", "chunked_perm", "nope")

_PARAMS = {
    "identity": (),
    "skip": ("s", "y"),
    "cyclic": ("u",),
    "dilation": ("alpha",),
    "chunked_perm": ("chunk",),
    "nope": (),
}

ALPHA_RANGE = (0.5, 2.0)


def skip_indices(L: int, s: int, y: int) -> np.ndarray:
    """``i`` before the split point ``s``, ``i + y`` from ``s`` on."""
    if not 0 <= s <= L - 1:
        raise ContractError(f"split point must satisfy 0 <= s <= L-1 (L={L}), got {s}")
    if y < 0:
        raise ContractError(f"skip length must be >= 0, got {y}")
    r = standard_indices(L)
    r[s:] += y
    return r


def cyclic_indices(L: int, u: int) -> np.ndarray:
    """``(i + u) mod L``: a rotation of the whole assignment."""
    if not 0 <= u <= L - 1:
        raise ContractError(f"cyclic shift must satisfy 0 <= u <= L-1 (L={L}), got {u}")
    return (standard_indices(L) + u) % L


def dilation_indices(L: int, alpha: float | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """``round(alpha * i)`` with one factor for the whole sequence.

    When ``alpha`` is None it is drawn uniformly from [0.5, 2] using ``rng``.
    """
    if alpha is None:
        if rng is None:
            raise ContractError("dilation needs either alpha or an rng to draw it")
        alpha = float(rng.uniform(*ALPHA_RANGE))
    lo, hi = ALPHA_RANGE
    if not lo <= alpha <= hi:
        raise ContractError(f"dilation factor must lie in [{lo}, {hi}], got {alpha}")
    return np.rint(alpha * standard_indices(L)).astype(np.int64)


def chunked_perm_indices(L: int, chunk: int, rng: np.random.Generator | None = None, order=None) -> np.ndarray:
    """Permute contiguous index blocks of size ``chunk``; order inside a block is kept."""
    if not 1 <= chunk <= L:
        raise ContractError(f"chunk must satisfy 1 <= chunk <= L (L={L}), got {chunk}")
    blocks = np.array_split(standard_indices(L), np.arange(chunk, L, chunk))
    if order is None:
        if rng is None:
            raise ContractError("chunked permutation needs an rng or an explicit block order")
        order = rng.permutation(len(blocks))
    if sorted(order) != list(range(len(blocks))):
        raise ContractError(f"block order {list(order)} is not a permutation of {len(blocks)} blocks")
    return np.concatenate([blocks[b] for b in order])


@dataclass(frozen=True)
class PerturbationSpec:
    """One sampled view transformation.

    Only the fields belonging to ``kind`` are populated. ``seed`` is the seed of
    the generator the draw came from; ``chunked_perm`` rebuilds its block order
    from it.
    """

    kind: str
    s: int | None = None
    y: int | None = None
    u: int | None = None
    alpha: float | None = None
    chunk: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        wanted = set(_PARAMS[self.kind])
        for name in ("s", "y", "u", "alpha", "chunk"):
            present = getattr(self, name) is not None
            if present != (name in wanted):
                state = "missing" if name in wanted else "not allowed"
                raise ContractError(f"{self.kind} spec: parameter {name!r} {state}")
        if self.kind == "chunked_perm" and self.seed is None:
            raise ContractError("chunked_perm spec needs a seed to rebuild its block order")

    @property
    def split_point(self) -> int:
        """First position whose index may differ from the standard view."""
        return self.s if self.kind == "skip" else 0

    def indices(self, L: int) -> np.ndarray | None:
        """The index vector of this view, or None for NoPE (rotation disabled)."""
        if self.kind == "identity":
            return standard_indices(L)
        if self.kind == "skip":
            return skip_indices(L, self.s, self.y)
        if self.kind == "cyclic":
            return cyclic_indices(L, self.u)
        if self.kind == "dilation":
            return dilation_indices(L, self.alpha)
        if self.kind == "chunked_perm":
            return chunked_perm_indices(L, self.chunk, np.random.default_rng(self.seed))
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        return cls(**{k: d.get(k) for k in ("kind", "s", "y", "u", "alpha", "chunk", "seed")})


IDENTITY = PerturbationSpec("identity")


@dataclass
class SamplerConfig:
    """Distribution over views.

    ``Y`` defaults to the sequence length. ``distribution="fixed"`` puts all
    mass on ``(fixed_s, fixed_y)``, defaulting to ``(L // 2, L // 2)``.
    """

    kind: str = "skip"
    Y: int | None = None
    distribution: str = "uniform"
    per_sample: bool = True
    fixed_s: int | None = None
    fixed_y: int | None = None
    chunk: int | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in KINDS:
            problems.append(f"sampler.kind must be one of {KINDS}, got {self.kind!r}")
        if self.Y is not None and self.Y < 1:
            problems.append(f"sampler.Y must be >= 1, got {self.Y}")
        if self.distribution not in ("uniform", "fixed"):
            problems.append(f"sampler.distribution must be 'uniform' or 'fixed', got {self.distribution!r}")
        if self.chunk is not None and self.chunk < 1:
            problems.append(f"sampler.chunk must be >= 1, got {self.chunk}")
        return problems


def _child(rng: np.random.Generator) -> tuple[int, np.random.Generator]:
    seed = int(rng.integers(0, 2**63 - 1))
    return seed, np.random.default_rng(seed)


def sample_skip(L: int, cfg: SamplerConfig, rng: np.random.Generator) -> PerturbationSpec:
    """Draw ``(s, y)`` with s uniform on {0..L-1} and y uniform on {1..Y}."""
    Y = L if cfg.Y is None else cfg.Y
    if Y < 1:
        raise ContractError(f"Y must be >= 1, got {Y}")
    seed, child = _child(rng)
    if cfg.distribution == "fixed":
        s = L // 2 if cfg.fixed_s is None else cfg.fixed_s
        y = L // 2 if cfg.fixed_y is None else cfg.fixed_y
        return PerturbationSpec("skip", s=int(s), y=int(y), seed=seed)
    s = int(child.integers(0, L))
    y = int(child.integers(1, Y + 1))
    return PerturbationSpec("skip", s=s, y=y, seed=seed)


def sample_view(L: int, cfg: SamplerConfig, rng: np.random.Generator) -> PerturbationSpec:
    """Draw one view of kind ``cfg.kind``."""
    kind = cfg.kind
    if kind == "skip":
        return sample_skip(L, cfg, rng)
    seed, child = _child(rng)
    if kind == "identity":
        return PerturbationSpec("identity", seed=seed)
    if kind == "nope":
        return PerturbationSpec("nope", seed=seed)
    if kind == "cyclic":
        return PerturbationSpec("cyclic", u=int(child.integers(0, L)), seed=seed)
    if kind == "dilation":
        return PerturbationSpec("dilation", alpha=float(child.uniform(*ALPHA_RANGE)), seed=seed)
    if kind == "chunked_perm":
        chunk = cfg.chunk if cfg.chunk is not None else max(1, L // 8)
        return PerturbationSpec("chunked_perm", chunk=int(chunk), seed=seed)
    raise ContractError(f"unknown perturbation kind {kind!r}")


def sample_batch(L: int, batch_size: int, cfg: SamplerConfig, rng: np.random.Generator) -> list[PerturbationSpec]:
    """One spec per sequence, or one shared spec when ``per_sample`` is off."""
    if cfg.per_sample:
        return [sample_view(L, cfg, rng) for _ in range(batch_size)]
    spec = sample_view(L, cfg, rng)
    return [spec] * batch_size


def batch_indices(specs: list[PerturbationSpec], L: int) -> np.ndarray | None:
    """Stack per-sample index vectors into ``[B, L]``; None when the views are NoPE."""
    nope = [sp.kind == "nope" for sp in specs]
    if any(nope):
        if not all(nope):
            raise ContractError("a batch cannot mix NoPE and rotated views")
        return None
    return np.stack([sp.indices(L) for sp in specs])


@dataclass
class ViewSampler:
    """Stateful sampler owning its generator; clone with a new seed for other threads."""

    L: int
    config: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def sample(self) -> PerturbationSpec:
        return sample_view(self.L, self.config, self._rng)

    def sample_batch(self, batch_size: int) -> list[PerturbationSpec]:
        return sample_batch(self.L, batch_size, self.config, self._rng)
