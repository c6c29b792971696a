"""Training losses: CLM, perturbed-view self-distillation, and the ablation controls.

All losses work on log-probabilities from ``model.forward``. Row ``i`` of a
log-probability tensor predicts token ``i + 1``, so with a leading BOS token the
CLM targets are tokens ``1..L-1``. Distillation terms take the teacher as a
detached tensor; passing a tensor that still requires grad is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .model import NOPE, ModelConfig, attention_noise_forward, forward
from .numerics import Tensor, exp, gather_last, no_grad
from .views import IDENTITY, PerturbationSpec, batch_indices

VARIANTS = (
    "standard_clm",
    "ours_reverse_kl",
    "forward_kl",
    "clm_on_perturbed",
    "two_view_clm",
    "dropout_consistency",
    "attention_noise_consistency",
)

# Teacher log-probabilities are clamped here before exponentiation.
TEACHER_LOGP_FLOOR = -1e4


@dataclass
class ObjectiveMode:
    """Which objective to optimise. ``lam`` weights the regulariser (JSON key ``lambda``)."""

    variant: str = "ours_reverse_kl"
    lam: float = 1.0
    noise_sigma: float = 0.5

    def validate(self) -> list[str]:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"objective.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0:
            problems.append(f"objective.lambda must be >= 0, got {self.lam}")
        if self.noise_sigma < 0:
            problems.append(f"objective.noise_sigma must be >= 0, got {self.noise_sigma}")
        return problems

    @property
    def n_forward(self) -> int:
        return 1 if self.variant in ("standard_clm", "clm_on_perturbed") else 2

    def to_dict(self) -> dict:
        return {"variant": self.variant, "lambda": self.lam, "noise_sigma": self.noise_sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveMode":
        return cls(
            variant=d.get("variant", "ours_reverse_kl"),
            lam=float(d.get("lambda", 1.0)),
            noise_sigma=float(d.get("noise_sigma", 0.5)),
        )


@dataclass
class LossBreakdown:
    """Per-step scalars. ``kl`` holds whichever regulariser the variant uses."""

    clm: float
    kl: float
    total: float
    lam: float
    spec: PerturbationSpec = field(default=IDENTITY)
    n_clm_targets: int = 0
    n_kl_targets: int = 0


def _targets(logp: Tensor, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    if logp.shape[:-1] != x.shape:
        raise DimensionError(f"log-probabilities {logp.shape} do not match tokens {x.shape}")
    if x.shape[-1] < 2:
        raise DimensionError("need at least two tokens to form a next-token target")
    tgt = np.zeros_like(x)
    tgt[..., :-1] = x[..., 1:]
    weight = np.ones(x.shape)
    weight[..., -1] = 0.0
    return tgt, weight


def clm_loss(logp: Tensor, x) -> Tensor:
    """Mean next-token negative log-likelihood in nats over targets ``1..L-1``."""
    tgt, weight = _targets(logp, x)
    picked = gather_last(logp, tgt)
    return (picked * weight).sum() * (-1.0 / weight.sum())


def _require_detached(teacher: Tensor) -> None:
    if teacher.requires_grad:
        raise ContractError("teacher log-probabilities must be detached (stop-gradient) before distillation")


def _reverse_kl_rows(student: Tensor, teacher: Tensor) -> Tensor:
    """KL(student || teacher) for every row; gradient flows through the student only."""
    _require_detached(teacher)
    if student.shape != teacher.shape:
        raise DimensionError(f"student {student.shape} and teacher {teacher.shape} differ in shape")
    t = np.maximum(teacher.data, TEACHER_LOGP_FLOOR)
    return (exp(student) * (student - t)).sum(axis=-1)


def _forward_kl_rows(student: Tensor, teacher: Tensor) -> Tensor:
    """KL(teacher || student) for every row; gradient flows through the student only."""
    _require_detached(teacher)
    if student.shape != teacher.shape:
        raise DimensionError(f"student {student.shape} and teacher {teacher.shape} differ in shape")
    t = np.maximum(teacher.data, TEACHER_LOGP_FLOOR)
    p_t = np.exp(t)
    return (student * (-p_t)).sum(axis=-1) + np.sum(p_t * t, axis=-1)


def token_reverse_kl(logp_pert_i: Tensor, logp_std_i: Tensor) -> Tensor:
    """``sum_v p_pert(v) (log p_pert(v) - log p_std(v))`` for one position."""
    return _reverse_kl_rows(logp_pert_i, logp_std_i)


def _suffix_weights(shape: tuple[int, ...], s) -> tuple[np.ndarray, int]:
    """Row weights averaging over targets ``max(s,1)..L-1`` per sequence, then over the batch."""
    L = shape[-1]
    batched = len(shape) == 2
    s_arr = np.atleast_1d(np.asarray(s, dtype=np.int64))
    B = shape[0] if batched else 1
    if s_arr.size == 1 and B > 1:
        s_arr = np.repeat(s_arr, B)
    if s_arr.size != B:
        raise DimensionError(f"{s_arr.size} split points for a batch of {B}")
    if np.any(s_arr < 0) or np.any(s_arr > L - 1):
        raise ContractError(f"split point must satisfy 0 <= s <= L-1 (L={L})")
    w = np.zeros((B, L))
    n_total = 0
    for b, sb in enumerate(s_arr):
        first_row = max(int(sb), 1) - 1
        count = L - max(int(sb), 1)
        w[b, first_row: L - 1] = 1.0 / (count * B)
        n_total += count
    return (w if batched else w[0]), n_total


def distill_loss(logp_pert: Tensor, logp_std: Tensor, s, *, direction: str = "reverse") -> Tensor:
    """Suffix-restricted distillation between a perturbed and a detached standard view.

    Averages the per-token KL over targets ``max(s, 1)..L-1`` of each sequence
    (``s`` may be one split point or one per batch row), then over the batch.
    """
    rows = _reverse_kl_rows(logp_pert, logp_std) if direction == "reverse" else _forward_kl_rows(logp_pert, logp_std)
    w, _ = _suffix_weights(rows.shape, s)
    return (rows * w).sum()


def forward_kl_distill(logp_pert: Tensor, logp_std: Tensor, s) -> Tensor:
    """``distill_loss`` with the KL arguments swapped: KL(p_std || p_pert)."""
    return distill_loss(logp_pert, logp_std, s, direction="forward")


def _as_specs(spec, B: int | None) -> list[PerturbationSpec]:
    if isinstance(spec, PerturbationSpec):
        return [spec] * (B or 1)
    specs = list(spec)
    if B is not None and len(specs) != B:
        raise DimensionError(f"{len(specs)} perturbation specs for a batch of {B}")
    return specs


def _view_indices(specs: list[PerturbationSpec], L: int, batched: bool):
    r = batch_indices(specs, L)
    if r is None:
        return NOPE
    return r if batched else r[0]


def pose_objective(x, params, cfg: ModelConfig, spec) -> Tensor:
    """CLM evaluated on the perturbed view only (single pass)."""
    x = np.asarray(x)
    batched = x.ndim == 2
    specs = _as_specs(spec, x.shape[0] if batched else None)
    r = _view_indices(specs, x.shape[-1], batched)
    return clm_loss(forward(x, r, params, cfg, "train"), x)


def _consistency(x, params, cfg, lam, first, second) -> tuple[Tensor, LossBreakdown]:
    """CLM on ``first`` plus lam * KL(second || sg(first)) over every target."""
    x = np.asarray(x)
    logp1 = first()
    clm = clm_loss(logp1, x)
    if lam == 0:
        with no_grad():
            kl = distill_loss(second(), logp1.detach(), 0)
        total = clm
    else:
        kl = distill_loss(second(), logp1.detach(), 0)
        total = clm + kl * lam
    n_seq = x.shape[0] if x.ndim == 2 else 1
    n_targets = n_seq * (x.shape[-1] - 1)
    return total, LossBreakdown(clm.item(), kl.item(), total.item(), lam, IDENTITY, n_targets, n_targets)


def dropout_consistency_objective(x, params, cfg: ModelConfig, lam: float, rng: np.random.Generator):
    """Two dropout passes under standard indices; the second matches the detached first."""
    if cfg.dropout_p <= 0:
        raise ContractError("dropout consistency needs dropout_p > 0")
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    return _consistency(
        x, params, cfg, lam,
        lambda: forward(x, None, params, cfg, "train", rng=rng),
        lambda: forward(x, None, params, cfg, "train", rng=rng),
    )


def attention_noise_objective(x, params, cfg: ModelConfig, lam: float, sigma: float, rng: np.random.Generator):
    """A clean pass and a pass with noisy attention logits, matched by reverse KL."""
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    return _consistency(
        x, params, cfg, lam,
        lambda: forward(x, None, params, cfg, "train", rng=rng),
        lambda: attention_noise_forward(x, None, params, cfg, sigma, rng),
    )


def total_loss(
    x,
    params,
    cfg: ModelConfig,
    mode: ObjectiveMode,
    spec,
    rng: np.random.Generator | None = None,
    teacher: Tensor | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Evaluate ``mode`` on tokens ``x`` (``[L]`` or ``[B, L]``).

    ``spec`` is one ``PerturbationSpec`` or one per batch row. For the two-view
    variants the standard-view pass is computed once: its log-probabilities feed
    the CLM term with gradient and, detached, serve as the distillation target.
    ``teacher`` overrides that target with fixed log-probabilities; holding it
    constant makes the loss a plain function of the parameters whose gradient
    is exactly what backward computes, which is how it is checked against
    finite differences.
    """
    if mode.lam < 0:
        raise ContractError(f"lambda must be >= 0, got {mode.lam}")
    x = np.asarray(x)
    batched = x.ndim == 2
    L = x.shape[-1]
    specs = _as_specs(spec, x.shape[0] if batched else None)
    n_seq = x.shape[0] if batched else 1
    n_clm = n_seq * (L - 1)
    v = mode.variant

    if v == "standard_clm":
        clm = clm_loss(forward(x, None, params, cfg, "train", rng=rng), x)
        return clm, LossBreakdown(clm.item(), 0.0, clm.item(), mode.lam, specs[0], n_clm, 0)

    if v == "clm_on_perturbed":
        clm = clm_loss(forward(x, _view_indices(specs, L, batched), params, cfg, "train", rng=rng), x)
        return clm, LossBreakdown(clm.item(), 0.0, clm.item(), mode.lam, specs[0], n_clm, 0)

    if v == "dropout_consistency":
        total, bd = dropout_consistency_objective(x, params, cfg, mode.lam, rng)
        bd.spec = specs[0]
        return total, bd

    if v == "attention_noise_consistency":
        total, bd = attention_noise_objective(x, params, cfg, mode.lam, mode.noise_sigma, rng)
        bd.spec = specs[0]
        return total, bd

    if v not in ("ours_reverse_kl", "forward_kl", "two_view_clm"):
        raise ContractError(f"unknown objective variant {v!r}")

    logp_std = forward(x, None, params, cfg, "eval")
    clm = clm_loss(logp_std, x)
    if teacher is None:
        teacher = logp_std.detach()
    elif teacher.shape != logp_std.shape:
        raise DimensionError(f"teacher {teacher.shape} does not match log-probabilities {logp_std.shape}")
    r_pert = _view_indices(specs, L, batched)
    splits = [sp.split_point for sp in specs]

    def regulariser():
        logp_pert = forward(x, r_pert, params, cfg, "train", rng=rng)
        if v == "two_view_clm":
            return clm_loss(logp_pert, x), n_clm
        direction = "reverse" if v == "ours_reverse_kl" else "forward"
        _, n_kl = _suffix_weights(logp_pert.shape[:-1], splits if batched else splits[0])
        return distill_loss(logp_pert, teacher, splits if batched else splits[0], direction=direction), n_kl

    if mode.lam == 0:
        with no_grad():
            reg, n_kl = regulariser()
        total = clm
    else:
        reg, n_kl = regulariser()
        total = clm + reg * mode.lam
    return total, LossBreakdown(clm.item(), reg.item(), total.item(), mode.lam, specs[0], n_clm, n_kl)
