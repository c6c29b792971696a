"""Diagnostics: accuracy against answer depth, attention distances, extrapolation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError
from .model import RopeLM, forward
from .numerics import no_grad
from .rope import RopeFrequencies, ntk_scaled_base, scale_indices_for_extrapolation, standard_indices
from .tasks import NIAHInstance, TaskConfig, niah_instances, score_niah

SCALINGS = ("none", "index_scale", "base_rescale")
MIN_INSTANCES_PER_BIN = 20


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def positional_setup(cfg_base: float, head_dim: int, L: int, train_len: int | None, scaling: str):
    """Index vector and frequencies for evaluating a length-``L`` sequence."""
    if scaling not in SCALINGS:
        raise ContractError(f"unsupported scaling {scaling!r}; expected one of {SCALINGS}")
    r = standard_indices(L)
    freqs = RopeFrequencies(head_dim, cfg_base)
    if scaling == "none" or train_len is None or L <= train_len:
        return r, freqs
    if scaling == "index_scale":
        return scale_indices_for_extrapolation(r, train_len, L), freqs
    return r, RopeFrequencies(head_dim, ntk_scaled_base(cfg_base, head_dim, L / train_len))


def greedy_values(model: RopeLM, instances: Sequence[NIAHInstance], *, train_len: int | None = None,
                  scaling: str = "none", batch_size: int = 25) -> list[list[int]]:
    """Greedy-decode each instance's answer.

    A greedy decode reproduces the gold value iff every gold token is the
    argmax given the gold prefix, so one teacher-forced pass over
    ``prompt + gold`` yields the exact-match outcome. The decoded tokens
    returned agree with true greedy decoding up to the first mismatch, and
    scoring only ever depends on that prefix.
    """
    out: list[list[int]] = [None] * len(instances)
    groups: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault(len(inst.tokens) + len(inst.gold_value), []).append(i)
    cfg = model.config
    for L, members in sorted(groups.items()):
        r, freqs = positional_setup(cfg.rope_base, cfg.head_dim, L, train_len, scaling)
        for start in range(0, len(members), batch_size):
            chunk = members[start: start + batch_size]
            seqs = np.stack([np.concatenate([instances[i].tokens, instances[i].gold_value]) for i in chunk])
            n = len(instances[chunk[0]].gold_value)
            logp = model.log_probs(seqs, np.broadcast_to(r, seqs.shape).copy(), freqs=freqs)
            pred = np.argmax(logp[:, L - n - 1: L - 1, :], axis=-1)
            for row, i in zip(pred, chunk):
                out[i] = [int(t) for t in row]
    return out


def _decode(model, instances, train_len, scaling, batch_size) -> list[list[int]]:
    if isinstance(model, RopeLM):
        return greedy_values(model, instances, train_len=train_len, scaling=scaling, batch_size=batch_size)
    if callable(model):
        return [list(v) for v in model(instances)]
    raise ContractError("model must be a RopeLM or a callable mapping instances to decoded values")


# ---------------------------------------------------------------------------
# Position sensitivity
# ---------------------------------------------------------------------------


@dataclass
class PositionSensitivityReport:
    variant: str
    L: int
    model_id: str
    bin_accuracy: list[float]
    bin_counts: list[int]
    bin_correct: list[int]
    mean_accuracy: float
    positional_std: float
    scaling: str = "none"

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, run_dir: str | Path, metric: str = "position") -> Path:
        """Per-bin CSV plus a JSON summary named ``{metric}_{variant}_{L}``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        stem = run_dir / f"{metric}_{self.variant}_{self.L}"
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["depth_bin", "count", "correct", "accuracy"])
            for b, (n, c, a) in enumerate(zip(self.bin_counts, self.bin_correct, self.bin_accuracy)):
                w.writerow([b, n, c, repr(a)])
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return stem.with_suffix(".csv")


def aggregate_by_bin(correct, bins, depth_bins: int) -> tuple[list[int], list[int]]:
    correct = np.asarray(correct, dtype=np.int64)
    bins = np.asarray(bins, dtype=np.int64)
    counts = np.bincount(bins, minlength=depth_bins)[:depth_bins]
    hits = np.bincount(bins, weights=correct, minlength=depth_bins)[:depth_bins]
    empty = [b for b in range(depth_bins) if counts[b] == 0]
    if empty:
        raise EvaluationError(f"depth bins {empty} have no instances")
    return [int(c) for c in counts], [int(h) for h in hits]


def report_from_outcomes(correct, bins, depth_bins: int, *, variant: str, L: int, model_id: str,
                         scaling: str = "none") -> PositionSensitivityReport:
    counts, hits = aggregate_by_bin(correct, bins, depth_bins)
    acc = [h / n for h, n in zip(hits, counts)]
    return PositionSensitivityReport(
        variant=variant, L=L, model_id=model_id, bin_accuracy=acc, bin_counts=counts, bin_correct=hits,
        mean_accuracy=sum(hits) / sum(counts), positional_std=float(np.std(acc)), scaling=scaling,
    )


def position_sensitivity(model, task: TaskConfig, variant: str, *, L: int | None = None,
                         per_bin: int | None = None, seed: int | None = None, model_id: str = "model",
                         train_len: int | None = None, scaling: str = "none", batch_size: int = 25,
                         instances: Sequence[NIAHInstance] | None = None) -> PositionSensitivityReport:
    """Exact-match NIAH accuracy per depth bin.

    ``model`` is a RopeLM or any callable mapping instances to decoded
    values. Instances are generated from ``(task, variant, seed, L)`` unless
    given.
    """
    per_bin = task.instances_per_bin if per_bin is None else per_bin
    if instances is None:
        if per_bin < MIN_INSTANCES_PER_BIN:
            raise ContractError(f"instances_per_bin must be >= {MIN_INSTANCES_PER_BIN}, got {per_bin}")
        instances = niah_instances(task, variant, seed=seed, L=L, per_bin=per_bin)
    L = task.L if L is None else L
    decoded = _decode(model, instances, train_len, scaling, batch_size)
    correct = [score_niah(d, inst) for d, inst in zip(decoded, instances)]
    return report_from_outcomes(correct, [inst.depth_bin for inst in instances], task.depth_bins,
                                variant=variant, L=L, model_id=model_id, scaling=scaling)


# ---------------------------------------------------------------------------
# Attention distances
# ---------------------------------------------------------------------------


@dataclass
class AttentionDistanceHistogram:
    layer: int
    edges: np.ndarray
    mass: np.ndarray
    threshold: float
    last_k: int
    mode: str = "count"
    # Flat per-entry data behind the histogram, kept for exact tail fractions.
    distances: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def fraction_beyond(self, distance: int) -> float:
        """Share of retained mass with ``|key_index - query_index| > distance``."""
        if self.distances is None or self.distances.size == 0:
            return 0.0
        w = np.ones_like(self.weights) if self.mode == "count" else self.weights
        return float(w[np.abs(self.distances) > distance].sum() / w.sum())

    def to_dict(self) -> dict:
        return {"layer": self.layer, "edges": self.edges.tolist(), "mass": self.mass.tolist(),
                "threshold": self.threshold, "last_k": self.last_k, "mode": self.mode}

    def write(self, run_dir: str | Path, variant: str, L: int) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        stem = run_dir / f"attention_{variant}_{L}"
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "mass"])
            for lo, hi, m in zip(self.edges[:-1], self.edges[1:], self.mass):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(m))])
        summary = self.to_dict()
        summary["fraction_beyond_half"] = self.fraction_beyond(L // 2)
        stem.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return stem.with_suffix(".csv")


def default_last_k(L: int) -> int:
    return max(1, min(256, L // 4))


def attention_distance_histogram(model: RopeLM, seq, layer: int | None = None, threshold: float = 1e-3,
                                 last_k: int | None = None, *, r=None, n_bins: int = 16,
                                 mode: str = "count") -> AttentionDistanceHistogram:
    """Histogram of ``key_index - query_index`` over attention weights above ``threshold``.

    The last ``last_k`` query positions of ``seq`` are used, across all heads
    of ``layer`` (default: the deepest). ``mode="weight"`` sums weights
    instead of counting entries.
    """
    cfg = model.config
    layer = cfg.n_layers - 1 if layer is None else layer
    if not 0 <= layer < cfg.n_layers:
        raise ContractError(f"layer {layer} out of range [0, {cfg.n_layers})")
    if mode not in ("count", "weight"):
        raise ContractError(f"mode must be 'count' or 'weight', got {mode!r}")
    seq = np.asarray(seq, dtype=np.int64)
    L = seq.shape[0]
    last_k = default_last_k(L) if last_k is None else last_k
    if not 1 <= last_k <= L:
        raise ContractError(f"last_k must lie in [1, {L}], got {last_k}")
    idx = standard_indices(L) if r is None else np.asarray(r)

    capture: dict = {}
    with no_grad():
        forward(seq, idx, model.params, cfg, "eval", capture=capture)
    w = capture[layer][:, L - last_k:, :]  # [heads, last_k, L]
    q_idx = idx[L - last_k:]
    dist = idx[None, :] - q_idx[:, None]
    causal = np.arange(L)[None, :] <= np.arange(L - last_k, L)[:, None]
    keep = (w > threshold) & causal[None]
    d = np.broadcast_to(dist, w.shape)[keep]
    wts = w[keep]
    span = max(int(np.abs(dist[causal]).max()), 1)
    edges = np.linspace(-span, 0, n_bins + 1)
    mass, _ = np.histogram(d, bins=edges, weights=None if mode == "count" else wts)
    return AttentionDistanceHistogram(layer, edges, mass.astype(np.float64), threshold, last_k, mode, d, wts)


# ---------------------------------------------------------------------------
# Extrapolation
# ---------------------------------------------------------------------------


@dataclass
class ExtrapolationTable:
    model_id: str
    train_len: int
    scaling: str
    rows: list[dict]

    def accuracy(self, L: int) -> float:
        for row in self.rows:
            if row["L"] == L:
                return row["accuracy"]
        raise KeyError(L)

    def write(self, run_dir: str | Path, variant: str) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        lens = "-".join(str(r["L"]) for r in self.rows)
        path = run_dir / f"extrapolation_{variant}_{lens}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["L", "scaling", "count", "correct", "accuracy", "positional_std"])
            for r in self.rows:
                w.writerow([r["L"], self.scaling, r["count"], r["correct"], repr(r["accuracy"]),
                            repr(r["positional_std"])])
        path.with_suffix(".json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def extrapolation_eval(model, task: TaskConfig, train_len: int, eval_lens: Sequence[int], scaling: str,
                       *, variant: str = "multikey", per_bin: int | None = None, seed: int | None = None,
                       model_id: str = "model", batch_size: int = 25) -> ExtrapolationTable:
    """NIAH accuracy at each evaluation length with the chosen positional scaling."""
    if scaling not in SCALINGS:
        raise ContractError(f"unsupported scaling {scaling!r}; expected one of {SCALINGS}")
    for L in eval_lens:
        if not train_len <= L <= 4 * train_len:
            raise ContractError(f"eval length {L} must lie in [{train_len}, {4 * train_len}]")
    rows = []
    for L in eval_lens:
        rep = position_sensitivity(model, task, variant, L=L, per_bin=per_bin, seed=seed, model_id=model_id,
                                   train_len=train_len, scaling=scaling, batch_size=batch_size)
        rows.append({"L": L, "count": sum(rep.bin_counts), "correct": sum(rep.bin_correct),
                     "accuracy": rep.mean_accuracy, "positional_std": rep.positional_std})
    return ExtrapolationTable(model_id, train_len, scaling, rows)


def oracle_model(instances: Sequence[NIAHInstance]) -> list[list[int]]:
    """A reference 'model' that always answers with the gold value."""
    return [list(inst.gold_value) for inst in instances]


def constant_model(value: Sequence[int]) -> Callable[[Sequence[NIAHInstance]], list[list[int]]]:
    return lambda instances: [list(value) for _ in instances]
