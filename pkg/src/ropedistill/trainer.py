"""Training loop: batching, the two-view objective, AdamW, clipping, checkpoints.

Every step draws its data, its perturbations and its dropout masks from
generators seeded by ``(train.seed, stream, step)``, so a run resumed from a
checkpoint follows exactly the trajectory of an uninterrupted run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import ContractError, NumericError
from .model import init_params, param_shapes
from .numerics import Tensor, backward, global_norm, load_arrays, save_arrays
from .objective import LossBreakdown, total_loss
from .tasks import clm_batch, read_jsonl
from .views import sample_batch

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "clm", "kl", "total", "grad_norm", "lr", "lambda",
                 "kind", "s", "y", "u", "alpha", "chunk", "spec_seed")

_DATA, _VIEWS, _NOISE = 0, 1, 2


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def compute_matched_steps(base_steps: int, overhead: float = 1.6) -> int:
    """Steps for a one-pass baseline to match the wall-clock of ``base_steps`` two-pass steps."""
    if base_steps < 1:
        raise ContractError(f"base_steps must be >= 1, got {base_steps}")
    if overhead < 1:
        raise ContractError(f"overhead must be >= 1, got {overhead}")
    return int(round(base_steps * overhead))


def lr_at(step: int, cfg) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
    warm = cfg.warmup
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(p.grad for p in params.values() if p.grad is not None)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adamw_update(params: dict[str, Tensor], state: AdamState, lr: float, cfg) -> None:
    """Decoupled weight decay on matrices; norm gains are not decayed."""
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if p.data.ndim >= 2 and cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update


@dataclass
class StepResult:
    breakdown: LossBreakdown
    grad_norm: float
    lr: float


def train_step(batch: np.ndarray, params, opt_state: AdamState, run: RunConfig, step: int,
               dump_dir: Path | None = None) -> StepResult:
    """Sample views, evaluate the objective, backpropagate, clip and update."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ContractError(f"batch must be a non-empty [B, L] array, got shape {batch.shape}")
    seed = run.train.seed
    specs = sample_batch(batch.shape[1], batch.shape[0], run.sampler, step_rng(seed, _VIEWS, step))
    for p in params.values():
        p.grad = None
    loss, bd = total_loss(batch, params, run.model, run.objective, specs, rng=step_rng(seed, _NOISE, step))
    if not math.isfinite(bd.total):
        where = _dump_batch(dump_dir, step, batch, specs, bd)
        raise NumericError(f"non-finite loss at step {step} (clm={bd.clm}, kl={bd.kl}); batch dumped to {where}")
    backward(loss)
    norm = clip_gradients(params, run.train.grad_clip)
    lr = lr_at(step, run.train)
    adamw_update(params, opt_state, lr, run.train)
    return StepResult(bd, norm, lr)


def _dump_batch(dump_dir, step, batch, specs, bd) -> str:
    payload = {"step": step, "tokens": batch.tolist(), "specs": [s.to_dict() for s in specs],
               "clm": repr(bd.clm), "kl": repr(bd.kl)}
    if dump_dir is None:
        return "<not written: no output directory>"
    path = Path(dump_dir) / f"nonfinite_step_{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return str(path)


def metrics_row(step: int, res: StepResult) -> dict:
    bd, sp = res.breakdown, res.breakdown.spec
    return {
        "step": step, "clm": repr(bd.clm), "kl": repr(bd.kl), "total": repr(bd.total),
        "grad_norm": repr(res.grad_norm), "lr": repr(res.lr), "lambda": repr(bd.lam),
        "kind": sp.kind, "s": _opt(sp.s), "y": _opt(sp.y), "u": _opt(sp.u),
        "alpha": _opt(sp.alpha), "chunk": _opt(sp.chunk), "spec_seed": _opt(sp.seed),
    }


def _opt(v) -> str:
    return "" if v is None else repr(v)


# ---------------------------------------------------------------------------
# Data sources
# ---------------------------------------------------------------------------


def make_batch_fn(run: RunConfig, data: np.ndarray | None = None) -> Callable[[int], np.ndarray]:
    """Map a step number to its batch.

    ``data`` (an ``[N, L]`` token array) takes precedence; otherwise
    ``train.data`` is ``"synthetic"`` or a JSONL path with a ``tokens`` field.
    """
    B, seed = run.train.batch_size, run.train.seed
    if data is None and run.train.data != "synthetic":
        rows = read_jsonl(run.train.data)
        data = np.array([r["tokens"] for r in rows], dtype=np.int64)
    if data is not None:
        data = np.asarray(data, dtype=np.int64)

        def from_array(step: int) -> np.ndarray:
            idx = step_rng(seed, _DATA, step).integers(0, len(data), size=B)
            return data[idx]

        return from_array

    def synthetic(step: int) -> np.ndarray:
        return clm_batch(run.task, B, step_rng(seed, _DATA, step))

    return synthetic


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    opt_state: AdamState
    step: int
    run: RunConfig
    path: Path | None = None


def save_checkpoint(path: str | Path, params, opt_state: AdamState, step: int, run: RunConfig) -> Path:
    arrays = {name: p.data for name, p in params.items()}
    arrays.update({f"opt.m.{k}": v for k, v in opt_state.m.items()})
    arrays.update({f"opt.v.{k}": v for k, v in opt_state.v.items()})
    meta = {
        "step": step,
        "adam_t": opt_state.t,
        "config_hash": run.hash(),
        "model_config": run.model.to_dict(),
        "run_config": run.to_dict(),
        "rng": {"seed": run.train.seed, "scheme": "default_rng([seed, stream, step])"},
        "code_version": __version__,
    }
    save_arrays(path, arrays, meta)
    return Path(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, manifest = load_arrays(path)
    run = RunConfig.from_dict(manifest["run_config"])
    names = list(param_shapes(run.model))
    params = {n: Tensor(arrays[n], requires_grad=True) for n in names}
    state = AdamState({n: arrays.get(f"opt.m.{n}", np.zeros_like(arrays[n])) for n in names},
                      {n: arrays.get(f"opt.v.{n}", np.zeros_like(arrays[n])) for n in names},
                      int(manifest.get("adam_t", 0)))
    return Checkpoint(params, state, int(manifest["step"]), run, Path(path))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics_path: Path | None
    history: list[dict] = field(default_factory=list)
    mean_step_ms: float = 0.0


def train(run: RunConfig, out_dir: str | Path | None = None, *, data: np.ndarray | None = None,
          resume: str | Path | None = None, stop_at: int | None = None,
          progress: Callable[[int, StepResult], None] | None = None) -> TrainResult:
    """Run ``train.steps`` steps (or up to ``stop_at``), logging one CSV row per step.

    ``out_dir`` receives ``metrics.csv`` (deterministic), ``timing.csv``
    (wall-clock), periodic checkpoints and ``final.bin``. ``resume`` continues
    from a checkpoint written by an earlier call with the same config.
    """
    run.check()
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.run.hash() != run.hash():
            raise ContractError("checkpoint was written under a different run configuration")
        params, opt, start = ck.params, ck.opt_state, ck.step
    else:
        params, opt, start = init_params(run.model), None, 0
        opt = AdamState.zeros(params)
    batch_fn = make_batch_fn(run, data)
    end = run.train.steps if stop_at is None else min(stop_at, run.train.steps)

    metrics_fh = timing_fh = None
    writer = twriter = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        metrics_fh = open(out / "metrics.csv", mode, newline="")
        timing_fh = open(out / "timing.csv", mode, newline="")
        writer = csv.DictWriter(metrics_fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        twriter = csv.writer(timing_fh, lineterminator="\n")
        if resume is None:
            writer.writeheader()
            twriter.writerow(["step", "wall_ms"])

    history = []
    times = []
    try:
        for step in range(start, end):
            t0 = time.perf_counter()
            res = train_step(batch_fn(step), params, opt, run, step, dump_dir=out)
            ms = 1000.0 * (time.perf_counter() - t0)
            times.append(ms)
            row = metrics_row(step, res)
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                twriter.writerow([step, f"{ms:.1f}"])
            if progress is not None:
                progress(step, res)
            every = run.train.checkpoint_every
            if out is not None and every and (step + 1) % every == 0 and step + 1 < end:
                save_checkpoint(out / "checkpoints" / f"step_{step + 1:06d}.bin", params, opt, step + 1, run)
    finally:
        for fh in (metrics_fh, timing_fh):
            if fh is not None:
                fh.close()

    ck = Checkpoint(params, opt, end, run)
    if out is not None:
        ck.path = save_checkpoint(out / "final.bin", params, opt, end, run)
    return TrainResult(ck, out / "metrics.csv" if out else None, history, float(np.mean(times)) if times else 0.0)
