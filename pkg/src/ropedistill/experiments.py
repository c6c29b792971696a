"""Desk-scale flagship experiment: three training runs and their evaluations.

The three runs share the model, corpus and seeds:

* ``standard``: plain next-token training for ``steps`` steps;
* ``matched``: plain training for ``round(overhead * steps)`` steps, matching
  the wall-clock of the two-view objective;
* ``ours``: reverse-KL self-distillation with skip views, lambda 1, gap up to L.

Every run trains once into ``{out_dir}/{name}`` and is reused afterwards when
its stored configuration hash matches. Evaluations are cheap compared with
training and are recomputed on every call.

Run from the shell with ``python -m ropedistill.experiments --out runs/flagship``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import attention_distance_histogram, extrapolation_eval, position_sensitivity
from .model import RopeLM
from .numerics import load_arrays
from .tasks import gen_clm_sequence
from .trainer import compute_matched_steps, load_checkpoint, train

log = logging.getLogger(__name__)

RUNS = ("standard", "matched", "ours")


def desk_run_config(steps: int = 1000) -> RunConfig:
    """Shared settings for all flagship runs (the plain next-token variant).

    These are the package defaults: L 256, batch 16, lr 3e-4 with 5% warmup.
    """
    run = RunConfig(run_id="standard")
    run.train = replace(run.train, steps=steps, batch_size=16)
    run.objective = replace(run.objective, variant="standard_clm", lam=1.0)
    return run


def flagship_configs(steps: int = 1000, overhead: float = 1.6, base: RunConfig | None = None) -> dict[str, RunConfig]:
    base = desk_run_config(steps) if base is None else base
    standard = replace(base, run_id="standard", train=replace(base.train, steps=steps),
                       objective=replace(base.objective, variant="standard_clm"))
    matched = replace(standard, run_id="matched",
                      train=replace(base.train, steps=compute_matched_steps(steps, overhead)))
    ours = replace(standard, run_id="ours", objective=replace(base.objective, variant="ours_reverse_kl", lam=1.0),
                   sampler=replace(base.sampler, kind="skip", Y=base.task.L))
    return {"standard": standard, "matched": matched, "ours": ours}


def _mean_step_ms(run_dir: Path) -> float:
    path = run_dir / "timing.csv"
    if not path.is_file():
        return float("nan")
    with open(path, newline="") as fh:
        ms = [float(r["wall_ms"]) for r in csv.DictReader(fh)]
    return float(np.mean(ms)) if ms else float("nan")


def train_or_load(run: RunConfig, run_dir: Path) -> RopeLM:
    final = run_dir / "final.bin"
    if final.is_file():
        _, meta = load_arrays(final)
        if meta.get("config_hash") == run.hash():
            log.info("reusing %s", final)
            return _model(final)
        log.info("config changed for %s; retraining", run_dir)
    log.info("training %s for %d steps", run.run_id, run.train.steps)

    def progress(step, res):
        if step % 100 == 0:
            log.info("%s step %d clm %.4f kl %.4f", run.run_id, step, res.breakdown.clm, res.breakdown.kl)

    train(run, run_dir, progress=progress)
    return _model(final)


def _model(path: Path) -> RopeLM:
    ck = load_checkpoint(path)
    return RopeLM(ck.run.model, ck.params)


@dataclass
class FlagshipResults:
    """Everything the directional checks need, per run name."""

    position: dict[str, dict] = field(default_factory=dict)
    extrapolation: dict[str, dict[int, float]] = field(default_factory=dict)
    attention_beyond: dict[str, float] = field(default_factory=dict)
    ordinal: dict[str, float] = field(default_factory=dict)
    step_ms: dict[str, float] = field(default_factory=dict)
    train_len: int = 256
    attention_len: int = 1024

    @property
    def step_time_ratio(self) -> float:
        return self.step_ms["ours"] / self.step_ms["standard"]

    def positional_robustness(self) -> bool:
        p = self.position
        lower_std = p["ours"]["positional_std"] < min(p["standard"]["positional_std"], p["matched"]["positional_std"])
        return bool(lower_std and p["ours"]["mean_accuracy"] >= p["matched"]["mean_accuracy"])

    def extrapolation_holds(self) -> bool:
        ex, lens = self.extrapolation, sorted(self.extrapolation["ours"])
        ours_better = all(ex["ours"][L] >= ex["standard"][L] for L in lens)
        in_dist = self.position["standard"]["mean_accuracy"]
        degrades = all(ex["standard"][L] < in_dist for L in lens)
        return bool(ours_better and degrades)

    def attention_reaches_further(self) -> bool:
        return self.attention_beyond["ours"] > self.attention_beyond["standard"]

    def ordinal_preserved(self, margin: float = 0.02) -> bool:
        return self.ordinal["ours"] >= self.ordinal["standard"] - margin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_time_ratio"] = self.step_time_ratio
        d["checks"] = {
            "positional_robustness": self.positional_robustness(),
            "extrapolation": self.extrapolation_holds(),
            "attention_distance": self.attention_reaches_further(),
            "ordinal": self.ordinal_preserved(),
        }
        return d


def run_flagship(out_dir: str | Path, *, steps: int = 1000, overhead: float = 1.6, per_bin: int = 50,
                 eval_lens=(512, 1024), attention_len: int = 1024, base: RunConfig | None = None,
                 names=RUNS) -> FlagshipResults:
    """Train (or reuse) the flagship runs and evaluate them; writes ``summary.json``."""
    out = Path(out_dir)
    runs = flagship_configs(steps, overhead, base)
    res = FlagshipResults()
    for name in names:
        run = replace(runs[name], output_dir=str(out))
        run_dir = run.run_dir()
        model = train_or_load(run, run_dir)
        res.train_len, res.attention_len = run.task.L, attention_len
        res.step_ms[name] = _mean_step_ms(run_dir)
        seed = run.eval.seed

        rep = position_sensitivity(model, run.task, "multikey", per_bin=per_bin, seed=seed, model_id=name)
        rep.write(run_dir, "position")
        res.position[name] = {"mean_accuracy": rep.mean_accuracy, "positional_std": rep.positional_std,
                              "bin_accuracy": list(rep.bin_accuracy)}

        table = extrapolation_eval(model, run.task, run.task.L, list(eval_lens), "index_scale",
                                   variant="multikey", per_bin=per_bin, seed=seed, model_id=name)
        table.write(run_dir, "multikey")
        res.extrapolation[name] = {r["L"]: r["accuracy"] for r in table.rows}

        seq = gen_clm_sequence(replace(run.task, L=attention_len), np.random.default_rng([seed, 8]))
        hist = attention_distance_histogram(model, seq, threshold=1e-3)
        hist.write(run_dir, "corpus", attention_len)
        res.attention_beyond[name] = hist.fraction_beyond(attention_len // 2)

        ordinal = position_sensitivity(model, run.task, "multivalue_ordinal", per_bin=per_bin, seed=seed,
                                       model_id=name)
        ordinal.write(run_dir, "position")
        res.ordinal[name] = ordinal.mean_accuracy
        log.info("%s: multikey %.3f (std %.3f), ordinal %.3f", name, rep.mean_accuracy, rep.positional_std,
                 ordinal.mean_accuracy)

    if set(names) == set(RUNS):
        out.mkdir(parents=True, exist_ok=True)
        summary = res.to_dict()
        summary["overhead_assumed"] = overhead
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    return res


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="python -m ropedistill.experiments", description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/flagship"), help="cache and report directory")
    p.add_argument("--steps", type=int, default=1000, help="steps of the standard and ours runs")
    p.add_argument("--overhead", type=float, default=1.6, help="step multiplier of the compute-matched run")
    p.add_argument("--per-bin", type=int, default=50, help="NIAH instances per depth bin")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_flagship(args.out, steps=args.steps, overhead=args.overhead, per_bin=args.per_bin)
    print(json.dumps(res.to_dict(), indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
