"""Command-line entry point.

Every subcommand reads a JSON run configuration (``--config``, optional; the
defaults apply otherwise) with dotted ``--set`` overrides, and writes into
``{output_dir}/{run_id}``. Failures print one line ``error: <kind>: <detail>``
to stderr: exit 2 for usage errors, 3 for invalid configs and missing files.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, load_run_config
from .errors import ConfigError, InputError, RopeDistillError
from .evaluation import (
    attention_distance_histogram,
    extrapolation_eval,
    position_sensitivity,
)
from .model import RopeLM
from .numerics import Tensor, no_grad
from .model import forward
from .objective import clm_loss
from .tasks import Vocabulary, clm_batch, gen_clm_sequence, niah_instances, write_jsonl
from .trainer import load_checkpoint, train

log = logging.getLogger("ropedistill")

EXIT_USAGE = 2
EXIT_INVALID = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: usage: {message}\n")
        sys.exit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration JSON (defaults when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. objective.lambda=0.5 (repeatable)")
    p.add_argument("--run-id", help="shorthand for --set run_id=...")
    p.add_argument("--output-dir", help="shorthand for --set output_dir=...")


def _add_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint .bin written by train")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ropedistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a JSONL dataset (training corpus or NIAH instances)")
    _add_common(g)
    g.add_argument("--kind", choices=("corpus", "niah"), default="corpus")
    g.add_argument("--n", type=int, default=100, help="corpus sequences (corpus) or instances per depth bin (niah)")
    g.add_argument("--variant", choices=("single", "multikey", "multivalue_ordinal"), help="NIAH variant")
    g.add_argument("--length", type=int, help="sequence length (default task.L)")
    g.add_argument("--out", type=Path, help="output path (default {run_dir}/{kind}.jsonl)")

    t = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    _add_common(t)
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(e)
    _add_checkpoint(e)
    e.add_argument("--metric", choices=("position", "clm"), default="position",
                   help="position: NIAH accuracy per depth bin; clm: held-out next-token loss")
    e.add_argument("--variant", choices=("single", "multikey", "multivalue_ordinal"), help="NIAH variant")
    e.add_argument("--length", type=int, help="evaluation length (default task.L)")
    e.add_argument("--per-bin", type=int, help="instances per depth bin (default eval.instances_per_bin)")

    a = sub.add_parser("analyze-attention", help="histogram of attention distances on one sequence")
    _add_common(a)
    _add_checkpoint(a)
    a.add_argument("--layer", type=int, help="layer index (default: deepest)")
    a.add_argument("--threshold", type=float, help="keep weights above this (default eval.threshold)")
    a.add_argument("--last-k", type=int, help="number of final query positions (default min(256, L/4))")
    a.add_argument("--length", type=int, help="sequence length (default eval.attention_len)")
    a.add_argument("--mode", choices=("count", "weight"), help="count entries or sum weights")

    x = sub.add_parser("extrapolate", help="NIAH accuracy beyond the training length")
    _add_common(x)
    _add_checkpoint(x)
    x.add_argument("--eval-lens", help="comma-separated lengths (default eval.eval_lens)")
    x.add_argument("--scaling", choices=("none", "index_scale", "base_rescale"), help="positional scaling")
    x.add_argument("--variant", choices=("single", "multikey", "multivalue_ordinal"), help="NIAH variant")
    x.add_argument("--per-bin", type=int, help="instances per depth bin")

    s = sub.add_parser("sweep", help="train one run per point of a parameter grid")
    _add_common(s)
    s.add_argument("--grid", action="append", default=[], required=True, metavar="KEY=V1,V2,...",
                   help="axis of the grid (repeatable; the cartesian product is run)")
    s.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes (default 1: sequential)")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.run_id:
        overrides.append(f"run_id={json.dumps(args.run_id)}")
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.config is not None:
        return load_run_config(args.config, overrides)
    return RunConfig.from_dict(apply_overrides(RunConfig().to_dict(), overrides)).check()


def _seeds(run: RunConfig) -> dict:
    return {"model": run.model.seed, "train": run.train.seed, "task": run.task.seed, "eval": run.eval.seed}


def write_run_manifest(run: RunConfig, command: str) -> Path:
    d = run.run_dir()
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {"command": command, "version": __version__, "config_hash": run.hash(), "seeds": _seeds(run)}
    (d / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def _require_file(path: Path) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(str(path))


def _load_model(path: Path) -> tuple[RopeLM, RunConfig]:
    _require_file(path)
    ck = load_checkpoint(path)
    return RopeLM(ck.run.model, ck.params), ck.run


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, run: RunConfig) -> dict:
    out = args.out or run.run_dir() / f"{args.kind}.jsonl"
    if args.n < 1:
        raise InputError(f"--n must be >= 1, got {args.n}")
    if args.kind == "corpus":
        task = run.task if args.length is None else _with_length(run.task, args.length)
        rng = np.random.default_rng(run.task.seed)
        rows = ({"tokens": [int(t) for t in gen_clm_sequence(task, rng)]} for _ in range(args.n))
    else:
        variant = args.variant or run.eval.variant
        rows = (inst.to_dict() for inst in niah_instances(run.task, variant, seed=run.eval.seed,
                                                           L=args.length, per_bin=args.n))
    write_jsonl(out, rows)
    return {"out": str(out), "kind": args.kind}


def _with_length(task, L):
    from dataclasses import replace

    return replace(task, L=L)


def cmd_train(args, run: RunConfig) -> dict:
    d = write_run_manifest(run, "train")
    if args.resume is not None:
        _require_file(args.resume)

    def progress(step, res):
        if step % 50 == 0:
            log.info("step %d clm %.4f kl %.4f", step, res.breakdown.clm, res.breakdown.kl)

    res = train(run, d, resume=args.resume, progress=progress)
    summary = {"run_dir": str(d), "steps": res.checkpoint.step, "checkpoint": str(res.checkpoint.path),
               "final_clm": res.history[-1]["clm"] if res.history else None}
    (d / "timing.json").write_text(json.dumps({"mean_step_ms": res.mean_step_ms}, indent=2) + "\n")
    return summary


def cmd_eval(args, run: RunConfig) -> dict:
    model, trained = _load_model(args.checkpoint)
    d = run.run_dir()
    if args.metric == "clm":
        task = run.task if args.length is None else _with_length(run.task, args.length)
        return {"metric": "clm", **clm_breakdown(model, task, run.eval.seed), "run_dir": str(d)}
    variant = args.variant or run.eval.variant
    per_bin = args.per_bin or run.eval.instances_per_bin
    rep = position_sensitivity(model, run.task, variant, L=args.length, per_bin=per_bin, seed=run.eval.seed,
                               model_id=str(args.checkpoint), train_len=trained.task.L, scaling=run.eval.scaling,
                               batch_size=run.eval.batch_size)
    path = rep.write(d, "position")
    return {"metric": "position", "csv": str(path), "mean_accuracy": rep.mean_accuracy,
            "positional_std": rep.positional_std}


def clm_breakdown(model: RopeLM, task, seed: int, n: int = 32) -> dict:
    """Held-out next-token loss overall and split into copy-span and filler targets."""
    x = clm_batch(task, n, np.random.default_rng([seed, 7]))
    with no_grad():
        logp = forward(x, None, model.params, model.config)
    nll = -np.take_along_axis(logp.data[:, :-1], x[:, 1:, None], axis=-1)[..., 0]
    v = Vocabulary(task.vocab_size)
    in_copy = np.zeros(x.shape, dtype=bool)
    for b in range(n):
        marks = np.flatnonzero(x[b] == v.COPY_MARK)
        for m in marks[1::2]:  # second occurrence of each span
            in_copy[b, m + 1: m + 1 + task.copy_len] = True
    filler = np.isin(x, v.filler) & ~in_copy
    tgt_copy, tgt_fill = in_copy[:, 1:], filler[:, 1:]
    return {
        "clm": float(clm_loss(Tensor(logp.data), x).item()),
        "copy_span_loss": float(nll[tgt_copy].mean()) if tgt_copy.any() else float("nan"),
        "filler_loss": float(nll[tgt_fill].mean()) if tgt_fill.any() else float("nan"),
    }


def cmd_analyze_attention(args, run: RunConfig) -> dict:
    model, trained = _load_model(args.checkpoint)
    L = args.length or run.eval.attention_len
    seq = gen_clm_sequence(_with_length(run.task, L), np.random.default_rng([run.eval.seed, 8]))
    hist = attention_distance_histogram(
        model, seq, layer=args.layer if args.layer is not None else run.eval.layer,
        threshold=run.eval.threshold if args.threshold is None else args.threshold,
        last_k=args.last_k if args.last_k is not None else run.eval.last_k,
        mode=args.mode or run.eval.histogram_mode,
    )
    path = hist.write(run.run_dir(), "corpus", L)
    return {"csv": str(path), "layer": hist.layer, "fraction_beyond_half": hist.fraction_beyond(L // 2)}


def cmd_extrapolate(args, run: RunConfig) -> dict:
    model, trained = _load_model(args.checkpoint)
    lens = [int(v) for v in args.eval_lens.split(",")] if args.eval_lens else list(run.eval.eval_lens)
    variant = args.variant or run.eval.variant
    table = extrapolation_eval(model, run.task, trained.task.L, lens, args.scaling or run.eval.scaling,
                               variant=variant, per_bin=args.per_bin or run.eval.instances_per_bin,
                               seed=run.eval.seed, model_id=str(args.checkpoint), batch_size=run.eval.batch_size)
    path = table.write(run.run_dir(), variant)
    return {"csv": str(path), "accuracy": {r["L"]: r["accuracy"] for r in table.rows}}


def parse_grid(items: list[str]) -> list[tuple[str, list]]:
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError([f"grid axis {item!r} is not of the form key=v1,v2"])
        key, raw = item.split("=", 1)
        values = [json.loads(v) if _is_json(v) else v for v in raw.split(",") if v != ""]
        if not values:
            raise ConfigError([f"grid axis {key!r} has no values"])
        axes.append((key.strip(), values))
    return axes


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
        return True
    except json.JSONDecodeError:
        return False


def _sweep_one(run_dict: dict) -> dict:
    run = RunConfig.from_dict(run_dict).check()
    d = write_run_manifest(run, "sweep")
    res = train(run, d)
    return {"run_id": run.run_id, "checkpoint": str(res.checkpoint.path)}


def cmd_sweep(args, run: RunConfig) -> dict:
    axes = parse_grid(args.grid)
    base = run.to_dict()
    runs = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        sets = [f"{k}={json.dumps(v)}" for (k, _), v in zip(axes, combo)]
        tag = "_".join(f"{k.split('.')[-1]}={v}" for (k, _), v in zip(axes, combo))
        d = apply_overrides(base, sets)
        d["run_id"] = f"{run.run_id}/{tag}"
        RunConfig.from_dict(d).check()  # fail before any run starts
        runs.append(d)
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_sweep_one, runs))
    else:
        results = [_sweep_one(d) for d in runs]
    return {"runs": results}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-attention": cmd_analyze_attention,
    "extrapolate": cmd_extrapolate,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = _resolve(args)
        _emit(COMMANDS[args.command](args, run))
    except ConfigError as exc:
        print(f"error: config: {'; '.join(exc.violations)}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_INVALID
    except (InputError, RopeDistillError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
