"""Run configuration: one JSON document holding every sub-config.

Top-level sections are ``model``, ``objective``, ``sampler``, ``train``,
``task`` and ``eval``; dotted overrides such as ``objective.lambda=0.5`` address
keys inside them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .numerics import config_hash
from .objective import ObjectiveMode
from .tasks import TaskConfig
from .views import SamplerConfig

SCALINGS = ("none", "index_scale", "base_rescale")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_steps: int | None = None
    min_lr_ratio: float = 0.1
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    log_path: str | None = None
    data: str = "synthetic"

    @property
    def warmup(self) -> int:
        return max(1, round(0.05 * self.steps)) if self.warmup_steps is None else self.warmup_steps

    def validate(self) -> list[str]:
        problems = []
        if self.steps < 1:
            problems.append(f"train.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            problems.append(f"train.lr must be > 0, got {self.lr}")
        if not self.grad_clip > 0:
            problems.append(f"train.grad_clip must be > 0, got {self.grad_clip}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            problems.append(f"train.betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            problems.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            problems.append(f"train.warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.checkpoint_every < 0:
            problems.append(f"train.checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return problems


@dataclass
class EvalConfig:
    variant: str = "multikey"
    instances_per_bin: int = 50
    eval_lens: list[int] = field(default_factory=lambda: [512, 1024])
    scaling: str = "index_scale"
    layer: int | None = None
    threshold: float = 1e-3
    last_k: int | None = None
    attention_len: int = 1024
    histogram_mode: str = "count"
    batch_size: int = 25
    seed: int = 1234

    def validate(self) -> list[str]:
        problems = []
        if self.variant not in ("single", "multikey", "multivalue_ordinal"):
            problems.append(f"eval.variant must be a NIAH variant, got {self.variant!r}")
        if self.scaling not in SCALINGS:
            problems.append(f"eval.scaling must be one of {SCALINGS}, got {self.scaling!r}")
        if self.instances_per_bin < 1:
            problems.append(f"eval.instances_per_bin must be >= 1, got {self.instances_per_bin}")
        if self.histogram_mode not in ("count", "weight"):
            problems.append(f"eval.histogram_mode must be 'count' or 'weight', got {self.histogram_mode!r}")
        if not 0 <= self.threshold <= 1:
            problems.append(f"eval.threshold must lie in [0, 1], got {self.threshold}")
        return problems


_SECTIONS = {
    "model": ModelConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
    "task": TaskConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveMode = field(default_factory=ObjectiveMode)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = {"run_id": self.run_id, "output_dir": self.output_dir}
        for name in _SECTIONS:
            d[name] = asdict(getattr(self, name))
        d["train"]["betas"] = list(self.train.betas)
        d["objective"] = self.objective.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"run_id", "output_dir", "objective", *_SECTIONS}
        unknown = sorted(set(d) - known)
        problems = [f"unknown top-level key {k!r}" for k in unknown]
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = dict(d.get(name, {}))
            names = {f.name for f in fields(klass)}
            for k in sorted(set(section) - names):
                problems.append(f"unknown key {name}.{k}")
                section.pop(k)
            if name == "train" and "betas" in section:
                section["betas"] = tuple(section["betas"])
            try:
                kwargs[name] = klass(**section)
            except Exception as exc:  # bad types surface as invariant violations
                problems.append(f"{name}: {exc}")
        obj = dict(d.get("objective", {}))
        for k in sorted(set(obj) - {"variant", "lambda", "noise_sigma"}):
            problems.append(f"unknown key objective.{k}")
        if problems:
            raise ConfigError(problems)
        return cls(
            run_id=str(d.get("run_id", "run")),
            output_dir=str(d.get("output_dir", "runs")),
            objective=ObjectiveMode.from_dict(obj),
            **kwargs,
        )

    def validate(self) -> list[str]:
        problems = []
        problems += self.model.validate()
        problems += self.objective.validate()
        problems += self.sampler.validate()
        problems += self.train.validate()
        problems += self.task.validate()
        problems += self.eval.validate()
        if self.task.vocab_size != self.model.vocab_size:
            problems.append(
                f"task.vocab_size ({self.task.vocab_size}) must equal model.vocab_size ({self.model.vocab_size})"
            )
        if self.task.L > self.model.max_len:
            problems.append(f"task.L ({self.task.L}) exceeds model.max_len ({self.model.max_len})")
        if self.objective.variant == "dropout_consistency" and self.model.dropout_p <= 0:
            problems.append("objective.variant=dropout_consistency needs model.dropout_p > 0")
        if self.sampler.Y is not None and self.sampler.kind == "skip" and self.sampler.Y < 1:
            problems.append("sampler.Y must be >= 1")
        return problems

    def check(self) -> "RunConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {key!r} descends into a non-section")
                break
        else:
            node[parts[-1]] = _parse_value(raw)
    if problems:
        raise ConfigError(problems)
    return d


def load_run_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    return RunConfig.from_dict(apply_overrides(raw, overrides or [])).check()
