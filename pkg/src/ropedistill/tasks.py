"""Synthetic long-context data: a CLM training corpus and needle-in-a-haystack evals.

Token layout (all sequences start with BOS)::

    needle  = KEY_MARK key[key_len] value[value_len]
    query   = KEY_MARK key[key_len] QUERY_MARK [ORD_k]      # ORD_k: ordinal variant only
    answer  = value[value_len]                              # digits

Keys come from their own token range and never occur in filler; values are
digit tokens. Every NIAH
prompt plus its decoded answer fills exactly ``L`` tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, GenerationError

VARIANTS = ("single", "multikey", "multivalue_ordinal")
N_ORDINALS = 4


@dataclass(frozen=True)
class Vocabulary:
    """Reserved ids first, filler tokens after."""

    size: int = 64

    BOS = 0
    QUERY_MARK = 1
    KEY_MARK = 2
    COPY_MARK = 3
    DIGIT0 = 4
    ORD0 = 14
    KEY0 = 18
    N_KEY_TOKENS = 16
    FILLER0 = 34

    def __post_init__(self):
        if self.size <= self.FILLER0:
            raise ContractError(f"vocabulary of size {self.size} leaves no filler tokens")

    @property
    def digits(self) -> np.ndarray:
        return np.arange(self.DIGIT0, self.DIGIT0 + 10)

    @property
    def keys(self) -> np.ndarray:
        return np.arange(self.KEY0, self.KEY0 + self.N_KEY_TOKENS)

    @property
    def filler(self) -> np.ndarray:
        return np.arange(self.FILLER0, self.size)

    def ordinal(self, k: int) -> int:
        """Token asking for the k-th occurrence (1-based)."""
        if not 1 <= k <= N_ORDINALS:
            raise ContractError(f"ordinal must lie in 1..{N_ORDINALS}, got {k}")
        return self.ORD0 + k - 1


@dataclass
class TaskConfig:
    L: int = 256
    vocab_size: int = 64
    key_len: int = 2
    value_len: int = 4
    n_distractor_keys: int = 3
    n_values: int = 3
    depth_bins: int = 10
    instances_per_bin: int = 50
    filler: str = "iid"
    filler_period: int = 16
    # training corpus
    n_pairs: int = 6
    n_queries: int = 3
    n_copy_spans: int = 1
    copy_len: int = 12
    ordinal_prob: float = 0.25
    seed: int = 0

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)

    @property
    def needle_len(self) -> int:
        return 1 + self.key_len + self.value_len

    def validate(self) -> list[str]:
        problems = []
        if self.L < 16:
            problems.append(f"task.L must be >= 16, got {self.L}")
        if self.vocab_size <= Vocabulary.FILLER0:
            problems.append(f"task.vocab_size must exceed {Vocabulary.FILLER0}, got {self.vocab_size}")
        if self.depth_bins < 2:
            problems.append(f"task.depth_bins must be >= 2, got {self.depth_bins}")
        if self.key_len < 1 or self.value_len < 1:
            problems.append("task.key_len and task.value_len must be >= 1")
        if not 1 <= self.n_values <= N_ORDINALS:
            problems.append(f"task.n_values must lie in 1..{N_ORDINALS}, got {self.n_values}")
        if self.filler not in ("iid", "repeated"):
            problems.append(f"task.filler must be 'iid' or 'repeated', got {self.filler!r}")
        if self.n_queries > self.n_pairs:
            problems.append("task.n_queries cannot exceed task.n_pairs")
        if not 0 <= self.ordinal_prob <= 1:
            problems.append(f"task.ordinal_prob must lie in [0, 1], got {self.ordinal_prob}")
        return problems

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Needle:
    key: list[int]
    value: list[int]
    position: int


@dataclass
class NIAHInstance:
    tokens: np.ndarray
    variant: str
    needles: list[Needle]
    gold_value: list[int]
    answer_depth: float
    depth_bin: int
    queried_ordinal: int | None = None
    seed: int | None = None

    @property
    def haystack_len(self) -> int:
        # BOS + haystack + query suffix
        return len(self.tokens) - 1 - self.query_len

    @property
    def query_len(self) -> int:
        key_len = len(self.needles[0].key)
        return key_len + 2 + (self.queried_ordinal is not None)

    def to_dict(self) -> dict:
        return {
            "tokens": [int(t) for t in self.tokens],
            "variant": self.variant,
            "needles": [asdict(n) for n in self.needles],
            "gold_value": list(self.gold_value),
            "answer_depth": self.answer_depth,
            "depth_bin": self.depth_bin,
            "queried_ordinal": self.queried_ordinal,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NIAHInstance":
        return cls(
            tokens=np.asarray(d["tokens"], dtype=np.int64),
            variant=d["variant"],
            needles=[Needle(**n) for n in d["needles"]],
            gold_value=list(d["gold_value"]),
            answer_depth=float(d["answer_depth"]),
            depth_bin=int(d["depth_bin"]),
            queried_ordinal=d.get("queried_ordinal"),
            seed=d.get("seed"),
        )


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _filler(cfg: TaskConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    pool = cfg.vocab.filler
    if cfg.filler == "repeated":
        sentence = rng.choice(pool, size=cfg.filler_period)
        return np.resize(sentence, n).astype(np.int64)
    return rng.choice(pool, size=n).astype(np.int64)


def _distinct_keys(cfg: TaskConfig, n: int, rng: np.random.Generator) -> list[list[int]]:
    pool = cfg.vocab.keys
    if n > len(pool) ** cfg.key_len:
        raise GenerationError(f"cannot draw {n} distinct keys of length {cfg.key_len}")
    keys: list[tuple[int, ...]] = []
    while len(keys) < n:
        k = tuple(int(t) for t in rng.choice(pool, size=cfg.key_len))
        if k not in keys:
            keys.append(k)
    return [list(k) for k in keys]


def _distinct_values(cfg: TaskConfig, n: int, rng: np.random.Generator) -> list[list[int]]:
    digits = cfg.vocab.digits
    values: list[tuple[int, ...]] = []
    while len(values) < n:
        v = tuple(int(t) for t in rng.choice(digits, size=cfg.value_len))
        if v not in values:
            values.append(v)
    return [list(v) for v in values]


def _place(rng, length: int, width: int, taken, lo: int = 0, hi: int | None = None) -> int:
    """Uniform start in ``[lo, hi]`` whose ``width``-span overlaps none of ``taken``.

    ``taken`` holds ``(start, width)`` pairs or bare starts of spans that are
    also ``width`` long.
    """
    spans = [t if isinstance(t, tuple) else (t, width) for t in taken]
    hi = length - width if hi is None else min(hi, length - width)
    if hi < lo:
        raise GenerationError(f"no room for a span of {width} in [{lo}, {hi}]")
    starts = np.arange(lo, hi + 1)
    ok = np.ones(starts.shape, dtype=bool)
    for a, w in spans:
        ok &= (starts + width <= a) | (a + w <= starts)
    if not ok.any():
        raise GenerationError(f"could not place a span of {width} tokens among {len(spans)} others")
    return int(rng.choice(starts[ok]))


def _layout(rng, length: int, widths: list[int]) -> list[int]:
    """Random non-overlapping starts for spans of ``widths`` inside ``length`` tokens.

    Items are put in random order and the free tokens are split into random
    gaps, so every feasible request succeeds.
    """
    free = length - sum(widths)
    if free < 0:
        raise GenerationError(f"{sum(widths)} tokens of spans do not fit in {length}")
    order = rng.permutation(len(widths))
    cuts = np.sort(rng.integers(0, free + 1, size=len(widths)))
    starts = [0] * len(widths)
    used = 0
    for slot, item in enumerate(order):
        starts[item] = int(cuts[slot]) + used
        used += widths[item]
    return starts


def _needle_tokens(cfg: TaskConfig, key, value) -> list[int]:
    return [cfg.vocab.KEY_MARK, *key, *value]


def _query_tokens(cfg: TaskConfig, key, ordinal: int | None = None) -> list[int]:
    q = [cfg.vocab.KEY_MARK, *key, cfg.vocab.QUERY_MARK]
    if ordinal is not None:
        q.append(cfg.vocab.ordinal(ordinal))
    return q


def depth_bin_range(haystack_len: int, width: int, depth_bin: int, depth_bins: int) -> tuple[int, int]:
    """Inclusive start range whose normalised depth ``start / haystack_len`` falls in the bin."""
    lo = int(np.ceil(depth_bin * haystack_len / depth_bins))
    hi = int(np.ceil((depth_bin + 1) * haystack_len / depth_bins)) - 1
    hi = min(hi, haystack_len - width)
    if hi < lo:
        raise GenerationError(
            f"depth bin {depth_bin}/{depth_bins} cannot hold a {width}-token needle in {haystack_len} tokens"
        )
    return lo, hi


# ---------------------------------------------------------------------------
# NIAH
# ---------------------------------------------------------------------------


def gen_niah(cfg: TaskConfig, variant: str, depth_bin: int, rng: np.random.Generator, L: int | None = None) -> NIAHInstance:
    """One retrieval instance with the gold needle's start inside ``depth_bin``.

    ``single`` plants only the gold needle; ``multikey`` adds
    ``n_distractor_keys`` needles with other keys; ``multivalue_ordinal`` plants
    ``n_values`` needles sharing one key and asks for the gold one by its rank.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown NIAH variant {variant!r}")
    if not 0 <= depth_bin < cfg.depth_bins:
        raise ContractError(f"depth_bin must lie in [0, {cfg.depth_bins}), got {depth_bin}")
    L = cfg.L if L is None else L
    ordinal = variant == "multivalue_ordinal"
    q_len = cfg.key_len + 2 + ordinal
    H = L - cfg.value_len - 1 - q_len
    width = cfg.needle_len
    if H < width:
        raise GenerationError(f"L={L} leaves no room for a haystack")

    if variant == "single":
        n_needles = 1
    elif variant == "multikey":
        n_needles = 1 + cfg.n_distractor_keys
    else:
        n_needles = cfg.n_values

    lo, hi = depth_bin_range(H, width, depth_bin, cfg.depth_bins)
    gold_pos = int(rng.integers(lo, hi + 1))
    positions = [gold_pos]
    for _ in range(n_needles - 1):
        positions.append(_place(rng, H, width, positions))

    values = _distinct_values(cfg, n_needles, rng)
    if ordinal:
        keys = _distinct_keys(cfg, 1, rng) * n_needles
    else:
        keys = _distinct_keys(cfg, n_needles, rng)

    hay = _filler(cfg, H, rng)
    needles = []
    for key, value, pos in zip(keys, values, positions):
        hay[pos: pos + width] = _needle_tokens(cfg, key, value)
        needles.append(Needle(key=list(key), value=list(value), position=pos))

    queried = None
    if ordinal:
        queried = 1 + sorted(positions).index(gold_pos)
    query = _query_tokens(cfg, keys[0], queried)
    tokens = np.concatenate([[cfg.vocab.BOS], hay, query]).astype(np.int64)
    needles.sort(key=lambda n: n.position)
    return NIAHInstance(
        tokens=tokens,
        variant=variant,
        needles=needles,
        gold_value=list(values[0]),
        answer_depth=gold_pos / H,
        depth_bin=depth_bin,
        queried_ordinal=queried,
    )


def niah_instances(cfg: TaskConfig, variant: str, seed: int | None = None, L: int | None = None,
                   per_bin: int | None = None) -> list[NIAHInstance]:
    """``per_bin`` instances for every depth bin, each from its own spawned seed."""
    seed = cfg.seed if seed is None else seed
    per_bin = cfg.instances_per_bin if per_bin is None else per_bin
    root = np.random.SeedSequence([seed, VARIANTS.index(variant), L or cfg.L])
    children = root.spawn(cfg.depth_bins * per_bin)
    out = []
    for b in range(cfg.depth_bins):
        for j in range(per_bin):
            ss = children[b * per_bin + j]
            inst = gen_niah(cfg, variant, b, np.random.default_rng(ss), L=L)
            inst.seed = int(ss.generate_state(1)[0])
            out.append(inst)
    return out


def score_niah(model_output, inst: NIAHInstance) -> int:
    """1 iff the decoded value matches the gold value exactly."""
    return int([int(t) for t in model_output] == [int(t) for t in inst.gold_value])


# ---------------------------------------------------------------------------
# Training corpus
# ---------------------------------------------------------------------------


def gen_clm_sequence(cfg: TaskConfig, rng: np.random.Generator) -> np.ndarray:
    """One length-``L`` training sequence.

    The haystack carries ``n_pairs`` key/value needles (one key repeated with
    ``n_values`` distinct values with probability ``ordinal_prob``) and
    ``n_copy_spans`` marked spans that reappear verbatim later. A block of
    ``n_queries`` answered queries closes the sequence.
    """
    if cfg.L < 16:
        raise ContractError(f"corpus sequences need L >= 16, got {cfg.L}")
    v = cfg.vocab
    width = cfg.needle_len
    ordinal_group = cfg.n_pairs > 0 and cfg.n_values > 1 and rng.random() < cfg.ordinal_prob

    keys = _distinct_keys(cfg, cfg.n_pairs, rng)
    values = _distinct_values(cfg, cfg.n_pairs + cfg.n_values, rng)
    needle_keys = list(keys)
    needle_values = values[: cfg.n_pairs]
    if ordinal_group:
        # the first key gets n_values occurrences with distinct values
        needle_keys += [keys[0]] * (cfg.n_values - 1)
        needle_values += values[cfg.n_pairs: cfg.n_pairs + cfg.n_values - 1]

    queried = list(rng.choice(cfg.n_pairs, size=cfg.n_queries, replace=False))
    query_block: list[int] = []
    # answers filled once positions (and so ordinals) are known
    H = cfg.L - 1 - sum(cfg.key_len + 2 + cfg.value_len + (ordinal_group and q == 0) for q in queried)
    if H < width * len(needle_keys) + 2 * (cfg.copy_len + 1) * cfg.n_copy_spans:
        raise GenerationError(f"L={cfg.L} is too short for the requested corpus layout")

    hay = _filler(cfg, H, rng)
    items: list[list[int]] = []
    for _ in range(cfg.n_copy_spans):
        span = [v.COPY_MARK, *(int(t) for t in rng.choice(v.filler, size=cfg.copy_len))]
        items += [span, span]
    n_spans = len(items)
    items += [_needle_tokens(cfg, k, val) for k, val in zip(needle_keys, needle_values)]
    starts = _layout(rng, H, [len(it) for it in items])
    for start, it in zip(starts, items):
        hay[start: start + len(it)] = it
    positions = starts[n_spans:]

    for q in queried:
        if ordinal_group and q == 0:
            group = [i for i, k in enumerate(needle_keys) if k == keys[0]]
            order = sorted(group, key=lambda i: positions[i])
            rank = int(rng.integers(1, len(order) + 1))
            query_block += _query_tokens(cfg, keys[0], rank) + needle_values[order[rank - 1]]
        else:
            query_block += _query_tokens(cfg, keys[q]) + needle_values[q]

    seq = np.concatenate([[v.BOS], hay, query_block]).astype(np.int64)
    assert len(seq) == cfg.L
    return seq


def gen_clm_corpus(cfg: TaskConfig, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of training sequences."""
    if cfg.L < 16:
        raise ContractError(f"corpus sequences need L >= 16, got {cfg.L}")
    while True:
        yield gen_clm_sequence(cfg, rng)


def clm_batch(cfg: TaskConfig, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([gen_clm_sequence(cfg, rng) for _ in range(batch_size)])


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def write_jsonl(path: str | Path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
