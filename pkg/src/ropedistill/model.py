"""A small pre-norm decoder-only transformer whose RoPE indices are an input.

``forward`` returns log next-token distributions for every position under an
arbitrary index vector, so the same parameters can be run on a standard and a
perturbed view of one token sequence. Row ``i`` of the output is the
distribution over token ``i + 1`` given tokens ``0..i``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, InputError
from .numerics import (
    DTYPE,
    Tensor,
    causal_softmax,
    embedding,
    log_softmax,
    matmul,
    no_grad,
    op_counts,
    rms_norm,
    silu,
)
from .rope import RopeFrequencies, apply_rotary, check_indices, rope_tables, standard_indices

# Passed as the index argument to run a pass without any rotation.
NOPE = "nope"



@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 1024
    mlp_hidden: int = 128
    rope_base: float = 10000.0
    dropout_p: float = 0.0
    init_std: float = 0.02
    norm_eps: float = 1e-6
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeFrequencies:
        return RopeFrequencies(head_dim=self.head_dim, base=self.rope_base)

    def validate(self) -> list[str]:
        problems = []
        if self.n_heads < 1 or self.d_model % self.n_heads:
            problems.append(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        elif self.head_dim % 2:
            problems.append(f"model head_dim ({self.head_dim}) must be even")
        if self.vocab_size < 4:
            problems.append(f"model.vocab_size must be >= 4, got {self.vocab_size}")
        if self.n_layers < 1:
            problems.append(f"model.n_layers must be >= 1, got {self.n_layers}")
        if self.max_len < 2:
            problems.append(f"model.max_len must be >= 2, got {self.max_len}")
        if self.mlp_hidden < 1:
            problems.append(f"model.mlp_hidden must be >= 1, got {self.mlp_hidden}")
        if not 0.0 <= self.dropout_p < 1.0:
            problems.append(f"model.dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.init_std < 0:
            problems.append(f"model.init_std must be >= 0, got {self.init_std}")
        if not self.rope_base > 1:
            problems.append(f"model.rope_base must exceed 1, got {self.rope_base}")
        return problems

    def check(self) -> "ModelConfig":
        problems = self.validate()
        if problems:
            raise DimensionError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in canonical (initialisation and file) order."""
    D, V, F = cfg.d_model, cfg.vocab_size, cfg.mlp_hidden
    shapes = {"tok_emb": (V, D)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (D,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (D, D)
        shapes[p + "mlp_norm"] = (D,)
        shapes[p + "w_gate"] = (D, F)
        shapes[p + "w_up"] = (D, F)
        shapes[p + "w_down"] = (F, D)
    shapes["final_norm"] = (D,)
    shapes["head"] = (D, V)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Weights ~ N(0, init_std^2) from ``cfg.seed``; norm gains start at 1."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            data = np.ones(shape, dtype=DTYPE)
        else:
            data = rng.standard_normal(shape) * cfg.init_std
        params[name] = Tensor(data, requires_grad=True)
    return params


def _check_inputs(x, r, cfg: ModelConfig):
    x = np.asarray(x)
    if x.ndim not in (1, 2):
        raise InputError(f"token input must be 1-d or 2-d, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.integer):
        raise InputError("token ids must be integers")
    L = x.shape[-1]
    if L < 1:
        raise InputError("empty token sequence")
    if L > cfg.max_len:
        raise InputError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if x.min() < 0 or x.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    if isinstance(r, str):
        if r != NOPE:
            raise ContractError(f"index argument must be an index vector or {NOPE!r}")
        return x, None
    if r is None:
        r = standard_indices(L)
    r = check_indices(r, L)
    if r.ndim == 2 and (x.ndim != 2 or r.shape[0] != x.shape[0]):
        raise DimensionError(f"batched indices {r.shape} do not match tokens {x.shape}")
    return x, r


def _dropout(t: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    keep = rng.random(t.shape) >= p
    return t * (keep / (1.0 - p))


def forward(
    x,
    r,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    mode: str = "eval",
    *,
    rng: np.random.Generator | None = None,
    attn_noise: float = 0.0,
    freqs: RopeFrequencies | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Log next-token distributions ``[L, vocab]`` (or ``[B, L, vocab]``).

    ``r`` is an index vector ``[L]``, a batch of them ``[B, L]``, None for the
    standard assignment, or ``NOPE`` to skip rotation. In ``train`` mode with
    ``dropout_p > 0`` residual-branch dropout draws from ``rng``. A positive
    ``attn_noise`` adds N(0, attn_noise^2) to pre-softmax attention logits.
    ``capture``, when given, receives each layer's attention weights.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if attn_noise < 0:
        raise ContractError(f"attention noise sigma must be >= 0, got {attn_noise}")
    x, r = _check_inputs(x, r, cfg)
    drop = mode == "train" and cfg.dropout_p > 0
    if (drop or attn_noise > 0) and rng is None:
        raise ContractError("a stochastic forward pass needs an rng")
    op_counts["forward"] += 1

    single = x.ndim == 1
    if single:
        x = x[None, :]
    B, L = x.shape
    D, H, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    freqs = freqs or cfg.rope

    if r is None:
        cos = sin = None
    else:
        cos, sin = rope_tables(r, freqs)
        if r.ndim == 2:
            cos, sin = cos[:, None], sin[:, None]
    scale = 1.0 / np.sqrt(hd)

    h = embedding(params["tok_emb"], x)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = rms_norm(h, params[p + "attn_norm"], cfg.norm_eps)
        q = matmul(a, params[p + "wq"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        k = matmul(a, params[p + "wk"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        v = matmul(a, params[p + "wv"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        if cos is not None:
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        scores = matmul(q, k.transpose(0, 1, 3, 2))
        if attn_noise > 0:
            scores = scores * scale + rng.normal(0.0, attn_noise, size=scores.shape)
            weights = causal_softmax(scores)
        else:
            weights = causal_softmax(scores, scale)
        if capture is not None:
            capture[i] = weights.data[0] if single else weights.data
        o = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, L, D)
        o = matmul(o, params[p + "wo"])
        if drop:
            o = _dropout(o, cfg.dropout_p, rng)
        h = h + o

        m = rms_norm(h, params[p + "mlp_norm"], cfg.norm_eps)
        gated = silu(matmul(m, params[p + "w_gate"])) * matmul(m, params[p + "w_up"])
        f = matmul(gated, params[p + "w_down"])
        if drop:
            f = _dropout(f, cfg.dropout_p, rng)
        h = h + f

    h = rms_norm(h, params["final_norm"], cfg.norm_eps)
    logp = log_softmax(matmul(h, params["head"]))
    return logp.reshape(L, cfg.vocab_size) if single else logp


def attention_noise_forward(x, r, params, cfg: ModelConfig, sigma: float, rng: np.random.Generator) -> Tensor:
    """``forward`` with Gaussian noise on the pre-softmax attention logits."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    return forward(x, r, params, cfg, "eval", rng=rng, attn_noise=sigma)


@dataclass(frozen=True)
class AttentionRecord:
    layer: int
    head: int
    query_pos: int
    key_pos: int
    weight: float
    query_index: int
    key_index: int


def forward_with_attention(
    x, r, params, cfg: ModelConfig, layers=None, query_positions=None
) -> tuple[Tensor, list[AttentionRecord]]:
    """``forward`` in eval mode plus post-softmax weights as records.

    ``layers`` and ``query_positions`` default to all. Only causal pairs
    (``key_pos <= query_pos``) are emitted.
    """
    x = np.asarray(x)
    if x.ndim != 1:
        raise InputError("forward_with_attention takes a single sequence")
    capture: dict = {}
    with no_grad():
        logp = forward(x, r, params, cfg, "eval", capture=capture)
    L = x.shape[0]
    idx = standard_indices(L) if r is None or isinstance(r, str) else check_indices(r, L)
    layers = range(cfg.n_layers) if layers is None else layers
    queries = range(L) if query_positions is None else query_positions
    records = []
    for layer in layers:
        if not 0 <= layer < cfg.n_layers:
            raise ContractError(f"layer {layer} out of range [0, {cfg.n_layers})")
        w = capture[layer]
        for head in range(cfg.n_heads):
            for qp in queries:
                for kp in range(qp + 1):
                    records.append(
                        AttentionRecord(layer, head, qp, kp, float(w[head, qp, kp]), int(idx[qp]), int(idx[kp]))
                    )
    return logp, records


@dataclass
class RopeLM:
    """Configuration plus parameters, with greedy decoding helpers."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config)

    def log_probs(self, x, r=None, **kw) -> np.ndarray:
        with no_grad():
            return forward(x, r, self.params, self.config, "eval", **kw).data

    def greedy_decode(self, prompts, n_new: int, index_fn=None, freqs: RopeFrequencies | None = None) -> np.ndarray:
        """Append ``n_new`` argmax tokens to each prompt (all prompts share a length).

        ``index_fn(L)`` maps the current length to an index vector; the default
        is the standard assignment.
        """
        seq = np.array(prompts, dtype=np.int64, ndmin=2)
        out = []
        for _ in range(n_new):
            L = seq.shape[1]
            r = standard_indices(L) if index_fn is None else index_fn(L)
            logp = self.log_probs(seq, r, freqs=freqs)
            nxt = np.argmax(logp[:, -1, :], axis=-1)
            out.append(nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return np.stack(out, axis=1)
