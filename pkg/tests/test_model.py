import numpy as np
import pytest

from ropedistill.errors import ContractError, DimensionError, InputError
from ropedistill.model import (
    NOPE,
    ModelConfig,
    RopeLM,
    attention_noise_forward,
    forward,
    forward_with_attention,
    init_params,
    param_shapes,
    parameter_count,
)
from ropedistill.numerics import no_grad, op_counts
from ropedistill.rope import standard_indices
from ropedistill.views import skip_indices

SMALL = ModelConfig(d_model=32, n_heads=4, n_layers=2, mlp_hidden=48, max_len=64, init_std=0.2)


def _fwd(x, r, cfg=SMALL, params=None, **kw):
    params = params or init_params(cfg)
    with no_grad():
        return forward(x, r, params, cfg, **kw).data


def _tokens(L, seed=0, B=None):
    shape = (L,) if B is None else (B, L)
    return np.random.default_rng(seed).integers(0, SMALL.vocab_size, size=shape)


def test_parameter_count_closed_form():
    cfg = ModelConfig()
    V, D, F, n = 64, 64, 128, 2
    per_layer = 2 * D + 4 * D * D + 3 * D * F
    assert parameter_count(cfg) == V * D + n * per_layer + D + D * V == 90_432


def test_init_is_seeded_and_zero_std_is_degenerate():
    a, b = init_params(SMALL), init_params(SMALL)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    z = init_params(ModelConfig(init_std=0.0))
    for name, p in z.items():
        expected = 1.0 if name.endswith("norm") else 0.0
        assert (p.data == expected).all()
    assert list(z) == list(param_shapes(ModelConfig()))


def test_config_validation():
    assert ModelConfig(d_model=30, n_heads=4).validate()
    assert ModelConfig(d_model=12, n_heads=4).validate()  # odd head dim
    with pytest.raises(DimensionError):
        init_params(ModelConfig(d_model=30, n_heads=4))


def test_rows_are_distributions():
    out = _fwd(_tokens(16), None)
    assert out.shape == (16, SMALL.vocab_size)
    np.testing.assert_allclose(np.exp(out).sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_causality(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**{**SMALL.to_dict(), "seed": seed})
    params = init_params(cfg)
    x = rng.integers(0, cfg.vocab_size, 24)
    j = int(rng.integers(1, 24))
    y = x.copy()
    y[j] = (y[j] + 1) % cfg.vocab_size
    a, b = _fwd(x, None, cfg, params), _fwd(y, None, cfg, params)
    assert np.array_equal(a[:j], b[:j])
    assert not np.allclose(a[j:], b[j:])


def test_skip_prefix_rows_agree():
    params = init_params(SMALL)
    x = _tokens(32, 1)
    a = _fwd(x, None, params=params)
    b = _fwd(x, skip_indices(32, 8, 16), params=params)
    assert np.abs(a[:8] - b[:8]).max() <= 1e-12
    assert np.abs(a[8:] - b[8:]).max() > 1e-6


@pytest.mark.parametrize("t", [1, 64, 10**5])
def test_global_translation_invariance(t):
    params = init_params(SMALL)
    x = _tokens(32, 2)
    r = standard_indices(32)
    assert np.abs(_fwd(x, r, params=params) - _fwd(x, r + t, params=params)).max() < 1e-9


def test_batched_matches_single():
    params = init_params(SMALL)
    x = _tokens(12, 3, B=3)
    r = np.stack([skip_indices(12, s, 5) for s in (0, 4, 11)])
    batched = _fwd(x, r, params=params)
    for b in range(3):
        np.testing.assert_allclose(batched[b], _fwd(x[b], r[b], params=params), atol=1e-12)


def test_nope_differs_from_rope():
    params = init_params(SMALL)
    x = _tokens(16, 4)
    assert not np.allclose(_fwd(x, NOPE, params=params), _fwd(x, None, params=params))


def test_input_errors():
    with pytest.raises(InputError):
        _fwd(np.array([0, SMALL.vocab_size]), None)
    with pytest.raises(InputError):
        _fwd(np.zeros(SMALL.max_len + 1, dtype=int), None)
    with pytest.raises(ContractError):
        _fwd(_tokens(4), "rope")
    with pytest.raises(ContractError):
        _fwd(_tokens(4), None, mode="test")


def test_dropout_needs_rng_and_is_reproducible():
    cfg = ModelConfig(**{**SMALL.to_dict(), "dropout_p": 0.2})
    params = init_params(cfg)
    x = _tokens(8)
    with pytest.raises(ContractError):
        _fwd(x, None, cfg, params, mode="train")
    a = _fwd(x, None, cfg, params, mode="train", rng=np.random.default_rng(1))
    b = _fwd(x, None, cfg, params, mode="train", rng=np.random.default_rng(1))
    c = _fwd(x, None, cfg, params, mode="eval")
    assert np.array_equal(a, b) and not np.allclose(a, c)


def test_attention_noise():
    params = init_params(SMALL)
    x = _tokens(16, 5)
    clean = _fwd(x, None, params=params)
    with no_grad():
        zero = attention_noise_forward(x, None, params, SMALL, 0.0, np.random.default_rng(0)).data
        n1 = attention_noise_forward(x, None, params, SMALL, 0.1, np.random.default_rng(3)).data
        n2 = attention_noise_forward(x, None, params, SMALL, 0.1, np.random.default_rng(3)).data
    assert np.array_equal(zero, clean)
    assert np.array_equal(n1, n2)
    kl = (np.exp(n1) * (n1 - clean)).sum(-1).mean()
    assert kl > 0
    with pytest.raises(ContractError):
        attention_noise_forward(x, None, params, SMALL, -1.0, np.random.default_rng(0))


def test_attention_records():
    params = init_params(SMALL)
    x = _tokens(4, 6)
    logp, recs = forward_with_attention(x, None, params, SMALL)
    assert np.array_equal(logp.data, _fwd(x, None, params=params))
    assert len(recs) == SMALL.n_layers * SMALL.n_heads * 10
    sums = {}
    for r in recs:
        assert r.key_pos <= r.query_pos
        sums[(r.layer, r.head, r.query_pos)] = sums.get((r.layer, r.head, r.query_pos), 0.0) + r.weight
    assert all(abs(s - 1.0) < 1e-9 for s in sums.values())
    with pytest.raises(ContractError):
        forward_with_attention(x, None, params, SMALL, layers=[5])


def test_forward_counter():
    before = op_counts["forward"]
    _fwd(_tokens(4), None)
    assert op_counts["forward"] == before + 1


def test_greedy_decode_appends_argmax():
    lm = RopeLM(SMALL)
    prompt = _tokens(6, 7, B=2)
    out = lm.greedy_decode(prompt, 3)
    assert out.shape == (2, 3)
    first = np.argmax(lm.log_probs(prompt)[:, -1], axis=-1)
    assert np.array_equal(out[:, 0], first)
