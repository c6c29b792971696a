import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropedistill import numerics as nx
from ropedistill.errors import ContractError, DimensionError, NumericError
from ropedistill.numerics import Tensor, finite_diff_check

RNG = np.random.default_rng(7)


def _rand(*shape):
    return RNG.standard_normal(shape)


# Each primitive is reduced to a scalar through a fixed random projection so
# every output coordinate contributes to the checked gradient.
def _project(t: Tensor, seed: int = 3) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return (t * w).sum()


PRIMITIVES = {
    "add": (lambda x: _project(x + Tensor(np.full(x.shape, 0.3)) + 2.0), (3, 4)),
    "sub": (lambda x: _project(1.5 - x - x * 0.5), (3, 4)),
    "mul": (lambda x: _project(x * x), (3, 4)),
    "div": (lambda x: _project(x / (x * x + 2.0)), (3, 4)),
    "neg": (lambda x: _project(-x), (5,)),
    "pow": (lambda x: _project((x * x + 1.0) ** 1.5), (3, 4)),
    "exp": (lambda x: _project(nx.exp(x)), (3, 4)),
    "log": (lambda x: _project(nx.log(x * x + 0.5)), (3, 4)),
    "silu": (lambda x: _project(nx.silu(x)), (3, 4)),
    "matmul_weight": (lambda x: _project(nx.matmul(x, Tensor(_FIXED_W))), (2, 3, 4)),
    "matmul_batched": (lambda x: _project(nx.matmul(x, x.transpose(0, 2, 1))), (2, 3, 4)),
    "sum_axis": (lambda x: _project(x.sum(axis=1)), (3, 4)),
    "mean": (lambda x: (x * x).mean(), (3, 4)),
    "reshape": (lambda x: _project(x.reshape(4, 3)), (3, 4)),
    "transpose": (lambda x: _project(x.transpose(1, 0)), (3, 4)),
    "getitem_basic": (lambda x: _project(x[1:, :2]), (3, 4)),
    "getitem_fancy": (lambda x: _project(x[np.array([0, 2, 0])]), (3, 4)),
    "concat": (lambda x: _project(nx.concat([x, x * 2.0], axis=-1)), (3, 4)),
    "gather_last": (lambda x: _project(nx.gather_last(x, np.array([1, 3, 0]))), (3, 4)),
    "embedding": (lambda x: _project(nx.embedding(x, np.array([[0, 2, 2], [1, 0, 2]]))), (3, 4)),
    "log_softmax": (lambda x: _project(nx.log_softmax(x)), (3, 4)),
    "softmax": (lambda x: _project(nx.softmax(x)), (3, 4)),
    "causal_softmax": (lambda x: _project(nx.causal_softmax(x, 0.7)), (2, 4, 4)),
    "masked_fill": (lambda x: _project(nx.masked_fill(x, np.eye(3, 4, dtype=bool), -1.0)), (3, 4)),
    "rms_norm_input": (lambda x: _project(nx.rms_norm(x, Tensor(np.linspace(0.5, 1.5, 4)))), (3, 4)),
    "rms_norm_gain": (lambda g: _project(nx.rms_norm(Tensor(_FIXED_X), g)), (4,)),
}
_FIXED_W = np.random.default_rng(11).standard_normal((4, 5))
_FIXED_X = np.random.default_rng(12).standard_normal((3, 4))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    f, shape = PRIMITIVES[name]
    x = np.random.default_rng(zlib.crc32(name.encode())).uniform(-1.5, 1.5, shape)
    assert finite_diff_check(f, x) < 1e-6


def test_log_softmax_oracle_values():
    out = nx.log_softmax(Tensor(np.array([1.0, 0.0]))).data
    np.testing.assert_allclose(out, [-0.313262, -1.313262], atol=1e-6)


def test_log_softmax_is_stable_for_large_logits():
    out = nx.log_softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[0], 0.0, atol=1e-12)


def test_tensor_tensor_ops_require_identical_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3,)))
    with pytest.raises(DimensionError):
        a + b
    with pytest.raises(DimensionError):
        a * b


def test_constant_may_broadcast_only_into_the_tensor_shape():
    a = Tensor(np.ones((2, 3)))
    assert (a + np.ones(3)).shape == (2, 3)
    with pytest.raises(DimensionError):
        a + np.ones((4, 2, 3))


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nx.backward(x * 2.0)


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_detach_blocks_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x * x.detach()).sum().backward()
    np.testing.assert_allclose(x.grad, [3.0])


def test_no_grad_records_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_nonfinite_gradient_raises():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(divide="ignore"), pytest.raises(NumericError):
        nx.backward(nx.log(x).sum())


def test_item_rejects_multi_element():
    with pytest.raises(DimensionError):
        Tensor(np.ones(2)).item()


def test_finite_diff_rejects_bad_eps_and_nondeterminism():
    with pytest.raises(ContractError):
        finite_diff_check(lambda x: x.sum(), np.ones(2), eps=1.0)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        finite_diff_check(lambda x: (x * rng.standard_normal(2)).sum(), np.ones(2))


def test_finite_diff_detects_a_wrong_gradient():
    def bad_square(a):
        return Tensor._from_op(a.data ** 2, (a,), lambda g: (g * a.data,), "bad").sum()

    assert finite_diff_check(bad_square, np.array([1.0, 2.0])) > 0.4


def test_op_counters_count_backward_calls():
    before = nx.op_counts["backward"]
    x = Tensor(np.ones(2), requires_grad=True)
    x.sum().backward()
    assert nx.op_counts["backward"] == before + 1


def test_array_roundtrip_is_bitwise(tmp_path):
    arrays = {"a": _rand(3, 4), "b": np.array(1.5), "c": _rand(7)}
    nx.save_arrays(tmp_path / "x.bin", arrays, {"step": 3})
    back, meta = nx.load_arrays(tmp_path / "x.bin")
    assert meta["step"] == 3 and meta["format"] == "f64-le"
    for k, v in arrays.items():
        assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_load_arrays_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        nx.load_arrays(tmp_path / "missing.bin")
    (tmp_path / "half.bin").write_bytes(b"")
    with pytest.raises(FileNotFoundError):
        nx.load_arrays(tmp_path / "half.bin")


def test_config_hash_ignores_key_order():
    assert nx.config_hash({"a": 1, "b": 2}) == nx.config_hash({"b": 2, "a": 1})
    assert nx.config_hash({"a": 1}) != nx.config_hash({"a": 2})


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_log_softmax_rows_normalise(x):
    out = nx.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)
    assert (out <= 1e-12).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5, allow_nan=False)))
def test_sum_gradient_is_ones(x):
    t = Tensor(x, requires_grad=True)
    t.sum().backward()
    np.testing.assert_array_equal(t.grad, np.ones_like(x))


def test_causal_softmax_matches_masked_softmax():
    a = _rand(2, 5, 5)
    future = np.triu(np.ones((5, 5), dtype=bool), k=1)
    ref = nx.softmax(nx.masked_fill(Tensor(a) * 0.3, future, -1e30)).data
    got = nx.causal_softmax(Tensor(a), 0.3).data
    np.testing.assert_allclose(got, ref, atol=1e-15)
    assert (got[:, future] == 0).all()
    with pytest.raises(DimensionError):
        nx.causal_softmax(Tensor(np.ones((3, 4))))
