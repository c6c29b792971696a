"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the recorded graph in
reverse topological order. ``detach`` is a graph operation of its own: the
returned tensor has no parents, so nothing upstream of it can receive gradient
through that path.

Binary operations between two tensors require identical shapes. A tensor may
be combined with a plain numpy constant as long as the constant broadcasts to
the tensor's shape without changing it.
"""

from __future__ import annotations

import collections
import contextlib
import hashlib
import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

# Counts forward/backward passes so callers can assert how many ran per step.
op_counts: collections.Counter = collections.Counter()

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array that may participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "detached", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.detached = False
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.detached = False
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no parents, never requires grad."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.detached = True
        out.op = "detach"
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -_const(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, 1.0 / _const(other))

    def __rtruediv__(self, other):
        return mul(self ** -1.0, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- reductions and reshapes -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _const(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


def _check_const_shape(t: Tensor, c: np.ndarray, opname: str) -> None:
    try:
        out = np.broadcast_shapes(t.shape, c.shape)
    except ValueError:
        out = None
    if out != t.shape:
        raise DimensionError(f"{opname}: constant of shape {c.shape} does not fit tensor {t.shape}")


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")
    c = _const(b)
    _check_const_shape(a, c, "add")
    return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    c = _const(b)
    _check_const_shape(a, c, "mul")
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    ad = a.data
    out = ad ** exponent
    return Tensor._from_op(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    ad = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    out = ad * sig

    def _bw(g):
        return (g * (sig + out * (1.0 - sig)),)

    return Tensor._from_op(out, (a,), _bw, "silu")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant; no gradient there."""
    mask = np.asarray(mask, dtype=bool)
    _check_const_shape(a, mask, "masked_fill")
    keep = ~mask
    out = np.where(mask, value, a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * keep,), "masked_fill")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported layouts: ``[..., m, k] @ [k, n]`` (shared weight) and
    ``[..., m, k] @ [..., k, n]`` with identical leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    if b.ndim == 2:
        def _bw(g):
            ga = np.matmul(g, bd.T) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def _bw(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
            return ga, gb

    return Tensor._from_op(out, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# Reductions, reshapes, indexing
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(out, dtype=DTYPE), (a,), _bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.shape
    basic = _is_basic_index(index)

    def _bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=DTYPE), (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(out, tensors, _bw, "concat")


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[...] = a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise DimensionError(f"gather_last: index shape {index.shape} vs tensor {a.shape}")
    idx = index[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return Tensor._from_op(out, (a,), _bw, "gather_last")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient scatters back via a one-hot product."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError(f"embedding weight must be 2-d, got {weight.shape}")
    n_rows = weight.shape[0]
    out = weight.data[ids]

    def _bw(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, n_rows), dtype=DTYPE)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(flat.size, -1),)

    return Tensor._from_op(out, (weight,), _bw, "embedding")


# ---------------------------------------------------------------------------
# Normalisations
# ---------------------------------------------------------------------------


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max-subtracted)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty axis")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def _bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), _bw, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax of an empty axis")
    e = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    e /= np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        return (e * (g - np.sum(g * e, axis=axis, keepdims=True)),)

    return Tensor._from_op(e, (a,), _bw, "softmax")


def causal_softmax(a: Tensor, scale: float = 1.0) -> Tensor:
    """Row softmax of ``scale * a`` over the last axis with future keys masked out.

    Entry ``[..., i, j]`` with ``j > i`` gets weight exactly 0 and no gradient.
    Equivalent to ``softmax(masked_fill(a * scale, triu(k=1), -inf))`` but
    computed in place.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"causal_softmax needs square trailing axes, got {a.shape}")
    L = a.shape[-1]
    e = a.data * scale
    e[..., np.triu(np.ones((L, L), dtype=bool), k=1)] = -np.inf
    e -= np.max(e, axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= np.sum(e, axis=-1, keepdims=True)

    def _bw(g):
        ga = g * e
        ga -= e * np.sum(ga, axis=-1, keepdims=True)
        if scale != 1.0:
            ga *= scale
        return (ga,)

    return Tensor._from_op(e, (a,), _bw, "causal_softmax")


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``a / rms(a) * gain`` over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != a.shape[-1]:
        raise DimensionError(f"rms_norm gain {gain.shape} does not match features of {a.shape}")
    ad, gd = a.data, gain.data
    n = ad.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(ad * ad, axis=-1, keepdims=True) + eps)
    normed = ad * inv
    out = normed * gd

    def _bw(g):
        ga = gg = None
        if gain.requires_grad:
            gg = np.sum((g * normed).reshape(-1, n), axis=0)
        if a.requires_grad:
            gn = g * gd
            ga = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        return ga, gg

    return Tensor._from_op(out, (a, gain), _bw, "rms_norm")


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    op_counts["backward"] += 1
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient reached a leaf of shape {node.shape}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{what} contains NaN or Inf")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autodiff and central differences.

    The error for one coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    ``max_coords`` restricts the comparison to a seeded random subset of
    coordinates, which keeps checks on large parameter tensors affordable.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)

    def value_at(arr):
        with no_grad():
            return float(f(Tensor(arr)).item())

    if value_at(base) != value_at(base):
        raise ContractError("finite_diff_check needs a deterministic function; freeze its randomness")

    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    coords = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        coords = np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False)

    flat = base.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        up = value_at(base)
        flat[c] = orig - eps
        down = value_at(base)
        flat[c] = orig
        numeric = (up - down) / (2.0 * eps)
        a = analytic.reshape(-1)[c]
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Array payload I/O
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` as concatenated little-endian float64 plus a JSON manifest.

    The payload goes to ``path`` (conventionally ``*.bin``); the manifest to the
    same path with a ``.json`` suffix. Returns the manifest path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name in arrays:
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"format": "f64-le", "arrays": entries, **(meta or {})}
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path.with_suffix(".json")
    if not path.is_file():
        raise FileNotFoundError(str(path))
    if not mpath.is_file():
        raise FileNotFoundError(str(mpath))
    manifest = json.loads(mpath.read_text())
    flat = np.fromfile(path, dtype="<f8")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = flat[e["offset"]: e["offset"] + n].astype(DTYPE).reshape(e["shape"])
    return arrays, manifest


def parameters_to_numpy(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))
