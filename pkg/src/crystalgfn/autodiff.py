"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``backward`` walks the recorded graph in reverse
topological order. Values are float64 numpy arrays; a tensor's ``data`` is
never mutated in place after creation (optimizers swap in new arrays).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse, special

# Guard used by log/div call sites; inputs are clamped to at least this value.
EPS = 1e-12

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling-only rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor's reflected method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op, allow_nonfinite=False) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not allow_nonfinite and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    # denominators are not clamped here; callers guard with EPS where zero is possible
    out = a.data / b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


# -- elementwise unary --------------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(
        a.data ** exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),), "pow",
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log; inputs clamped below at EPS so log(0) stays finite."""
    a = as_tensor(a)
    x = np.maximum(a.data, EPS)
    return Tensor._make(np.log(x), (a,), lambda g: (g * (a.data > EPS) / x,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return Tensor._make(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    return Tensor._make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


# -- reductions and shape ops -------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return Tensor._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(a.data[index], (a,), backward, "getitem")


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """out[idx[k]] += values[k] via a sparse product (much faster than np.add.at)."""
    if len(idx) == 0:
        return np.zeros((n_rows,) + values.shape[1:])
    m = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n_rows, len(idx)))
    flat = values.reshape(len(idx), -1)
    return np.asarray(m @ flat).reshape((n_rows,) + values.shape[1:])


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]`` (the message-passing gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    n = a.shape[0]
    return Tensor._make(a.data[idx], (a,), lambda g: (_scatter_rows(idx, g, n),), "take_rows")


def take_along(a, idx) -> Tensor:
    """Select ``a[i, idx[i]]`` for every row i of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    return getitem(a, (np.arange(a.shape[0]), idx))


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp).reshape(-1)
    out = _scatter_rows(segment_ids, a.data, num_segments)
    return Tensor._make(out, (a,), lambda g: (g[segment_ids],), "segment_sum")


def segment_mean(a, segment_ids, num_segments: int) -> Tensor:
    """Mean per segment; empty segments yield zero rows."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return segment_sum(a, segment_ids, num_segments) * inv.reshape((-1,) + (1,) * (as_tensor(a).ndim - 1))


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = special.logsumexp(a.data, axis=axis, keepdims=True)

    def backward(g):
        return (np.expand_dims(g, axis) * np.exp(a.data - out),)

    return Tensor._make(np.squeeze(out, axis=axis), (a,), backward, "logsumexp")


def log_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax over the last axis.

    ``mask`` marks allowed entries; disallowed entries get log-probability
    -inf (zero mass) and receive no gradient.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("every row of the mask must allow at least one entry")
        x = np.where(mask, x, -np.inf)
    out = x - special.logsumexp(x, axis=-1, keepdims=True)
    p = np.exp(out)

    def backward(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (a,), backward, "log_softmax", allow_nonfinite=mask is not None)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(
        np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
        "where",
    )


# -- backward -----------------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar output.

    Returns a map ``id(leaf) -> gradient`` for every leaf that requires a
    gradient; with ``accumulate`` the gradients are also added to ``leaf.grad``.
    """
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_topological(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            if accumulate:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient flowing out of op '{node.op}'")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def grad(output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``params`` (zeros where unused)."""
    leaves = backward(output, accumulate=False)
    return [leaves.get(id(p), np.zeros_like(p.data)) for p in params]


# -- gradient checking --------------------------------------------------------
@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float
    checked: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} over {self.checked} entries (tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Component-wise |a-n| / max(|a|, |n|, floor).

    The floor keeps components whose true value is ~0 from being judged on
    round-off alone.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    function: Callable[[Sequence[Tensor]], Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    indices: Sequence[tuple[int, int]] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``function`` takes a list of tensors and returns a scalar tensor. ``point``
    is one array or a list of arrays. ``indices`` optionally restricts the
    check to (argument, flat index) pairs.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic_all = grad(function(leaves), leaves)
    if indices is None:
        indices = [(k, i) for k, a in enumerate(arrays) for i in range(a.size)]

    def value(k, i, delta):
        shifted = [a.copy() for a in arrays]
        shifted[k].reshape(-1)[i] += delta
        with no_grad():
            return function([Tensor(a) for a in shifted]).item()

    analytic = np.array([analytic_all[k].reshape(-1)[i] for k, i in indices])
    numeric = np.array([(value(k, i, step) - value(k, i, -step)) / (2.0 * step) for k, i in indices])
    errs = relative_error(analytic, numeric)
    max_err = float(errs.max()) if errs.size else 0.0
    return GradCheckReport(max_err < tolerance, max_err, analytic, numeric, tolerance, len(indices))


# -- optimizer ----------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr_overrides: dict[str, float] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update; returns new parameter arrays and advances ``state``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for '{name}'")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        lr = state.lr_overrides.get(name, state.lr)
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


class Adam:
    """Adam over named leaf tensors; per-name learning-rate overrides."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, lr_overrides: dict[str, float] | None = None):
        self.params = params
        self.state = AdamState(lr=lr, lr_overrides=dict(lr_overrides or {}))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        current = {k: t.data for k, t in self.params.items()}
        new = adam_step(current, grads, self.state)
        for k, t in self.params.items():
            t.data = new[k]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.state.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.state.v.items()})
        out["adam.step"] = np.array(float(self.state.step))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["adam.step"])
        self.state.m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        self.state.v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}


def total_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))
