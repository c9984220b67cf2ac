"""A small reverse-mode autodiff engine over numpy arrays.

Parameters live in a :class:`ParameterStore` as float32 arrays. Activations
run in the current compute precision (float32 by default); log-softmax and
every ``sum``/``mean`` accumulate in float64, so losses and sequence
log-probabilities are 64-bit. The finite-difference checker switches the
whole graph to float64 so that ``h=1e-4`` is not swamped by round-off.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NumericsError, ShapeError

_COMPUTE = contextvars.ContextVar("compute_dtype", default=np.float32)


def compute_dtype():
    return _COMPUTE.get()


@contextlib.contextmanager
def precision(dtype):
    token = _COMPUTE.set(dtype)
    try:
        yield
    finally:
        _COMPUTE.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "op", "requires_grad")

    def __init__(self, data, parents=(), backward=None, op="const", requires_grad=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(compute_dtype())
        self.data = data
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward from node '{self.op}' needs a scalar, got shape {self.shape}")
        order = _topo(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        # python scalars follow the compute precision instead of promoting to float64
        return Tensor(np.asarray(x, dtype=compute_dtype()))
    return Tensor(x)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"node '{op}': cannot broadcast {a.shape} with {b.shape}") from None


# --- primitives -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data, (a, b), op="add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    out._backward = bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,), op="neg")
    out._backward = lambda g: _acc(a, -g)
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data, (a, b), op="mul")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"node 'matmul': inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), op="matmul")

    def bw(g):
        if b.data.ndim == 1:
            if a.requires_grad:
                _acc(a, g[..., None] * b.data)
            if b.requires_grad:
                _acc(b, a.data.reshape(-1, a.shape[-1]).T @ np.reshape(g, -1))
            return
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _acc(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out._backward = bw
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), (a,), op="sum")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    out._backward = bw
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"node 'reshape': cannot reshape {a.shape} to {shape}") from None
    out = Tensor(data, (a,), op="reshape")
    out._backward = lambda g: _acc(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), (a,), op="transpose")
    out._backward = lambda g: _acc(a, g.transpose(inv))
    return out


def index(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx], (a,), op="index")

    basic = all(isinstance(i, (int, slice)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _acc(a, full)

    out._backward = bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"node 'embedding': id out of range for table {table.shape}")
    out = Tensor(table.data[ids], (table,), op="embedding")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _acc(table, full)

    out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, (a,), op="exp")
    out._backward = lambda g: _acc(a, g * e)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,), op="log")
    out._backward = lambda g: _acc(a, g / a.data)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    out = Tensor(np.clip(a.data, lo, hi), (a,), op="clip")
    inside = (a.data >= lo) & (a.data <= hi)
    out._backward = lambda g: _acc(a, g * inside)
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _lift(a), _lift(b)
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data), (a, b), op="minimum")

    def bw(g):
        _acc(a, _unbroadcast(g * take_a, a.shape))
        _acc(b, _unbroadcast(g * ~take_a, b.shape))

    out._backward = bw
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.logaddexp(0.0, x), (a,), op="softplus")
    sig = np.exp(-np.logaddexp(0.0, -x))
    out._backward = lambda g: _acc(a, g * sig)
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    th = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = Tensor(0.5 * x * (1.0 + th), (a,), op="gelu")

    def bw(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x2)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner))

    out._backward = bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"node 'layer_norm': gain/bias {gamma.shape} do not match width {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta), op="layer_norm")

    def bw(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _acc(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            _acc(x, dx)

    out._backward = bw
    return out


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive constant (e.g. -inf for blocked keys)."""
    z = x.data if mask is None else x.data + mask.astype(x.data.dtype, copy=False)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (x,), op="softmax")

    def bw(g):
        _acc(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    out._backward = bw
    return out


def log_softmax(x: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """Fused log-softmax over the last axis.

    ``keep`` optionally restricts normalisation to a boolean subset of the
    last axis; excluded entries come out as -inf and receive no gradient.
    """
    z = x.data.astype(np.float64)
    if keep is not None:
        z = np.where(keep, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out_data = z - lse
    out = Tensor(out_data, (x,), op="log_softmax")

    def bw(g):
        p = np.exp(out_data)
        gg = np.where(np.isfinite(out_data), g, 0.0)
        _acc(x, gg - p * gg.sum(axis=-1, keepdims=True))

    out._backward = bw
    return out


def pick(logp: Tensor, ids: np.ndarray) -> Tensor:
    """Gather ``logp[..., ids]`` along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if logp.shape[:-1] != ids.shape:
        raise ShapeError(f"node 'pick': index shape {ids.shape} does not match {logp.shape[:-1]}")
    vals = np.take_along_axis(logp.data, ids[..., None], axis=-1)[..., 0]
    out = Tensor(vals, (logp,), op="pick")

    def bw(g):
        full = np.zeros_like(logp.data)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        _acc(logp, full)

    out._backward = bw
    return out


# --- parameter store --------------------------------------------------------

class ParameterStore:
    """Ordered, named float32 arrays with immutable shapes."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, step_count: int = 0,
                 meta: dict | None = None):
        self.entries: OrderedDict[str, np.ndarray] = OrderedDict()
        self.step_count = step_count
        # model kind and config, carried into checkpoints
        self.meta = dict(meta or {})
        for name, arr in (entries or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.entries[name] = np.ascontiguousarray(array, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float32)
        if value.shape != self.entries[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {value.shape} != {self.entries[name].shape}")
        self.entries[name] = np.ascontiguousarray(value)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def copy(self) -> ParameterStore:
        return ParameterStore({k: v.copy() for k, v in self.entries.items()}, self.step_count, dict(self.meta))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def equals(self, other: ParameterStore) -> bool:
        return list(self.entries) == list(other.entries) and all(
            np.array_equal(self.entries[k], other.entries[k]) for k in self.entries
        )


def leaves(store: ParameterStore, grad: bool = False) -> dict:
    """Lift a store's arrays to graph leaves in the current compute precision."""
    dt = compute_dtype()
    return {k: Tensor(np.asarray(v, dtype=dt), op=f"param:{k}", requires_grad=grad) for k, v in store.items()}


# --- graphs -----------------------------------------------------------------

GraphFn = Callable[[dict, dict], dict]


@dataclass
class Graph:
    """A differentiable computation: ``fn(params, inputs) -> {name: Tensor}``.

    ``params`` maps parameter names to float64 leaf tensors. The DAG is
    recorded on the fly by the primitives above, so it is acyclic by
    construction.
    """

    fn: GraphFn
    name: str = "graph"

    def build(self, store: ParameterStore, inputs: Mapping, params64: Mapping | None = None, grad: bool = False):
        """Evaluate the graph; ``params64`` overrides the store and forces float64 throughout."""
        if params64 is not None:
            with precision(np.float64):
                params = {k: Tensor(np.asarray(v, dtype=np.float64), op=f"param:{k}", requires_grad=grad)
                          for k, v in params64.items()}
                return params, self.fn(params, dict(inputs))
        params = leaves(store, grad)
        return params, self.fn(params, dict(inputs))


def forward(graph: Graph, store: ParameterStore, inputs: Mapping, params64: Mapping | None = None) -> dict:
    _, outputs = graph.build(store, inputs, params64)
    return {k: v.data for k, v in outputs.items()}


def backward(graph: Graph, store: ParameterStore, inputs: Mapping, loss: str = "loss",
             params64: Mapping | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Return ``(loss value, {param name: gradient})`` for a scalar output.

    Parameters that do not reach the loss get an all-zero gradient.
    """
    leaves, outputs = graph.build(store, inputs, params64, grad=True)
    node = outputs[loss]
    if node.data.size != 1:
        raise ShapeError(f"loss node '{loss}' is not scalar: shape {node.shape}")
    node.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(node.data.reshape(())), grads


# --- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    base_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore, base_lr: float, warmup_steps: int, **kw) -> OptimizerState:
        st = cls(base_lr=base_lr, warmup_steps=warmup_steps, **kw)
        for name, arr in store.items():
            st.m[name] = np.zeros_like(arr)
            st.v[name] = np.zeros_like(arr)
        return st

    def lr_at(self, t: int) -> float:
        if self.warmup_steps <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, t / self.warmup_steps)

    def copy(self) -> OptimizerState:
        return OptimizerState(self.base_lr, self.warmup_steps, self.beta1, self.beta2, self.eps, self.step,
                              {k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()})


def adam_step(store: ParameterStore, grads: Mapping[str, np.ndarray], opt: OptimizerState) -> ParameterStore:
    """One Adam update with linear learning-rate warm-up, applied in place.

    Raises NumericsError (leaving store and optimizer untouched) if any
    gradient or any updated parameter is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r}")
    t = opt.step + 1
    lr = opt.lr_at(t)
    b1, b2 = opt.beta1, opt.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = b1 * opt.m[name].astype(np.float64) + (1 - b1) * g
        v = b2 * opt.v[name].astype(np.float64) + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = store[name].astype(np.float64) - lr * mhat / (np.sqrt(vhat) + opt.eps)
        p32 = p.astype(np.float32)
        if not np.all(np.isfinite(p32)):
            raise NumericsError(f"update produced non-finite values in {name!r}")
        new_p[name], new_m[name], new_v[name] = p32, m.astype(np.float32), v.astype(np.float32)
    for name in new_p:
        store.entries[name] = new_p[name]
        opt.m[name] = new_m[name]
        opt.v[name] = new_v[name]
    opt.step = t
    store.step_count += 1
    return store


# --- gradient verification --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    rtol: float
    worst: tuple[str, tuple] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rtol


def finite_diff_check(graph: Graph, store: ParameterStore, inputs: Mapping, samples: int = 20,
                      h: float = 1e-4, rtol: float = 1e-3, loss: str = "loss", seed: int = 0,
                      atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences on random coordinates.

    Relative error is ``|a - n| / max(|a|, |n|)``; coordinates where both
    values are below ``atol`` count as exact agreement.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    params64 = {k: v.astype(np.float64) for k, v in store.items()}
    _, grads = backward(graph, store, inputs, loss, params64)
    rng = np.random.default_rng(seed)
    names = [k for k, v in params64.items() if v.size]
    sizes = np.array([params64[k].size for k in names], dtype=np.float64)
    worst, worst_at = 0.0, None
    for _ in range(samples):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = int(rng.integers(params64[name].size))
        coord = np.unravel_index(flat, params64[name].shape)
        orig = params64[name][coord]
        params64[name][coord] = orig + h
        up = float(forward(graph, store, inputs, params64)[loss])
        params64[name][coord] = orig - h
        down = float(forward(graph, store, inputs, params64)[loss])
        params64[name][coord] = orig
        num = (up - down) / (2 * h)
        ana = float(grads[name][coord])
        scale = max(abs(ana), abs(num))
        err = 0.0 if scale < atol else abs(ana - num) / scale
        if err > worst or worst_at is None:
            worst, worst_at = max(err, worst), (name, tuple(int(c) for c in coord))
    return GradCheckReport(worst, samples, rtol, worst_at)
