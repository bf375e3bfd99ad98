"""Dense-array numerics with define-by-run reverse-mode differentiation.

Every differentiable computation in the package is expressed with the ops in
this module. A :class:`Graph` records op nodes as they execute; leaves created
with :meth:`Graph.param` are the parameters that :meth:`Graph.backward`
returns gradients for. Ops whose inputs carry no graph run eagerly and record
nothing, which is how frozen models and finite-difference probes evaluate.

    g = Graph()
    w = g.param("w", np.ones((3, 2)))
    y = sum(swish(matmul(x, w)))
    grads = g.backward(y)          # {"w": array of shape (3, 2)}
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "GradientMap", "GradCheckReport",
    "NdgradError", "ShapeError", "UsageError", "NonFiniteError",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sqrt", "power",
    "sigmoid", "swish", "maximum", "sum", "mean", "broadcast_to", "reshape",
    "transpose", "concat", "getitem", "sin", "cos", "l2norm", "layernorm",
    "stop_gradient", "custom", "forward", "check_gradient", "corrupt_vjp",
    "precision", "get_default_dtype", "set_default_dtype", "make_rng",
    "reduce_gradients",
]

GradientMap = dict  # parameter name -> ndarray, same shape as the parameter

_default_dtype: type = np.float32
_corrupted: set[str] = set()


class NdgradError(Exception):
    """Base class for autodiff errors."""


class ShapeError(NdgradError, ValueError):
    pass


class UsageError(NdgradError, RuntimeError):
    pass


class NonFiniteError(NdgradError, FloatingPointError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the element type of newly created arrays."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def corrupt_vjp(kind: str) -> Iterator[None]:
    """Flip the sign of every VJP of op ``kind`` (negative control for gradchecks)."""
    _corrupted.add(kind)
    try:
        yield
    finally:
        _corrupted.discard(kind)


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for the stream named by ``(seed, *keys)``.

    Streams are derived with ``SeedSequence`` spawn keys, so any component can
    split off its own stream without consuming draws from another.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


def _asarray(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype != _default_dtype:
        a = a.astype(_default_dtype)
    return a


class Tensor:
    """An immutable array value, optionally attached to a recording graph."""

    __slots__ = ("value", "graph", "index")
    __array_priority__ = 100

    def __init__(self, value, graph: Graph | None = None, index: int = -1):
        self.value = value if isinstance(value, np.ndarray) else _asarray(value)
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" node={self.index}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]          # graph indices, -1 for constants
    vjp: Callable | None             # cotangent -> tuple of input cotangents
    name: str | None = None          # parameter name for leaves


class Graph:
    """Tape of op records in execution (hence topological) order.

    A graph is confined to one thread. Rebuild it every iteration.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}
        self._shapes: dict[str, tuple[int, ...]] = {}
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise UsageError(f"parameter {name!r} registered twice")
        arr = _asarray(value)
        self.params[name] = len(self.nodes)
        self._shapes[name] = arr.shape
        self.nodes.append(_Node("param", (), None, name))
        return Tensor(arr, self, len(self.nodes) - 1)

    def params_from(self, values: dict) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in values.items()}

    def kinds(self) -> set[str]:
        return {n.kind for n in self.nodes}

    def _record(self, kind, inputs: Sequence[Tensor], value, vjp) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"node {len(self.nodes)} ({kind}) produced a non-finite value")
        idx = tuple(t.index if t.graph is self else -1 for t in inputs)
        self.nodes.append(_Node(kind, idx, vjp))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, output: Tensor, cotangent=None) -> GradientMap:
        """Reverse-mode gradients of ``<cotangent, output>`` for every parameter."""
        if isinstance(output, Tensor) and output.graph is None:
            # fully disconnected (e.g. stop_gradient): a constant w.r.t. every parameter
            return {n: np.zeros(self._shapes[n], dtype=output.dtype) for n in self.params}
        if not isinstance(output, Tensor) or output.graph is not self:
            raise UsageError("backward() called on a value this graph did not record; run forward first")
        if cotangent is None:
            if output.value.size != 1:
                raise ShapeError(f"node {output.index}: cotangent required for non-scalar output {output.shape}")
            cot = np.ones_like(output.value)
        else:
            cot = np.asarray(cotangent, dtype=output.dtype)
            if cot.shape != output.shape:
                raise ShapeError(f"node {output.index}: cotangent shape {cot.shape} != output shape {output.shape}")
        grads: list = [None] * (output.index + 1)
        grads[output.index] = cot
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            in_grads = node.vjp(g)
            if node.kind in _corrupted:
                in_grads = tuple(None if x is None else -x for x in in_grads)
            for j, gj in zip(node.inputs, in_grads):
                if j < 0 or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out: GradientMap = {}
        for name, i in self.params.items():
            g = grads[i] if i < len(grads) else None
            if g is None:
                g = np.zeros(self._shapes[name], dtype=output.dtype)
            out[name] = np.asarray(g).reshape(self._shapes[name])
        return out


# --------------------------------------------------------------------------
# op plumbing

def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_asarray(x))


def _graph_of(inputs: Sequence[Tensor]) -> Graph | None:
    g = None
    for t in inputs:
        if t.graph is not None:
            if g is not None and t.graph is not g:
                raise UsageError("inputs belong to different graphs")
            g = t.graph
    return g


def _next_id(g: Graph | None) -> str:
    return f"node {len(g.nodes)}" if g is not None else "eager op"


def custom(kind: str, inputs: Sequence, value: np.ndarray, vjp: Callable) -> Tensor:
    """Record a fused op with a hand-written VJP.

    ``vjp(cotangent)`` must return one cotangent (or None) per input.
    """
    ins = [_t(x) for x in inputs]
    g = _graph_of(ins)
    if g is None:
        return Tensor(value)
    return g._record(kind, ins, value, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(kind, a, b, fn, vjp_a, vjp_b) -> Tensor:
    a, b = _t(a), _t(b)
    g = _graph_of((a, b))
    try:
        with np.errstate(over="ignore"):
            value = fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{_next_id(g)} ({kind}): {a.shape} vs {b.shape}: {exc}") from None
    if g is None:
        return Tensor(value)
    av, bv = a.value, b.value
    sa, sb = av.shape, bv.shape
    need_a, need_b = a.graph is g, b.graph is g

    def vjp(ct):
        ga = _unbroadcast(vjp_a(ct, av, bv, value), sa) if need_a else None
        gb = _unbroadcast(vjp_b(ct, av, bv, value), sb) if need_b else None
        return ga, gb

    return g._record(kind, (a, b), value, vjp)


def _unary(kind, x, value, local_vjp) -> Tensor:
    x = _t(x)
    if x.graph is None:
        return Tensor(value)
    return x.graph._record(kind, (x,), value, lambda ct: (local_vjp(ct),))


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda c, a, b, y: c, lambda c, a, b, y: c)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda c, a, b, y: c, lambda c, a, b, y: -c)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda c, a, b, y: c * b, lambda c, a, b, y: c * a)


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide,
                   lambda c, a, b, y: c / b, lambda c, a, b, y: -c * y / b)


def neg(x) -> Tensor:
    x = _t(x)
    return _unary("neg", x, -x.value, lambda c: -c)


def exp(x) -> Tensor:
    x = _t(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _unary("exp", x, y, lambda c: c * y)


def log(x) -> Tensor:
    x = _t(x)
    xv = x.value
    return _unary("log", x, np.log(xv), lambda c: c / xv)


def sqrt(x) -> Tensor:
    x = _t(x)
    y = np.sqrt(x.value)
    return _unary("sqrt", x, y, lambda c: c * 0.5 / y)


def power(x, p: float) -> Tensor:
    """``x ** p`` for a constant exponent."""
    x = _t(x)
    xv = x.value
    p = float(p)
    y = xv ** p
    if p == 2.0:
        return _unary("power", x, y, lambda c: c * 2.0 * xv)
    return _unary("power", x, y, lambda c: c * p * xv ** (p - 1.0))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows and is a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = _sigmoid_np(x.value)
    return _unary("sigmoid", x, y, lambda c: c * y * (1.0 - y))


def swish(x) -> Tensor:
    x = _t(x)
    xv = x.value
    s = _sigmoid_np(xv)
    y = xv * s
    return _unary("swish", x, y, lambda c: c * (s * (1.0 + xv * (1.0 - s))))


def swish_grad(x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of swish, as a plain array."""
    s = _sigmoid_np(x)
    return s * (1.0 + x * (1.0 - s))


def maximum(x, c: float) -> Tensor:
    """Elementwise ``max(x, c)`` against a constant; ties send gradient to ``x``."""
    x = _t(x)
    xv = x.value
    mask = xv >= c
    return _unary("maximum", x, np.where(mask, xv, np.asarray(c, xv.dtype)), lambda g: g * mask)


def sin(x) -> Tensor:
    x = _t(x)
    xv = x.value
    return _unary("sin", x, np.sin(xv), lambda c: c * np.cos(xv))


def cos(x) -> Tensor:
    x = _t(x)
    xv = x.value
    return _unary("cos", x, np.cos(xv), lambda c: -c * np.sin(xv))


def stop_gradient(x) -> Tensor:
    """Pass the value through as a constant; nothing flows back to ``x``."""
    return Tensor(_t(x).value)


# --------------------------------------------------------------------------
# linear algebra, reductions, shape ops

def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    g = _graph_of((a, b))
    try:
        value = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{_next_id(g)} (matmul): {a.shape} @ {b.shape}: {exc}") from None
    if g is None:
        return Tensor(value)
    av, bv = a.value, b.value
    need_a, need_b = a.graph is g, b.graph is g

    def vjp(ct):
        ga = gb = None
        if av.ndim == 1 and bv.ndim == 1:
            return (ct * bv if need_a else None), (ct * av if need_b else None)
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        c2 = ct
        if av.ndim == 1:
            c2 = np.expand_dims(c2, -2)
        if bv.ndim == 1:
            c2 = np.expand_dims(c2, -1)
        if need_a:
            ga = np.matmul(c2, np.swapaxes(b2, -1, -2))
            ga = _unbroadcast(ga, a2.shape).reshape(av.shape)
        if need_b:
            if a2.ndim > 2 and b2.ndim == 2:
                # fold batch dims into rows: one GEMM instead of a batched one
                gb = a2.reshape(-1, a2.shape[-1]).T @ c2.reshape(-1, c2.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a2, -1, -2), c2)
                gb = _unbroadcast(gb, b2.shape)
            gb = gb.reshape(bv.shape)
        return ga, gb

    return g._record("matmul", (a, b), value, vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _t(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    y = np.sum(x.value, axis=axes, keepdims=keepdims)
    if not isinstance(y, np.ndarray):
        y = np.asarray(y, dtype=x.dtype)

    def vjp(c):
        if not keepdims:
            c = np.expand_dims(c, axes)
        return np.broadcast_to(c, shape).copy()

    return _unary("sum", x, y, vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    n = int(np.prod([x.shape[a] for a in _norm_axis(axis, x.ndim)]))
    return mul(sum(x, axis, keepdims), 1.0 / max(n, 1))


def broadcast_to(x, shape) -> Tensor:
    x = _t(x)
    src = x.shape
    try:
        y = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeError(f"{_next_id(x.graph)} (broadcast): {src} -> {shape}: {exc}") from None
    return _unary("broadcast", x, y, lambda c: _unbroadcast(c, src))


def reshape(x, shape) -> Tensor:
    x = _t(x)
    src = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"{_next_id(x.graph)} (reshape): {src} -> {shape}: {exc}") from None
    return _unary("reshape", x, y, lambda c: c.reshape(src))


def transpose(x, axes=None) -> Tensor:
    x = _t(x)
    y = np.transpose(x.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _unary("transpose", x, y, lambda c: np.transpose(c, inv))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(x) for x in xs]
    g = _graph_of(ts)
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"{_next_id(g)} (concat): {[t.shape for t in ts]}: {exc}") from None
    if g is None:
        return Tensor(value)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(c):
        return tuple(np.split(c, splits, axis=axis))

    return g._record("concat", ts, value, vjp)


def getitem(x, idx) -> Tensor:
    """Basic slicing (including negative strides) with scatter-back VJP."""
    x = _t(x)
    src, dt = x.shape, x.dtype
    y = x.value[idx]

    def vjp(c):
        out = np.zeros(src, dtype=dt)
        np.add.at(out, idx, c) if _is_advanced(idx) else out.__setitem__(idx, c)
        return out

    return _unary("slice", x, np.array(y, copy=True) if np.ndim(y) else np.asarray(y), vjp)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def l2norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the VJP at a zero vector is taken as zero."""
    x = _t(x)
    xv = x.value
    n = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=True))
    y = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(c):
        if not keepdims:
            c = np.expand_dims(c, axis)
        safe = np.where(n > 0, n, 1.0)
        return c * np.where(n > 0, xv / safe, 0.0)

    return _unary("l2norm", x, y, vjp)


def layernorm(x, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` along ``axis``, without scale/shift."""
    x = _t(x)
    xv = x.value
    m = xv.mean(axis=axis, keepdims=True)
    c = xv - m
    inv = 1.0 / np.sqrt((c * c).mean(axis=axis, keepdims=True) + eps)
    y = c * inv

    def vjp(ct):
        return inv * (ct - ct.mean(axis=axis, keepdims=True) - y * (ct * y).mean(axis=axis, keepdims=True))

    return _unary("layernorm", x, y, vjp)


def layernorm_jvp(y: np.ndarray, inv: np.ndarray, tangent, axis: int = -1) -> Tensor:
    """Tangent of :func:`layernorm` given its output ``y`` and ``1/sqrt(var+eps)``."""
    tc = sub(tangent, mean(tangent, axis=axis, keepdims=True))
    return mul(sub(tc, mul(y, mean(mul(tc, y), axis=axis, keepdims=True))), inv)


# --------------------------------------------------------------------------
# drivers

def forward(fn: Callable, params: dict, *args, check_finite: bool = False, **kwargs):
    """Run ``fn(param_tensors, *args)`` under a fresh graph.

    Returns ``(graph, outputs)``; activations stay on the graph for backward.
    """
    g = Graph(check_finite=check_finite)
    out = fn(g.params_from(params), *args, **kwargs)
    return g, out


def reduce_gradients(maps: Iterable[GradientMap], average: bool = True) -> GradientMap:
    """Fixed-order (left fold) sum or mean of gradient maps."""
    maps = list(maps)
    if not maps:
        return {}
    out = {k: np.array(v, copy=True) for k, v in maps[0].items()}
    for m in maps[1:]:
        for k, v in m.items():
            out[k] = out[k] + v if k in out else np.array(v, copy=True)
    if average:
        for k in out:
            out[k] = out[k] / len(maps)
    return out


@dataclass
class GradCheckReport:
    name: str
    errors: dict[str, float]
    tol: float
    kinds: set[str] = field(default_factory=set)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"{status} {self.name}: max rel err {self.max_error:.3e} (tol {self.tol:g}, worst {worst})"


def check_gradient(
    fn: Callable[[dict], Tensor],
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-6,
    name: str = "check",
    seed: int = 0,
    max_elements: int | None = None,
) -> GradCheckReport:
    """Compare backward() of ``fn`` against central differences, in float64.

    The scalar probed is ``<c, fn(params)>`` for a fixed random cotangent ``c``.
    The error for a parameter is ``max_i |analytic_i - numeric_i|`` divided by
    the larger of the two gradients' max magnitudes (floored at 1e-12), so
    entries near zero do not dominate. ``max_elements`` samples a random subset
    of entries per parameter for large tensors.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        g, out = forward(fn, params, check_finite=True)
        cot = rng.standard_normal(out.shape)
        analytic = g.backward(out, cot)
        kinds = g.kinds()

        def probe(k, flat_i, delta):
            p = dict(params)
            arr = params[k].copy()
            arr.reshape(-1)[flat_i] += delta
            p[k] = arr
            y = fn({n: Tensor(v) for n, v in p.items()}).value
            if not np.all(np.isfinite(y)):
                raise NonFiniteError(f"{name}: non-finite output while perturbing {k}[{flat_i}]")
            return float(np.sum(cot * y))

        errors = {}
        for k, v in params.items():
            n = v.size
            idx = np.arange(n)
            if max_elements is not None and n > max_elements:
                idx = np.sort(rng.choice(n, size=max_elements, replace=False))
            num = np.array([(probe(k, i, step) - probe(k, i, -step)) / (2 * step) for i in idx])
            ana = analytic[k].reshape(-1)[idx]
            scale = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-12)
            errors[k] = float(np.abs(ana - num).max(initial=0.0) / scale)
    return GradCheckReport(name, errors, tol, kinds)
