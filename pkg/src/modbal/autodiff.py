"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the toy encoders, the fusion heads and the
losses are provided. Broadcasting is limited to the bias-add pattern: the
smaller operand's shape must be a trailing suffix of the larger one.

Usage::

    w = Tensor(np.ones((3, 2)), name="w")
    with Tape() as tape:
        loss = (x @ w).square().sum()
    grads = backward(loss, tape, [w])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class Tensor:
    """A float64 array, optionally linked to a node on the active tape.

    Tensors with a ``name`` act as differentiable leaves (parameters). Tensors
    produced by primitives under a tape carry that tape's node id.
    """

    __slots__ = ("data", "name", "node", "tape")

    def __init__(self, data: Any, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise ValueError(f"tensor shape entries must be >= 1, got {arr.shape}")
        self.data = arr
        self.name = name
        self.node: int | None = None
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.name = None
        t.node = None
        t.tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return apply_primitive("add", [self, as_tensor(other)])

    def __radd__(self, other):
        return apply_primitive("add", [as_tensor(other), self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [as_tensor(other), self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, as_tensor(other)])

    def __rmul__(self, other):
        return apply_primitive("mul", [as_tensor(other), self])

    def __truediv__(self, other):
        return apply_primitive("div", [self, as_tensor(other)])

    def __rtruediv__(self, other):
        return apply_primitive("div", [as_tensor(other), self])

    def __neg__(self):
        return apply_primitive("mul", [self, Tensor(-1.0)])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, as_tensor(other)])

    def __getitem__(self, key):
        return apply_primitive("slice", [self], {"key": key})

    def relu(self):
        return apply_primitive("relu", [self])

    def square(self):
        return apply_primitive("square", [self])

    def sqrt(self):
        return apply_primitive("sqrt", [self])

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": shape})

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_primitive("transpose", [self], {"axes": axes or None})


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    saved: Any
    attrs: dict | None
    leaf: Tensor | None = None


class Tape:
    """Records primitive applications for one backward pass.

    A tape is entered as a context manager; primitives applied while it is the
    innermost active tape are appended to ``nodes``. ``backward`` consumes it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, int] = {}
        self.consumed = False
        self.first_nonfinite: tuple[int, str] | None = None

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _node_for(self, t: Tensor) -> int | None:
        if t.tape is self:
            return t.node
        if t.name is None:
            return None
        nid = self._leaves.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), None, None, leaf=t))
            self._leaves[id(t)] = nid
        return nid

    def leaf_node(self, t: Tensor) -> int | None:
        return self._leaves.get(id(t))


class no_tape:
    """Context manager that suspends gradient recording."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# primitive registry


_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _primitive(kind: str):
    def register(pair):
        fwd, bwd = pair()
        _FORWARD[kind] = fwd
        _BACKWARD[kind] = bwd
        return pair

    return register


PRIMITIVES = (
    "add", "sub", "mul", "div", "matmul", "relu", "softmax_lastdim",
    "layernorm_lastdim", "sum", "mean", "sqrt", "square", "l2norm_lastdim",
    "concat_lastdim", "slice", "transpose", "broadcast", "reshape",
)


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the active tape, if any."""
    try:
        fwd = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    inputs = [as_tensor(t) for t in inputs]
    out, saved = fwd([t.data for t in inputs], attrs or {})
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        ids = tuple(tape._node_for(t) for t in inputs)
        result.node = len(tape.nodes)
        result.tape = tape
        tape.nodes.append(Node(kind, ids, saved, attrs))
        if tape.first_nonfinite is None and not np.isfinite(out).all():
            tape.first_nonfinite = (result.node, kind)
    return result


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _check_bias(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if _is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape):
        return
    raise ShapeError(op, a.shape, b.shape, detail="only trailing-dim broadcasting is supported")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


@_primitive("add")
def _add():
    def fwd(x, attrs):
        a, b = x
        _check_bias("add", a, b)
        return a + b, (a.shape, b.shape)

    def bwd(g, saved, attrs):
        sa, sb = saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return fwd, bwd


@_primitive("sub")
def _sub():
    def fwd(x, attrs):
        a, b = x
        _check_bias("sub", a, b)
        return a - b, (a.shape, b.shape)

    def bwd(g, saved, attrs):
        sa, sb = saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return fwd, bwd


@_primitive("mul")
def _mul():
    def fwd(x, attrs):
        a, b = x
        _check_bias("mul", a, b)
        return a * b, (a, b)

    def bwd(g, saved, attrs):
        a, b = saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_primitive("div")
def _div():
    def fwd(x, attrs):
        a, b = x
        _check_bias("div", a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b, (a, b)

    def bwd(g, saved, attrs):
        a, b = saved
        with np.errstate(divide="ignore", invalid="ignore"):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

    return fwd, bwd


@_primitive("matmul")
def _matmul():
    def fwd(x, attrs):
        a, b = x
        ok = (
            a.ndim >= 2
            and b.ndim >= 2
            and a.shape[-1] == b.shape[-2]
            and (b.ndim == 2 or a.shape[:-2] == b.shape[:-2])
        )
        if not ok:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b, (a, b)

    def bwd(g, saved, attrs):
        a, b = saved
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb

    return fwd, bwd


@_primitive("relu")
def _relu():
    def fwd(x, attrs):
        (a,) = x
        return np.maximum(a, 0.0), a > 0

    def bwd(g, mask, attrs):
        return (g * mask,)

    return fwd, bwd


@_primitive("softmax_lastdim")
def _softmax():
    def fwd(x, attrs):
        (a,) = x
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def bwd(g, y, attrs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return fwd, bwd


@_primitive("layernorm_lastdim")
def _layernorm():
    def fwd(x, attrs):
        (a,) = x
        mu = a.mean(axis=-1, keepdims=True)
        centered = a - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = centered * inv
        return xhat, (xhat, inv)

    def bwd(g, saved, attrs):
        xhat, inv = saved
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return fwd, bwd


def _reduce_fwd(reducer):
    def fwd(x, attrs):
        (a,) = x
        axis = attrs.get("axis")
        keepdims = attrs.get("keepdims", False)
        return reducer(a, axis=axis, keepdims=keepdims), a.shape

    return fwd


def _expand_back(g, shape, attrs):
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@_primitive("sum")
def _sum():
    def bwd(g, shape, attrs):
        return (_expand_back(g, shape, attrs),)

    return _reduce_fwd(np.sum), bwd


@_primitive("mean")
def _mean():
    def bwd(g, shape, attrs):
        axis = attrs.get("axis")
        if axis is None:
            count = int(np.prod(shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([shape[ax] for ax in axes]))
        return (_expand_back(g, shape, attrs) / count,)

    return _reduce_fwd(np.mean), bwd


@_primitive("sqrt")
def _sqrt():
    def fwd(x, attrs):
        (a,) = x
        with np.errstate(invalid="ignore"):
            y = np.sqrt(a)
        return y, y

    def bwd(g, y, attrs):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (2.0 * y),)

    return fwd, bwd


@_primitive("square")
def _square():
    def fwd(x, attrs):
        (a,) = x
        return a * a, a

    def bwd(g, a, attrs):
        return (2.0 * a * g,)

    return fwd, bwd


@_primitive("l2norm_lastdim")
def _l2norm():
    def fwd(x, attrs):
        (a,) = x
        n = np.sqrt((a * a).sum(axis=-1))
        return n, (a, n)

    def bwd(g, saved, attrs):
        a, n = saved
        # subgradient 0 at the origin so a perfect prediction has zero gradient
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (a * scale[..., None],)

    return fwd, bwd


@_primitive("concat_lastdim")
def _concat():
    def fwd(x, attrs):
        lead = x[0].shape[:-1]
        for a in x[1:]:
            if a.shape[:-1] != lead:
                raise ShapeError("concat_lastdim", *(a.shape for a in x))
        widths = [a.shape[-1] for a in x]
        return np.concatenate(x, axis=-1), widths

    def bwd(g, widths, attrs):
        cuts = np.cumsum(widths)[:-1]
        return tuple(np.split(g, cuts, axis=-1))

    return fwd, bwd


@_primitive("slice")
def _slice():
    def fwd(x, attrs):
        (a,) = x
        key = attrs["key"]
        parts = key if isinstance(key, tuple) else (key,)
        if not all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts):
            raise ShapeError("slice", a.shape, detail="only basic int/slice indexing is supported")
        out = a[key]
        if out.size == 0:
            raise ShapeError("slice", a.shape, detail=f"empty selection {key!r}")
        return np.asarray(out), a.shape

    def bwd(g, shape, attrs):
        z = np.zeros(shape)
        z[attrs["key"]] = g
        return (z,)

    return fwd, bwd


@_primitive("transpose")
def _transpose():
    def fwd(x, attrs):
        (a,) = x
        axes = attrs.get("axes")
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
        return np.transpose(a, axes), axes

    def bwd(g, axes, attrs):
        return (np.transpose(g, np.argsort(axes)),)

    return fwd, bwd


@_primitive("broadcast")
def _broadcast():
    def fwd(x, attrs):
        (a,) = x
        shape = tuple(attrs["shape"])
        if not _is_suffix(a.shape, shape):
            raise ShapeError("broadcast", a.shape, shape, detail="target must extend leading dims")
        return np.broadcast_to(a, shape), a.shape

    def bwd(g, shape, attrs):
        return (_unbroadcast(g, shape),)

    return fwd, bwd


@_primitive("reshape")
def _reshape():
    def fwd(x, attrs):
        (a,) = x
        try:
            return a.reshape(attrs["shape"]), a.shape
        except ValueError:
            raise ShapeError("reshape", a.shape, tuple(attrs["shape"])) from None

    def bwd(g, shape, attrs):
        return (g.reshape(shape),)

    return fwd, bwd


# ---------------------------------------------------------------------------
# functional aliases


def add(a, b): return apply_primitive("add", [a, b])
def sub(a, b): return apply_primitive("sub", [a, b])
def mul(a, b): return apply_primitive("mul", [a, b])
def div(a, b): return apply_primitive("div", [a, b])
def matmul(a, b): return apply_primitive("matmul", [a, b])
def relu(a): return apply_primitive("relu", [a])
def softmax_lastdim(a): return apply_primitive("softmax_lastdim", [a])
def layernorm_lastdim(a): return apply_primitive("layernorm_lastdim", [a])
def sqrt(a): return apply_primitive("sqrt", [a])
def square(a): return apply_primitive("square", [a])
def l2norm_lastdim(a): return apply_primitive("l2norm_lastdim", [a])
def concat_lastdim(parts): return apply_primitive("concat_lastdim", list(parts))


def broadcast(a, shape): return apply_primitive("broadcast", [a], {"shape": tuple(shape)})


# ---------------------------------------------------------------------------
# gradients


GradientMap = dict  # parameter name -> ndarray shaped like the parameter


def _named(params: Iterable[Tensor] | Mapping[str, Tensor]) -> list[Tensor]:
    items = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in items:
        if p.name is None:
            raise ValueError("gradients can only be requested for named tensors")
    return items


def backward(loss: Tensor, tape: Tape, params) -> GradientMap:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a gradient for every requested parameter; parameters the loss does
    not depend on get explicit zeros. The tape cannot be reused afterwards.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape was already consumed by a previous backward call")
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss was not recorded on this tape")

    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.node] = np.ones(())
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.kind == "leaf":
            continue
        in_grads = _BACKWARD[node.kind](g, node.saved, node.attrs or {})
        for nid, ig in zip(node.inputs, in_grads):
            if nid is None:
                continue
            grads[nid] = ig if grads[nid] is None else grads[nid] + ig

    out: GradientMap = {}
    for p in _named(params):
        nid = tape.leaf_node(p)
        g = grads[nid] if nid is not None else None
        out[p.name] = np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)

    tape.consumed = True
    for node in nodes:
        node.saved = None
    return out


def finite_diff_gradient(fn: Callable[[], Any], params, eps: float = 1e-5) -> GradientMap:
    """Central-difference gradient of ``fn()`` with respect to ``params``.

    ``fn`` is re-evaluated with each coordinate nudged in place; the original
    values are restored bit-exactly afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def value() -> float:
        v = fn()
        return float(v.data) if isinstance(v, Tensor) else float(v)

    out: GradientMap = {}
    with no_tape():
        for p in _named(params):
            g = np.zeros(p.shape)
            for idx in np.ndindex(*p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + eps
                hi = value()
                p.data[idx] = orig - eps
                lo = value()
                p.data[idx] = orig
                g[idx] = (hi - lo) / (2.0 * eps)
            out[p.name] = g
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest coordinate error, scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
