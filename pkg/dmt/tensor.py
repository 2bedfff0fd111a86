"""
Dense tensors and reverse-mode automatic differentiation.

Values are float64 numpy arrays in row-major order. Every forward op returns a
``Node`` that remembers its parents and a closure producing the parents'
gradients; ``backward`` walks the graph in reverse topological order.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Tensor = np.ndarray  # float64, C-contiguous


class TensorEngineError(Exception):
    """Base error for the tensor engine"""


class ShapeError(TensorEngineError):
    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        message = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NonFiniteError(TensorEngineError):
    def __init__(self, op: str, detail: str = "non-finite input"):
        self.op = op
        super().__init__(f"{op}: {detail}")


class BackwardError(TensorEngineError):
    pass


def as_tensor(data) -> Tensor:
    """Convert to a contiguous float64 array"""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Node:
    """A value in the computation graph"""

    __slots__ = ("value", "grad", "op", "parents", "_backward", "requires_grad", "name", "_consumed")

    def __init__(self, value, op: str = "leaf", parents: Tuple["Node", ...] = (),
                 backward_fn: Optional[Callable[[Tensor], Sequence[Optional[Tensor]]]] = None,
                 requires_grad: bool = False, name: str = ""):
        self.value = as_tensor(value)
        self.grad: Optional[Tensor] = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # Operator sugar over forward_op
    def __add__(self, other):
        return forward_op("add", [self, _lift(other)])

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return forward_op("scalar_mul", [self], {"c": float(other)})
        return forward_op("mul", [self, _lift(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return forward_op("scalar_mul", [self], {"c": -1.0})

    def __sub__(self, other):
        return self + (-_lift(other))

    def __matmul__(self, other):
        return forward_op("matmul", [self, _lift(other)])


class Parameter(Node):
    """A trainable leaf; the only kind of leaf that receives gradients"""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, op="param", requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, op="const")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_finite(op: str, *values: Tensor) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(op)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape], "not broadcastable") from None


# ---------------------------------------------------------------------------
# Op implementations: each returns (value, backward_fn)
# ---------------------------------------------------------------------------

def _op_add(a: Node, b: Node):
    _broadcast_shape("add", a.value, b.value)
    out = a.value + b.value
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_mul(a: Node, b: Node):
    _broadcast_shape("mul", a.value, b.value)
    av, bv = a.value, b.value
    return av * bv, lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))


def _op_scalar_mul(a: Node, c: float):
    return a.value * c, lambda g: (g * c,)


def _op_matmul(a: Node, b: Node):
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError("matmul", [av.shape, bv.shape])
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError("matmul", [av.shape, bv.shape], "batch dims") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return out, backward


def _im2col(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, H, W, 9*C) patches for a 3x3 same-padded conv"""
    n, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [padded[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)


def _op_conv2d(x: Node, w: Node, b: Optional[Node] = None):
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.shape[:2] != (3, 3) or wv.ndim != 4 or wv.shape[2] != xv.shape[-1]:
        raise ShapeError("conv2d", [xv.shape, wv.shape], "expects (N,H,W,Cin) and (3,3,Cin,Cout)")
    if b is not None and b.shape != (wv.shape[3],):
        raise ShapeError("conv2d", [wv.shape, b.shape], "bias must be (Cout,)")
    n, h, width, cin = xv.shape
    cout = wv.shape[3]
    cols = _im2col(xv)
    kernel = wv.reshape(9 * cin, cout)
    out = cols @ kernel
    if b is not None:
        out = out + b.value

    def backward(g):
        gk = cols.reshape(-1, 9 * cin).T @ g.reshape(-1, cout)
        gcols = g @ kernel.T
        gpad = np.zeros((n, h + 2, width + 2, cin))
        k = 0
        for dy in range(3):
            for dx in range(3):
                gpad[:, dy:dy + h, dx:dx + width, :] += gcols[..., k * cin:(k + 1) * cin]
                k += 1
        grads = [gpad[:, 1:-1, 1:-1, :], gk.reshape(wv.shape)]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return grads

    return out, backward


def _op_relu(a: Node):
    mask = a.value > 0
    return a.value * mask, lambda g: (g * mask,)


def _op_exp(a: Node):
    _require_finite("exp", a.value)
    out = np.exp(a.value)
    return out, lambda g: (g * out,)


def _op_log(a: Node):
    _require_finite("log", a.value)
    if np.any(a.value <= 0):
        raise NonFiniteError("log", "input must be strictly positive")
    av = a.value
    return np.log(av), lambda g: (g / av,)


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _op_sum(a: Node, axis=None, keepdims: bool = False):
    axes = _normalize_axis(axis, a.value.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, backward


def _op_mean(a: Node, axis=None, keepdims: bool = False):
    axes = _normalize_axis(axis, a.value.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out, sum_backward = _op_sum(a, axis, keepdims)
    return out / count, lambda g: (sum_backward(g)[0] / count,)


def _op_l2_normalize(a: Node, axis: int = -1, eps: float = 1e-12):
    av = a.value
    norm = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    safe = np.where(norm > eps, norm, 1.0)
    out = np.where(norm > eps, av / safe, 0.0)

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * proj) / safe, 0.0),)

    return out, backward


def _op_softmax(a: Node, axis: int = -1):
    _require_finite("softmax", a.value)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, backward


def _op_log_softmax(a: Node, axis: int = -1):
    _require_finite("log_softmax", a.value)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return out, backward


def _op_reshape(a: Node, shape):
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from None
    return out, lambda g: (g.reshape(a.shape),)


def _op_transpose(a: Node, axes=None):
    axes = tuple(reversed(range(a.value.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError("transpose", [a.shape], f"bad axes {axes}")
    inverse = tuple(np.argsort(axes))
    return np.transpose(a.value, axes).copy(), lambda g: (np.transpose(g, inverse),)


def _op_slice(a: Node, key):
    out = a.value[key]

    def backward(g):
        full = np.zeros_like(a.value)
        full[key] += g
        return (full,)

    return np.array(out, dtype=np.float64), backward


def _op_concat(*nodes: Node, axis: int = 0):
    shapes = [n.shape for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", shapes) from None
    splits = np.cumsum([s[axis] for s in shapes])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=axis))


def _op_bce_logits(z: Node, target: Node):
    """Mean binary cross-entropy between sigmoid(z) and a {0,1} target"""
    zv, tv = z.value, target.value
    if zv.shape != tv.shape:
        raise ShapeError("bce_logits", [zv.shape, tv.shape])
    _require_finite("bce_logits", zv)
    per_pixel = np.maximum(zv, 0) - zv * tv + np.log1p(np.exp(-np.abs(zv)))
    sig = 1.0 / (1.0 + np.exp(-zv))
    count = zv.size
    return np.array(per_pixel.mean()), lambda g: (g * (sig - tv) / count, None)


_OPS: Dict[str, Callable] = {
    "add": _op_add,
    "mul": _op_mul,
    "scalar_mul": _op_scalar_mul,
    "matmul": _op_matmul,
    "conv2d": _op_conv2d,
    "relu": _op_relu,
    "exp": _op_exp,
    "log": _op_log,
    "sum": _op_sum,
    "mean": _op_mean,
    "l2_normalize": _op_l2_normalize,
    "softmax": _op_softmax,
    "log_softmax": _op_log_softmax,
    "reshape": _op_reshape,
    "transpose": _op_transpose,
    "slice": _op_slice,
    "concat": _op_concat,
    "bce_logits": _op_bce_logits,
}


def forward_op(kind: str, inputs: Sequence[Node], attrs: Optional[Dict] = None) -> Node:
    """
    Apply a differentiable op and record it in the graph

    Args:
        kind: op name, one of the keys of the op registry
        inputs: parent nodes
        attrs: op attributes (axis, shape, c, key, ...)

    Returns:
        Node: result carrying a backward closure
    """
    if kind not in _OPS:
        raise TensorEngineError(f"unknown op kind '{kind}'")
    attrs = attrs or {}
    parents = tuple(_lift(x) for x in inputs)
    value, backward_fn = _OPS[kind](*parents, **attrs)
    return Node(value, op=kind, parents=parents, backward_fn=backward_fn)


# Thin functional wrappers, so model code reads like ordinary math
def add(a, b): return forward_op("add", [a, b])
def mul(a, b): return forward_op("mul", [a, b])
def scalar_mul(a, c: float): return forward_op("scalar_mul", [a], {"c": float(c)})
def matmul(a, b): return forward_op("matmul", [a, b])
def relu(a): return forward_op("relu", [a])
def exp(a): return forward_op("exp", [a])
def log(a): return forward_op("log", [a])
def reshape(a, shape): return forward_op("reshape", [a], {"shape": tuple(shape)})
def transpose(a, axes=None): return forward_op("transpose", [a], {"axes": axes})
def slice_(a, key): return forward_op("slice", [a], {"key": key})
def concat(nodes, axis: int = 0): return forward_op("concat", list(nodes), {"axis": axis})
def softmax(a, axis: int = -1): return forward_op("softmax", [a], {"axis": axis})
def log_softmax(a, axis: int = -1): return forward_op("log_softmax", [a], {"axis": axis})
def l2_normalize(a, axis: int = -1): return forward_op("l2_normalize", [a], {"axis": axis})
def bce_logits(z, target): return forward_op("bce_logits", [z, target])


def conv2d(x, w, b=None) -> Node:
    inputs = [x, w] if b is None else [x, w, b]
    return forward_op("conv2d", inputs)


def tsum(a, axis=None, keepdims: bool = False) -> Node:
    return forward_op("sum", [a], {"axis": axis, "keepdims": keepdims})


def tmean(a, axis=None, keepdims: bool = False) -> Node:
    return forward_op("mean", [a], {"axis": axis, "keepdims": keepdims})


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> Dict[str, Tensor]:
    """
    Backpropagate from a scalar loss

    Args:
        loss: scalar node

    Returns:
        dict: parameter name -> gradient, for every reachable parameter
    """
    if loss.value.size != 1:
        raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("backward already ran on this graph; rebuild it or call zero_grad")
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("backward", "loss is not finite")

    order = _topological_order(loss)
    grads: Dict[int, Tensor] = {id(loss): np.ones_like(loss.value)}
    params: Dict[str, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = g if node.grad is None else node.grad + g
            params[node.name] = node.grad
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    loss._consumed = True
    return params


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def numerical_gradient(loss_fn: Callable[[], Node], param: Parameter, eps: float = 1e-5) -> Tensor:
    """Central finite differences of ``loss_fn`` with respect to ``param``"""
    original = param.value
    grad = np.zeros_like(original)
    flat = grad.reshape(-1)
    for i in range(original.size):
        bumped = original.copy().reshape(-1)
        bumped[i] += eps
        param.value = bumped.reshape(original.shape)
        plus = float(loss_fn().value)
        bumped[i] -= 2 * eps
        param.value = bumped.reshape(original.shape)
        minus = float(loss_fn().value)
        flat[i] = (plus - minus) / (2 * eps)
    param.value = original
    return grad


def gradient_check(loss_fn: Callable[[], Node], params: Sequence[Parameter], eps: float = 1e-5,
                   atol: float = 1e-8, perturb: float = 0.0) -> float:
    """
    Compare analytic and numerical gradients

    Args:
        loss_fn: builds a fresh graph and returns the scalar loss
        params: parameters to check
        eps: finite-difference step
        atol: absolute floor of the relative-error denominator
        perturb: added to the analytic gradient (fault injection)

    Returns:
        float: largest elementwise relative error
    """
    zero_grad(params)
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.value)) + perturb
        numeric = numerical_gradient(loss_fn, p, eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    zero_grad(params)
    return worst
