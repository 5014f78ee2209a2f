"""
Graph - minimal reverse-mode differentiation over dense float64 arrays.

Every elementary operation records a Node holding its value, its input nodes and a
vector-Jacobian closure. backward() walks the recorded DAG once in reverse topological
order and leaves d(root)/d(node) in node.adjoint.
"""

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GraphError

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_MIN = 1e-4
LOG_SIGMA_MIN = math.log(SIGMA_MIN)
LEAKY_SLOPE = 0.01

ArrayLike = Union[float, int, np.ndarray, Sequence[float]]


class Node:
    """A differentiable value (scalar, vector or matrix) in a recorded computation."""

    __slots__ = ("value", "adjoint", "parents", "op", "name", "requires_grad", "consumed", "_vjp")

    def __init__(
        self,
        value: ArrayLike,
        parents: Tuple["Node", ...] = (),
        op: str = "leaf",
        vjp: Optional[Callable[[np.ndarray], Tuple[np.ndarray, ...]]] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.adjoint = np.zeros_like(self.value)
        self.parents = parents
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self.consumed = False
        self._vjp = vjp

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return record("add", [self, lift(other)])

    def __radd__(self, other):
        return record("add", [lift(other), self])

    def __sub__(self, other):
        return record("sub", [self, lift(other)])

    def __rsub__(self, other):
        return record("sub", [lift(other), self])

    def __mul__(self, other):
        return record("mul", [self, lift(other)])

    def __rmul__(self, other):
        return record("mul", [lift(other), self])

    def __truediv__(self, other):
        return record("div", [self, lift(other)])

    def __rtruediv__(self, other):
        return record("div", [lift(other), self])

    def __neg__(self):
        return record("neg", [self])

    def __getitem__(self, index):
        return record("index", [self], index=index)


def lift(x: Union[Node, ArrayLike]) -> Node:
    return x if isinstance(x, Node) else Node(x)


def const(value: ArrayLike, name: Optional[str] = None) -> Node:
    """A constant leaf; never receives an adjoint."""
    return Node(value, name=name)


def parameter(value: ArrayLike, name: Optional[str] = None) -> Node:
    """A trainable leaf."""
    node = Node(value, requires_grad=True, name=name)
    if not np.all(np.isfinite(node.value)):
        raise GraphError(f"parameter {name!r}: non-finite initial value")
    return node


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------

ForwardFn = Callable[..., np.ndarray]
VjpFn = Callable[..., Tuple[Optional[np.ndarray], ...]]

_OPS: Dict[str, Tuple[ForwardFn, VjpFn]] = {}


def register_op(tag: str, forward: ForwardFn, vjp: VjpFn) -> None:
    """
    Register an elementary operation.

    forward(*values, **attrs) returns the output value; vjp(adjoint, out, *values, **attrs)
    returns one input adjoint per input (None for non-differentiable inputs).
    """
    _OPS[tag] = (forward, vjp)


def record(op: str, inputs: Sequence[Union[Node, ArrayLike]], **attrs) -> Node:
    """Evaluate `op` on `inputs` and record it for the backward pass."""
    if op not in _OPS:
        raise GraphError(f"unknown op {op!r}")
    forward, vjp = _OPS[op]
    nodes = tuple(lift(x) for x in inputs)
    values = [n.value for n in nodes]
    with np.errstate(all="ignore"):
        out = np.asarray(forward(*values, **attrs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise GraphError(f"{op}: non-finite output")
    requires_grad = any(n.requires_grad for n in nodes)
    if not requires_grad:
        return Node(out, op=op)

    def closure(adjoint: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return vjp(adjoint, out, *values, **attrs)

    return Node(out, parents=nodes, op=op, vjp=closure, requires_grad=True)


# -- elementary rules --------------------------------------------------------

def _check_log(x):
    if np.any(x <= 0.0):
        raise GraphError(f"log: non-positive input (min {float(np.min(x)):.3g})")
    return np.log(x)


def _check_sqrt(x):
    if np.any(x <= 0.0):
        raise GraphError(f"sqrt: non-positive input (min {float(np.min(x)):.3g})")
    return np.sqrt(x)


def _check_clamp(x, lo, hi):
    if lo > hi:
        raise GraphError(f"clamp: bounds out of order ({lo} > {hi})")
    return np.clip(x, lo, hi)


def _elu(x):
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _affine(x, W, b):
    return x @ W.T + b


def _affine_vjp(g, out, x, W, b):
    dx = g @ W
    if x.ndim == 1:
        dW = np.outer(g, x)
    else:
        dW = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return dx, dW, g


def _sum(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def _index_vjp(g, out, x, index=None):
    dx = np.zeros_like(x)
    if _is_basic_index(index):
        dx[index] += g
    else:
        np.add.at(dx, index, g)
    return (dx,)


def _take_rows(x, idx=None):
    return x[np.arange(x.shape[0]), idx]


def _take_rows_vjp(g, out, x, idx=None):
    dx = np.zeros_like(x)
    np.add.at(dx, (np.arange(x.shape[0]), idx), g)
    return (dx,)


def _log_softmax(x):
    shift = x - np.max(x, axis=-1, keepdims=True)
    return shift - np.log(np.sum(np.exp(shift), axis=-1, keepdims=True))


def _log_softmax_vjp(g, out, x):
    return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


def _concat(*xs, axis=-1):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, *xs, axis=-1):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _gaussian_logpdf(x, mu, log_sigma):
    z = (x - mu) * np.exp(-log_sigma)
    return np.sum(-0.5 * LOG_2PI - log_sigma - 0.5 * z * z, axis=-1)


def _gaussian_logpdf_vjp(g, out, x, mu, log_sigma):
    inv = np.exp(-log_sigma)
    z = (x - mu) * inv
    ge = np.expand_dims(g, -1)
    dx = -ge * z * inv
    return dx, -dx, ge * (z * z - 1.0)


register_op("add", lambda a, b: a + b, lambda g, o, a, b: (g, g))
register_op("sub", lambda a, b: a - b, lambda g, o, a, b: (g, -g))
register_op("mul", lambda a, b: a * b, lambda g, o, a, b: (g * b, g * a))
register_op("div", lambda a, b: a / b, lambda g, o, a, b: (g / b, -g * a / (b * b)))
register_op("neg", lambda a: -a, lambda g, o, a: (-g,))
register_op("square", lambda a: a * a, lambda g, o, a: (2.0 * g * a,))
register_op("exp", np.exp, lambda g, o, a: (g * o,))
register_op("log", _check_log, lambda g, o, a: (g / a,))
register_op("sqrt", _check_sqrt, lambda g, o, a: (0.5 * g / o,))
register_op("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),))
register_op("sigmoid", _sigmoid, lambda g, o, a: (g * o * (1.0 - o),))
register_op("elu", _elu, lambda g, o, a: (g * np.where(a > 0.0, 1.0, o + 1.0),))
register_op("relu", lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0.0),))
register_op(
    "leaky_relu",
    lambda a: np.where(a > 0.0, a, LEAKY_SLOPE * a),
    lambda g, o, a: (g * np.where(a > 0.0, 1.0, LEAKY_SLOPE),),
)
register_op("identity", lambda a: a, lambda g, o, a: (g,))
register_op("affine", _affine, _affine_vjp)
register_op("sum", _sum, _sum_vjp)
register_op("reshape", lambda x, shape=None: x.reshape(shape), lambda g, o, x, shape=None: (g.reshape(x.shape),))
register_op("max", np.maximum, lambda g, o, a, b: (g * (a >= b), g * (a < b)))
register_op(
    "clamp",
    lambda x, lo=-np.inf, hi=np.inf: _check_clamp(x, lo, hi),
    lambda g, o, x, lo=-np.inf, hi=np.inf: (g * ((x >= lo) & (x <= hi)),),
)
register_op("index", lambda x, index=None: x[index], _index_vjp)
register_op("take_rows", _take_rows, _take_rows_vjp)
register_op("log_softmax", _log_softmax, _log_softmax_vjp)
register_op("concat", _concat, _concat_vjp)
register_op("gaussian_logpdf", _gaussian_logpdf, _gaussian_logpdf_vjp)


# -- functional wrappers -------------------------------------------------------

def exp(x) -> Node:
    return record("exp", [x])


def log(x) -> Node:
    return record("log", [x])


def sqrt(x) -> Node:
    return record("sqrt", [x])


def square(x) -> Node:
    return record("square", [x])


def tanh(x) -> Node:
    return record("tanh", [x])


def sigmoid(x) -> Node:
    return record("sigmoid", [x])


def elu(x) -> Node:
    return record("elu", [x])


def relu(x) -> Node:
    return record("relu", [x])


def affine(W, b, x) -> Node:
    """x @ W.T + b; x may be a vector or a batch of row vectors."""
    return record("affine", [x, W, b])


def reduce_sum(x, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    return record("sum", [x], axis=axis, keepdims=keepdims)


def reshape(x, shape: Tuple[int, ...]) -> Node:
    return record("reshape", [x], shape=tuple(shape))


def mean(x, axis: Optional[int] = None) -> Node:
    x = lift(x)
    count = x.value.size if axis is None else x.value.shape[axis]
    return reduce_sum(x, axis) * (1.0 / count)


def maximum(a, b) -> Node:
    return record("max", [a, b])


def clamp(x, lo: float = -np.inf, hi: float = np.inf) -> Node:
    return record("clamp", [x], lo=lo, hi=hi)


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    return record("concat", list(xs), axis=axis)


def take_rows(x, idx: np.ndarray) -> Node:
    """x[i, idx[i]] for every row i."""
    return record("take_rows", [x], idx=np.asarray(idx, dtype=np.int64))


def log_softmax(x) -> Node:
    return record("log_softmax", [x])


def stop_gradient(x) -> Node:
    """ng(x): identity forward, zero derivative backward."""
    return Node(lift(x).value.copy(), op="stop_gradient")


def where(mask: np.ndarray, a, b) -> Node:
    """Row selection with a constant mask: mask*a + (1-mask)*b."""
    m = np.asarray(mask, dtype=np.float64)
    return lift(a) * m + lift(b) * (1.0 - m)


def gaussian_logpdf(x, mu, log_sigma) -> Node:
    """Diagonal Gaussian log-density summed over the last axis."""
    ls = lift(log_sigma)
    if np.any(ls.value < LOG_SIGMA_MIN - 1e-12):
        raise GraphError(
            f"gaussian_logpdf: sigma below floor {SIGMA_MIN} (min log_sigma {float(np.min(ls.value)):.3f})"
        )
    return record("gaussian_logpdf", [x, mu, ls])


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node, wrt: Optional[Iterable[Node]] = None) -> Dict[Node, np.ndarray]:
    """
    Propagate d(root)/d(.) to every node reachable from a scalar root.

    Returns the gradient map over trainable leaves (or over `wrt`, zero-filled for
    leaves the root does not depend on). A root can be propagated once; call
    reset(root) before propagating it again.
    """
    if root.value.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if root.consumed:
        raise GraphError("backward: already propagated from this root; call reset(root) first")

    order = _topological_order(root) if root.requires_grad else [root]
    for node in order:
        node.adjoint = np.zeros_like(node.value)
    root.adjoint = np.ones_like(root.value)

    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.adjoint)
        for parent, grad in zip(node.parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            parent.adjoint = parent.adjoint + _unbroadcast(np.asarray(grad, dtype=np.float64), parent.shape)
    root.consumed = True

    leaves = {node: node.adjoint for node in order if node.is_leaf and node.requires_grad}
    if wrt is None:
        return leaves
    return {p: leaves.get(p, np.zeros_like(p.value)) for p in wrt}


def reset(root: Node) -> None:
    """Zero the adjoints below `root` and allow another backward pass from it."""
    for node in _topological_order(root):
        node.adjoint = np.zeros_like(node.value)
    root.consumed = False


def flatten_grads(grads: Dict[Node, np.ndarray], params: Sequence[Node]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([grads.get(p, np.zeros_like(p.value)).reshape(-1) for p in params])


def flatten_values(params: Sequence[Node]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([p.value.reshape(-1) for p in params])


def unflatten(vector: np.ndarray, params: Sequence[Node]) -> List[np.ndarray]:
    out, offset = [], 0
    for p in params:
        size = p.value.size
        out.append(vector[offset:offset + size].reshape(p.shape))
        offset += size
    return out


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

ACTIVATIONS = ("tanh", "elu", "relu", "leaky_relu", "identity")


class DenseNet:
    """Multilayer perceptron over graph nodes: affine layers with a hidden activation."""

    def __init__(self, layers: List[Tuple[Node, Node]], activation: str = "elu", name: str = "net"):
        if activation not in ACTIVATIONS:
            raise GraphError(f"DenseNet: unknown activation {activation!r}")
        for i, (W, b) in enumerate(layers):
            if W.value.ndim != 2 or b.value.shape != (W.shape[0],):
                raise GraphError(f"DenseNet {name}: layer {i} weight/bias shapes {W.shape}/{b.shape}")
            if i > 0 and layers[i - 1][0].shape[0] != W.shape[1]:
                raise GraphError(f"DenseNet {name}: layer {i} does not compose with layer {i - 1}")
            if not (np.all(np.isfinite(W.value)) and np.all(np.isfinite(b.value))):
                raise GraphError(f"DenseNet {name}: non-finite parameters in layer {i}")
        self.layers = layers
        self.activation = activation
        self.name = name

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "elu",
        final_scale: float = 1.0,
        name: str = "net",
    ) -> "DenseNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; the last layer is scaled by final_scale."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            scale = final_scale if i == len(sizes) - 2 else 1.0
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in)) * scale
            b = rng.uniform(-bound, bound, size=(fan_out,)) * scale
            layers.append((parameter(W, f"{name}.{i}.weight"), parameter(b, f"{name}.{i}.bias")))
        return cls(layers, activation, name)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def __call__(self, x) -> Node:
        h = lift(x)
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = affine(W, b, h)
            if i < last and self.activation != "identity":
                h = record(self.activation, [h])
        return h

    def parameters(self) -> List[Node]:
        return [p for layer in self.layers for p in layer]

    def named_parameters(self) -> List[Tuple[str, Node]]:
        return [(p.name, p) for p in self.parameters()]

    def copy(self, name: Optional[str] = None) -> "DenseNet":
        name = name or self.name
        layers = [
            (parameter(W.value.copy(), f"{name}.{i}.weight"), parameter(b.value.copy(), f"{name}.{i}.bias"))
            for i, (W, b) in enumerate(self.layers)
        ]
        return DenseNet(layers, self.activation, name)


class GRUCell:
    """Single gated recurrent cell: h' = (1-u)*n + u*h with update/reset gates."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, name: str = "gru"):
        bound = 1.0 / math.sqrt(hidden_dim)
        self.name = name
        self.hidden_dim = hidden_dim
        joint = input_dim + hidden_dim

        def p(shape, tag):
            return parameter(rng.uniform(-bound, bound, size=shape), f"{name}.{tag}")

        self.W_gates = p((2 * hidden_dim, joint), "gates.weight")
        self.b_gates = p((2 * hidden_dim,), "gates.bias")
        self.W_in = p((hidden_dim, input_dim), "input.weight")
        self.W_hid = p((hidden_dim, hidden_dim), "hidden.weight")
        self.b_cand = p((hidden_dim,), "candidate.bias")
        self._zero = const(np.zeros(hidden_dim))

    def __call__(self, x, h) -> Node:
        x, h = lift(x), lift(h)
        gates = sigmoid(affine(self.W_gates, self.b_gates, concat([x, h])))
        H = self.hidden_dim
        update = gates[..., :H]
        reset_gate = gates[..., H:]
        candidate = tanh(
            affine(self.W_in, self.b_cand, x) + reset_gate * affine(self.W_hid, self._zero, h)
        )
        return (1.0 - update) * candidate + update * h

    def parameters(self) -> List[Node]:
        return [self.W_gates, self.b_gates, self.W_in, self.W_hid, self.b_cand]

    def named_parameters(self) -> List[Tuple[str, Node]]:
        return [(p.name, p) for p in self.parameters()]

    def copy(self, name: Optional[str] = None) -> "GRUCell":
        clone = object.__new__(GRUCell)
        clone.name = name or self.name
        clone.hidden_dim = self.hidden_dim
        for attr in ("W_gates", "b_gates", "W_in", "W_hid", "b_cand"):
            src = getattr(self, attr)
            setattr(clone, attr, parameter(src.value.copy(), src.name.replace(self.name, clone.name, 1)))
        clone._zero = const(np.zeros(self.hidden_dim))
        return clone


def polyak_update(target: Sequence[Node], source: Sequence[Node], tau: float) -> None:
    """target <- (1 - tau) * target + tau * source, in place."""
    for t, s in zip(target, source):
        t.value = (1.0 - tau) * t.value + tau * s.value
