"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` values in
execution order, so the node list is already topologically sorted. Calling
:func:`backward` walks it in reverse and accumulates vector-Jacobian
products into the leaves.

Example::

    tape = Tape()
    x = tape.variable(np.array([3.0]))
    grads = backward(tape, (x * x).sum())
    grads[x]  # array([6.])
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out dimensions that numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """A value recorded on a tape.

    Vars are immutable once created; every operation returns a new Var.
    """

    __slots__ = ("value", "tape", "parents", "requires_grad", "trainable")
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape", parents=(), requires_grad=False, trainable=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.requires_grad = requires_grad
        self.trainable = trainable

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive operations.

    ``nodes`` holds every Var created on the tape, leaves included, in
    creation order. ``params`` lists the leaves marked trainable.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: list[Var] = []

    def variable(self, value, trainable: bool = False) -> Var:
        value = np.array(value, dtype=np.float64)
        _check_finite(value, "variable")
        var = Var(value, self, requires_grad=True, trainable=trainable)
        self.nodes.append(var)
        if trainable:
            self.params.append(var)
        return var

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def record(self, value: np.ndarray, parents: Sequence[tuple[Var, Callable]], op: str) -> Var:
        _check_finite(value, op)
        live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        var = Var(value, self, parents=live, requires_grad=bool(live))
        if live:
            self.nodes.append(var)
        return var


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    if tape is None:
        raise TypeError("at least one operand must be a Var")
    return tape


def _lift(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def backward(tape: Tape, loss: Var) -> dict[Var, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf variable on ``tape``.

    Leaves the loss does not depend on map to zeros.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves = []
    for node in reversed(tape.nodes):
        if not node.parents:
            leaves.append(node)
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution
    out = {}
    for leaf in reversed(leaves):
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.value) if g is None else np.broadcast_to(g, leaf.shape).copy()
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    return tape.record(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    return tape.record(
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))],
        "sub",
    )


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    return tape.record(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
        "mul",
    )


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = a.value / b.value
    return tape.record(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
        ],
        "div",
    )


def matmul(a, b) -> Var:
    """Matrix product of a (n, k) or (k,) operand with a (k, m) operand."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def grad_a(g):
        return g @ b.value.T

    def grad_b(g):
        if a.ndim == 1:
            return np.outer(a.value, g)
        return a.value.T @ g

    return tape.record(a.value @ b.value, [(a, grad_a), (b, grad_b)], "matmul")


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return x.tape.record(out, [(x, lambda g: g * (1.0 - out * out))], "tanh")


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return x.tape.record(out, [(x, lambda g: g * out)], "exp")


def log(x: Var) -> Var:
    return x.tape.record(np.log(x.value), [(x, lambda g: g / x.value)], "log")


def sqrt(x: Var) -> Var:
    out = np.sqrt(x.value)
    return x.tape.record(out, [(x, lambda g: g * 0.5 / out)], "sqrt")


def square(x: Var) -> Var:
    return x.tape.record(x.value * x.value, [(x, lambda g: 2.0 * g * x.value)], "square")


def vsum(x: Var, axis=None, keepdims=False) -> Var:
    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape)

    return x.tape.record(x.value.sum(axis=axis, keepdims=keepdims), [(x, grad)], "sum")


def vmean(x: Var, axis=None, keepdims=False) -> Var:
    count = x.value.size if axis is None else x.shape[axis]
    return vsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def getitem(x: Var, index) -> Var:
    def grad(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return out

    return x.tape.record(x.value[index], [(x, grad)], "getitem")


def concat(xs: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    values = [x.value for x in xs]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return tape.record(out, [(x, make(i)) for i, x in enumerate(xs)], "concat")


def clamp(x: Var, lo, hi) -> Var:
    """Element-wise clamp to ``[lo, hi]``.

    The derivative is 1 strictly inside the interval and 0 on the
    boundary or outside it.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.minimum(np.maximum(x.value, lo), hi)
    inside = (x.value > lo) & (x.value < hi)
    return x.tape.record(out, [(x, lambda g: _unbroadcast(g * inside, x.shape))], "clamp")


def norm(x: Var, axis: int = -1) -> Var:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    out = np.sqrt(np.sum(x.value * x.value, axis=axis))

    def grad(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return np.expand_dims(scale, axis) * x.value

    return x.tape.record(out, [(x, grad)], "norm")


def log_softmax(x: Var, axis: int = -1) -> Var:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad(g):
        return g - soft * g.sum(axis=axis, keepdims=True)

    return x.tape.record(out, [(x, grad)], "log_softmax")


def activate(x: Var, act: str) -> Var:
    if act == "tanh":
        return tanh(x)
    if act == "identity":
        return x
    raise ValueError(f"unknown activation {act!r}")


# ---------------------------------------------------------------------------
# multilayer perceptron


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    act: str = "tanh"


class Mlp:
    """Dense feed-forward network, ``y = act(x @ W + b)`` per layer."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")
        for layer in layers:
            if layer.act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.act!r}")
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ValueError("bias does not match weight columns")
        self.layers = layers

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, hidden_act="tanh", out_act="identity"):
        """Glorot-style random init for a network with layer sizes ``dims``."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            act = out_act if i == len(dims) - 2 else hidden_act
            layers.append(Layer(rng.normal(0.0, scale, (fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases in layer order (live references)."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def __call__(self, x, stop: int | None = None) -> np.ndarray:
        """Tape-free forward pass through the first ``stop`` layers."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.input_dim:
            raise ValueError(f"input last dimension {h.shape[-1]} != {self.input_dim}")
        for layer in self.layers[:stop]:
            h = h @ layer.weight + layer.bias
            if layer.act == "tanh":
                h = np.tanh(h)
        return h

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.act) for l in self.layers])

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"w": l.weight.tolist(), "b": l.bias.tolist(), "act": l.act} for l in self.layers
            ],
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        layers = [
            Layer(
                np.array(l["w"], dtype=np.float64).reshape(len(l["w"]), -1),
                np.array(l["b"], dtype=np.float64),
                l["act"],
            )
            for l in doc["layers"]
        ]
        mlp = cls(layers)
        if mlp.input_dim != doc["input_dim"] or mlp.output_dim != doc["output_dim"]:
            raise ValueError("declared dimensions disagree with layer shapes")
        return mlp

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Mlp":
        return cls.from_dict(json.loads(text))


def forward(mlp: Mlp, x, tape: Tape | None = None, trainable: bool = False, stop: int | None = None):
    """Run ``mlp`` on ``x``.

    Without a tape this is a plain numpy evaluation. With a tape the
    computation is recorded; ``trainable=True`` registers the weights as
    trainable leaves (appended to ``tape.params`` in :meth:`Mlp.arrays`
    order), otherwise they enter as constants.
    """
    if tape is None:
        return mlp(x.value if isinstance(x, Var) else x, stop=stop)
    h = x if isinstance(x, Var) else tape.constant(x)
    if h.shape[-1] != mlp.input_dim:
        raise ValueError(f"input last dimension {h.shape[-1]} != {mlp.input_dim}")
    for layer in mlp.layers[:stop]:
        if trainable:
            w = tape.variable(layer.weight, trainable=True)
            b = tape.variable(layer.bias, trainable=True)
        else:
            w, b = layer.weight, layer.bias
        h = activate(matmul(h, w) + b, layer.act)
    return h


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Momentum SGD: ``v = momentum * v + g; p -= lr * v``.

    Updates the given arrays in place; velocity buffers persist between
    calls to :meth:`step`.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("number of gradients does not match parameters")
        for p, g, v in zip(self.params, grads, self.velocity):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            v *= self.momentum
            v += g
            p -= self.lr * v


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """Functional momentum-SGD step.

    Returns ``(new_params, new_velocity)``; pass the velocity back in on the
    next call to carry momentum.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


class Adam:
    """Adam with bias correction, updating arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v, strict=True):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(params, lr, momentum)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
