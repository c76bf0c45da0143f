"""Small reverse-mode autodiff over 2-D numpy arrays, plus the MLP,
Gaussian/Bernoulli and optimiser utilities the agent is built from.

Every differentiable value is a :class:`Tensor` recorded on a :class:`Tape`.
Parameters enter a tape through :meth:`Tape.param`, which hands back the same
leaf for repeated uses of one parameter so gradients accumulate correctly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_P = 1e-6
LOG_2PI_E = math.log(2.0 * math.pi * math.e)


class NumericalError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "tape", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None, name=None, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every op goes through the module-level functions
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, cols):
        return take_cols(self, cols)

    def detach(self) -> "Tensor":
        return Tensor(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations in creation order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.masks: list[np.ndarray] = []
        self.consumed = False

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = self.params.get(name)
        if t is None:
            t = Tensor(value, requires_grad=True, name=name, tape=self)
            self.params[name] = t
        return t

    def watch(self, value) -> Tensor:
        """Leaf that should receive a gradient but is not a named parameter."""
        return Tensor(value, requires_grad=True, tape=self)


def _check(value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericalError("non-finite value produced in forward pass")
    return value


def _make(value, parents: tuple, backward: Callable) -> Tensor:
    value = _check(value)
    tape = None
    for p in parents:
        if p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeError("operands recorded on different tapes")
    if tape is None:
        return Tensor(value)
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    out = Tensor(value, requires_grad=True, parents=parents, backward=backward, tape=tape)
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    # row-broadcast bias (n, m) + (m,) and scalars are the only supported cases
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.ndim >= 1):
        return np.asarray(g.sum()).reshape(shape)
    if len(shape) == 2 and shape[1] == 1 and g.ndim == 2 and g.shape[0] == shape[0]:
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    if np.any(v <= 0):
        raise NumericalError("log of non-positive value")
    return _make(np.log(v), (a,), lambda g: (g / v,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return _make(v * v, (a,), lambda g: (2.0 * g * v,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * s,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient inside ``[lo, hi]`` and zero outside."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), back)


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.value.size
    return _make(a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    cols = a.shape[1]
    return _make(a.value.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], cols, axis=1),))


def row_mean(a) -> Tensor:
    a = as_tensor(a)
    cols = a.shape[1]
    return _make(a.value.mean(axis=1), (a,), lambda g: (np.repeat(g[:, None] / cols, cols, axis=1),))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        if axis == 1:
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def take_cols(a, cols) -> Tensor:
    a = as_tensor(a)
    if not isinstance(cols, slice):
        if isinstance(cols, tuple) and len(cols) == 2 and cols[0] == slice(None):
            cols = cols[1]
        else:
            raise ShapeError("only column slicing t[:, a:b] is supported")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, cols] = g
        return (out,)

    return _make(a.value[:, cols], (a,), back)


def repeat_rows(a, k: int) -> Tensor:
    """Each row repeated ``k`` times consecutively (``np.repeat`` on axis 0)."""
    a = as_tensor(a)
    n = a.shape[0]
    rest = a.shape[1:]
    return _make(np.repeat(a.value, k, axis=0), (a,), lambda g: (g.reshape((n, k) + rest).sum(axis=1),))


def group_mean(a, k: int) -> Tensor:
    """Mean over consecutive blocks of ``k`` entries of a 1-D tensor."""
    a = as_tensor(a)
    n = a.shape[0] // k
    return _make(a.value.reshape(n, k).mean(axis=1), (a,), lambda g: (np.repeat(g / k, k),))


def backward(tape: Tape, output: Tensor, output_gradient=None) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients of named parameters.

    Gradients of watched leaves are left in their ``.grad`` slot. A tape can
    only be swept once.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    tape.consumed = True
    if output_gradient is None:
        if output.value.size != 1:
            raise ShapeError("output_gradient is required for non-scalar outputs")
        output_gradient = np.ones_like(output.value)
    output.grad = np.asarray(output_gradient, dtype=np.float64).reshape(output.shape)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + pg
        node._backward = None
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value)) for name, t in tape.params.items()
    }


# -- networks -----------------------------------------------------------------

ACTIVATIONS = ("tanh", "sigmoid", "scaled_sigmoid", "softmax", "linear", "relu")


@dataclass
class Mlp:
    """Dense network; parameters live in a flat ``{name: array}`` mapping."""

    name: str
    sizes: list[int]
    activations: list[str]
    dropout: list[float] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    lambda_s: float = 1.5

    def __post_init__(self):
        n_layers = len(self.sizes) - 1
        if len(self.activations) != n_layers:
            raise ShapeError(f"{self.name}: {n_layers} layers but {len(self.activations)} activations")
        if not self.dropout:
            self.dropout = [0.0] * n_layers
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for p in self.dropout:
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        for i in range(n_layers):
            w, b = self.params.get(self.wname(i)), self.params.get(self.bname(i))
            if w is not None and w.shape != (self.sizes[i], self.sizes[i + 1]):
                raise ShapeError(f"{self.wname(i)} has shape {w.shape}")
            if b is not None and b.shape != (self.sizes[i + 1],):
                raise ShapeError(f"{self.bname(i)} has shape {b.shape}")

    def wname(self, i: int) -> str:
        return f"{self.name}.{i}.W"

    def bname(self, i: int) -> str:
        return f"{self.name}.{i}.b"

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, rng: np.random.Generator, zero_last: bool = False) -> "Mlp":
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            w = rng.normal(0.0, scale, size=(fan_in, fan_out))
            if zero_last and i == self.n_layers - 1:
                w[:] = 0.0
            self.params[self.wname(i)] = w
            self.params[self.bname(i)] = np.zeros(fan_out)
        return self

    def _activate(self, kind: str, x):
        if kind == "tanh":
            return tanh(x)
        if kind == "sigmoid":
            return sigmoid(x)
        if kind == "scaled_sigmoid":
            return mul(sigmoid(x), self.lambda_s)
        if kind == "softmax":
            return softmax(x)
        if kind == "relu":
            return relu(x)
        return x

    def forward(
        self,
        x,
        tape: Tape | None = None,
        dropout_on: bool = False,
        rng: np.random.Generator | None = None,
        params: dict[str, np.ndarray] | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Returns the output and the post-activation value of every hidden layer.

        With ``tape`` the parameters become differentiable leaves on it;
        ``params`` overrides the stored values (used for perturbation checks).
        Dropout masks are drawn only when ``dropout_on`` and are appended to
        ``tape.masks``.
        """
        params = self.params if params is None else params
        h = as_tensor(x)
        if h.value.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise ShapeError(f"{self.name}: expected input (n, {self.sizes[0]}), got {h.shape}")
        hidden = []
        for i in range(self.n_layers):
            if tape is not None:
                w = tape.param(self.wname(i), params[self.wname(i)])
                b = tape.param(self.bname(i), params[self.bname(i)])
            else:
                w, b = Tensor(params[self.wname(i)]), Tensor(params[self.bname(i)])
            h = add(matmul(h, w), b)
            h = self._activate(self.activations[i], h)
            if i < self.n_layers - 1:
                p = self.dropout[i]
                if dropout_on and p > 0.0:
                    if rng is None:
                        raise ValueError("dropout requires an rng")
                    mask = (rng.random(h.shape) >= p) / (1.0 - p)
                    if tape is not None:
                        tape.masks.append(mask)
                    h = mul(h, mask)
                hidden.append(h)
        return h, hidden

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass without dropout or recording."""
        h = np.atleast_2d(x)
        for i in range(self.n_layers):
            h = h @ self.params[self.wname(i)] + self.params[self.bname(i)]
            kind = self.activations[i]
            if kind == "tanh":
                h = np.tanh(h)
            elif kind == "relu":
                h = np.maximum(h, 0.0)
            elif kind in ("sigmoid", "scaled_sigmoid"):
                h = _sigmoid(h) * (self.lambda_s if kind == "scaled_sigmoid" else 1.0)
            elif kind == "softmax":
                z = np.exp(h - h.max(axis=-1, keepdims=True))
                h = z / z.sum(axis=-1, keepdims=True)
        return h

    def copy(self) -> "Mlp":
        return Mlp(
            self.name,
            list(self.sizes),
            list(self.activations),
            list(self.dropout),
            {k: v.copy() for k, v in self.params.items()},
            self.lambda_s,
        )


# -- distributions ----------------------------------------------------------------


@dataclass
class GaussianDiag:
    """Row-wise diagonal Gaussians: ``mean`` and ``var`` are (n, d) tensors."""

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        self.mean, self.var = as_tensor(self.mean), as_tensor(self.var)
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean {self.mean.shape} vs var {self.var.shape}")
        if np.any(self.var.value <= 0):
            raise NumericalError("Gaussian variance must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def repeat(self, k: int) -> "GaussianDiag":
        return GaussianDiag(repeat_rows(self.mean, k), repeat_rows(self.var, k))

    def detach(self) -> "GaussianDiag":
        return GaussianDiag(self.mean.detach(), self.var.detach())


def reparam_sample(g: GaussianDiag, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(g.mean.shape)
    return add(g.mean, mul(sqrt(g.var), eps))


def kl_gaussians(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """Per-row KL(q || p) for diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"KL between shapes {q.mean.shape} and {p.mean.shape}")
    ratio = div(q.var, p.var)
    d2 = div(square(sub(q.mean, p.mean)), p.var)
    terms = sub(add(ratio, d2), add(log(ratio), 1.0))
    return mul(row_sum(terms), 0.5)


def kl_standard_normal(q: GaussianDiag) -> Tensor:
    terms = sub(add(q.var, square(q.mean)), add(log(q.var), 1.0))
    return mul(row_sum(terms), 0.5)


def entropy_gaussian(g: GaussianDiag) -> Tensor:
    """Per-row differential entropy ``0.5 * sum(log(2 pi e var))``."""
    return mul(add(row_sum(log(g.var)), g.dim * LOG_2PI_E), 0.5)


def clamp_probs(p) -> Tensor:
    return clip(p, EPS_P, 1.0 - EPS_P)


def entropy_bernoulli(p) -> Tensor:
    """Per-row sum of binary entropies; ``p`` is clamped to ``[eps, 1-eps]``."""
    p = clamp_probs(p)
    q = sub(1.0, p)
    return -row_sum(add(mul(p, log(p)), mul(q, log(q))))


def binary_cross_entropy(p, target: np.ndarray) -> Tensor:
    """Per-row mean BCE of probabilities ``p`` against a fixed target."""
    p = clamp_probs(p)
    t = np.asarray(target, dtype=np.float64)
    ll = add(mul(log(p), t), mul(log(sub(1.0, p)), 1.0 - t))
    return -row_mean(ll)


# -- optimisation ---------------------------------------------------------------------


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 10.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of the entries of ``params`` named in ``grads``."""
        for k, g in grads.items():
            if params[k].shape != g.shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if self.clip_norm is not None:
            grads = clip_by_global_norm(grads, self.clip_norm)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def copy(self) -> "Adam":
        return Adam(
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.clip_norm,
            self.step_count,
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
        )


def adam_update(
    params: dict[str, np.ndarray], gradients: dict[str, np.ndarray], lr: float, step: int, state: Adam | None = None
) -> tuple[dict[str, np.ndarray], Adam]:
    """Functional wrapper: returns updated copies of ``params`` and the optimiser state."""
    state = Adam(lr=lr) if state is None else state
    state.lr = lr
    state.step_count = step - 1
    new = {k: v.copy() for k, v in params.items()}
    state.step(new, gradients)
    return new, state


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``arr`` (mutated in place, then restored)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
