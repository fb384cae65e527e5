"""Small reverse-mode autodiff engine on top of numpy.

Every op returns a :class:`Tensor`. When gradients are enabled and at least one
input requires a gradient, the result remembers its parents together with a
closure that maps the upstream gradient to per-parent gradients. ``backward``
walks that graph once in reverse topological order.

All arrays are float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "tensor", "param", "no_grad", "grad_enabled", "backward",
    "stop_gradient", "concat", "stack", "where", "softmax", "log_softmax",
    "logsumexp", "layer_norm", "gelu", "sigmoid", "attention", "causal_mask",
    "grad_check", "grad_check_params", "Adam", "clip_grad_norm",
]

_GRAD_ENABLED = True
LN_EPS = 1e-5


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{op}: shapes {sa} and {sb} do not broadcast") from None


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None      # make ndarray (op) Tensor defer to the reflected Tensor op

    def __init__(self, data, parents: tuple = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        sa, sb = self.shape, other.shape
        _check_broadcast("add", sa, sb)
        return _node(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        sa, sb = self.shape, other.shape
        _check_broadcast("sub", sa, sb)
        return _node(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        _check_broadcast("mul", a.shape, b.shape)
        return _node(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        _check_broadcast("div", a.shape, b.shape)
        return _node(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, a.shape),
                                _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self.data
        return _node(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)
        return _node(self.data[idx], (self,), bw)

    # elementwise ------------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return _node(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _node(out, (self,), lambda g: (g * 0.5 / out,))

    def clamp(self, lo: float, hi: float):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return _node(np.clip(a, lo, hi), (self,), lambda g: (g * inside,))

    # reductions and shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return _node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return _node(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    @property
    def T(self):
        return self.transpose()


def _node(data, parents: tuple, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, requires_grad=True)
    return Tensor(data)


def tensor(data) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(np.array(data, dtype=np.float64))


def param(data, name: str | None = None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    va, vb = A.ndim == 1, B.ndim == 1
    A2 = A[None, :] if va else A
    B2 = B[:, None] if vb else B
    if A2.shape[-1] != B2.shape[-2]:
        raise ValueError(f"matmul: shapes {A.shape} and {B.shape} do not conform")
    out = A2 @ B2

    def bw(g):
        if va:
            g = np.expand_dims(g, -2)
        if vb:
            g = np.expand_dims(g, -1)
        ga = g @ np.swapaxes(B2, -1, -2)
        gb = np.swapaxes(A2, -1, -2) @ g
        ga = _unbroadcast(ga, A2.shape)
        gb = _unbroadcast(gb, B2.shape)
        return (ga.reshape(A.shape), gb.reshape(B.shape))

    if va:
        out = out[..., 0, :]
    if vb:
        out = out[..., 0]
    return _node(out, (a, b), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass, blocks gradient flow in the backward pass."""
    return Tensor(x.data)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    n = len(xs)
    return _node(np.stack([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``mask`` is true, constant ``fill`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    return _node(np.where(mask, x.data, fill), (x,), lambda g: (_unbroadcast(g * mask, x.shape),))


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    out = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))),
                   np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    a = x.data
    cdf = 0.5 * (1.0 + erf(a / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    return _node(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _node(out, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * p,))


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis; no affine transform."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)
    return _node(out, (x,), bw)


def causal_mask(t: int) -> np.ndarray:
    """Boolean (t, t) mask, true where attention is allowed."""
    return np.tril(np.ones((t, t), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean and broadcastable to the score shape; false entries are
    excluded before the softmax.
    """
    d = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    if mask is not None:
        scores = where(mask, scores, -1e30)
    return softmax(scores, axis=-1) @ v


def backward(out: Tensor, wrt: Iterable[Tensor] | None = None,
             grad: np.ndarray | None = None) -> list[np.ndarray] | None:
    """Backpropagate from ``out``.

    With ``wrt`` given, returns the gradient for each requested tensor (zeros for
    tensors the output does not depend on). Otherwise accumulates into ``.grad``
    of every reachable leaf.
    """
    if grad is None:
        if out.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
        grad = np.ones_like(out.data)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(out, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            grads[id(node)] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    if wrt is not None:
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
    for node in order:
        if node._backward is None and id(node) in grads:
            node.grad = grads[id(node)] if node.grad is None else node.grad + grads[id(node)]
    return None


# verification ---------------------------------------------------------------

def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               n_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``n_coords`` limits the check to a random subset of coordinates.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = param(x0)
    (g,) = backward(f(xt), [xt])
    flat = x0.reshape(-1)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = (rng or np.random.default_rng(0)).choice(flat.size, n_coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            xp = flat.copy(); xp[i] += step
            xm = flat.copy(); xm[i] -= step
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"non-finite function value at coordinate {np.unravel_index(i, x0.shape)}")
            worst = max(worst, _rel_err(g.reshape(-1)[i], (fp - fm) / (2 * step)))
    return worst


def grad_check_params(f: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
                      n_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` but perturbs tensors of a parameter dict in place.

    ``n_coords`` is the number of coordinates sampled per parameter tensor.
    """
    rng = rng or np.random.default_rng(0)
    names = list(params)
    grads = backward(f(), [params[n] for n in names])
    worst = 0.0
    with no_grad():
        for name, g in zip(names, grads):
            p = params[name]
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if n_coords is not None and n_coords < flat.size:
                coords = rng.choice(flat.size, n_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise ValueError(f"non-finite function value at {name}[{i}]")
                worst = max(worst, _rel_err(g.reshape(-1)[i], (fp - fm) / (2 * step)))
    return worst


# optimization ---------------------------------------------------------------

def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], ascent: bool = False) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        norm = clip_grad_norm(grads, self.clip_norm) if self.clip_norm else float("nan")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        sign = 1.0 if ascent else -1.0
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k].data += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


class SGD:
    """Plain gradient step after global-norm clipping; same interface as ``Adam``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2, clip_norm: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self, grads: dict[str, np.ndarray], ascent: bool = False) -> float:
        norm = clip_grad_norm(grads, self.clip_norm) if self.clip_norm else float("nan")
        sign = 1.0 if ascent else -1.0
        for k, g in grads.items():
            self.params[k].data += sign * self.lr * g
        return norm
