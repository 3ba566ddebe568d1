"""Small reverse-mode autodiff over numpy arrays.

Only the primitives the CTG transformer needs are provided.  Every op
checks its output for NaN/Inf and raises ``FloatingPointError`` so a
diverging run fails loudly instead of silently poisoning the weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array that remembers how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced in tensor op")


def _result(data, parents, backward):
    _check_finite(data)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU, the feed-forward activation."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward)


# --- shape ----------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward)


def flatten(x, start_axis=1) -> Tensor:
    x = as_tensor(x)
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def split(x, sections, axis=0):
    """Split into equal sections along ``axis``; each piece keeps the graph."""
    x = as_tensor(x)
    n = x.shape[axis] // sections
    pieces = []
    for i in range(sections):
        index = [slice(None)] * x.ndim
        index[axis] = slice(i * n, (i + 1) * n)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros(x.shape)
            full[index] = g
            return (full,)

        pieces.append(_result(x.data[index], (x,), backward))
    return pieces


def tsum(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward)


# --- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def attention(q, k, v):
    """Scaled dot-product attention over the last two axes.

    Returns ``(output, weights)``; ``weights`` is a plain array (rows sum
    to one) kept for inspection and is not part of the graph.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)

    def backward(g):
        dv = np.swapaxes(w, -1, -2) @ g
        dw = g @ np.swapaxes(v.data, -1, -2)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k.data
        dk = np.swapaxes(ds, -1, -2) @ q.data
        return dq, dk, dv

    return _result(w @ v.data, (q, k, v), backward), w


# --- normalization / regularization ----------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5) -> Tensor:
    """Normalize every feature (last axis) over all leading axes.

    In training mode the running statistics arrays are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.data.size // x.shape[-1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            dx = inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def dropout(x, rate, rng, training) -> Tensor:
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), backward)


# --- losses --------------------------------------------------------------

def mse(pred, target) -> Tensor:
    """Mean of squared elementwise differences."""
    diff = sub(pred, target)
    return mul(tsum(mul(diff, diff)), 1.0 / diff.data.size)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return _result(np.asarray(-logp[rows, labels].mean()), (logits,), backward)


# --- gradients -------------------------------------------------------------

def backward(loss: Tensor, params=None):
    """Backpropagate from a scalar ``loss``.

    Sets ``.grad`` on every reachable leaf that requires grad.  When
    ``params`` is given, returns their gradients in order, with zeros for
    parameters the loss does not depend on.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def grad_check(loss_fn, params: dict, eps: float = 1e-6) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` maps a dict of ``Tensor`` leaves to a scalar ``Tensor`` and
    must be deterministic.  Returns the worst
    ``|analytic - numeric| / max(1, |numeric|)`` over every coordinate.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"finite-difference step {eps} outside [1e-7, 1e-3]")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(track):
        leaves = {k: Tensor(a, requires_grad=track) for k, a in arrays.items()}
        loss = loss_fn(leaves)
        if not np.isfinite(loss.data):
            raise FloatingPointError("loss is not finite")
        return loss, leaves

    loss, leaves = evaluate(True)
    names = list(leaves)
    analytic = dict(zip(names, backward(loss, [leaves[k] for k in names])))

    worst = 0.0
    for name in names:
        arr = arrays[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(evaluate(False)[0].data)
            flat[i] = orig - eps
            down = float(evaluate(False)[0].data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# --- optimizers --------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One Adam update, in place on ``params`` and ``state``."""
    _adam_update(params, grads, state, decoupled_decay=False)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Adam with decoupled weight decay ``lr * weight_decay * w``."""
    _adam_update(params, grads, state, decoupled_decay=True)


def _adam_update(params, grads, state, decoupled_decay):
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if decoupled_decay and state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
