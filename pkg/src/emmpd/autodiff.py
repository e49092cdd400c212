"""Small dense reverse-mode autodiff over 2-D float64 numpy arrays.

Operations run eagerly. When a :class:`Tape` is active (``with Tape() as tape``)
every differentiable op appends a record holding its inputs and an adjoint
closure; ``tape.backward(loss)`` replays those records in reverse. Outside a
tape the same functions just compute values, which is what evaluation uses.

Backward helpers are module-level ``_*_backward`` functions looked up at call
time, so a test can swap one out to check that the gradient checker notices.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5
LOG_CLAMP = 1e-12

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "emmpd_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (reuse, non-scalar loss)."""


class Tensor:
    """A 2-D float64 value that may carry a gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """A named trainable tensor that outlives any single tape."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops; usable for exactly one backward pass."""

    records: list = field(default_factory=list)
    consumed: bool = False
    _token: object = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple, backward) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.records.append(_Record(out, inputs, backward))

    def params(self) -> list[Param]:
        seen: dict[int, Param] = {}
        for rec in self.records:
            for t in rec.inputs:
                if isinstance(t, Param):
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor, params: Iterable[Param] = ()) -> None:
        """Accumulate d(loss)/d(param) into every reachable Param.

        Grads of all params seen on the tape (plus ``params``) are zeroed first,
        so params the loss does not depend on end with a zero gradient.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        if loss.shape != (1, 1):
            raise TapeError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        if not np.isfinite(loss.value).all():
            raise FloatingPointError("loss is not finite")
        for p in list(params) + self.params():
            p.zero_grad()

        adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for rec in reversed(self.records):
            g = adj.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is not None:
                    inp.grad += gi
                else:
                    key = id(inp)
                    if key in adj:
                        adj[key] = adj[key] + gi
                    else:
                        adj[key] = gi
        self.consumed = True


def _wants_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _emit(value: np.ndarray, inputs: tuple, backward) -> Tensor:
    tape = _active_tape.get()
    track = tape is not None and _wants_grad(*inputs)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = track
    out.grad = None
    out.name = ""
    if track:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------- primitives

def _matmul_backward(a, b, g):
    return g @ b.T, a.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: _matmul_backward(av, bv, g))


def transpose(a: Tensor) -> Tensor:
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for ra, rb in zip(a.shape, b.shape):
        if ra != rb and ra != 1 and rb != 1:
            raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with row/column broadcasting of singleton dims."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = a.shape
    return _emit(
        np.array([[a.value.sum()]]), (a,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n, d) -> (1, d)."""
    n = a.shape[0]
    return _emit(
        a.value.mean(axis=0, keepdims=True), (a,),
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows needs equal column counts, got {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _emit(
        np.vstack([p.value for p in parts]), tuple(parts),
        lambda g: [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))],
    )


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols needs equal row counts, got {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _emit(
        np.hstack([p.value for p in parts]), tuple(parts),
        lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))],
    )


def take_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit(a.value[index], (a,), back)


def _softmax_forward(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's max."""
    x = as_tensor(x)
    if x.value.size == 0:
        raise ShapeError("softmax of an empty matrix")
    y = _softmax_forward(x.value)
    return _emit(y, (x,), lambda g: (_softmax_backward(y, g),))


def _layernorm_backward(xhat, inv_std, gain, g):
    d = xhat.shape[-1]
    g_gain = (g * xhat).sum(axis=0, keepdims=True)
    g_bias = g.sum(axis=0, keepdims=True)
    gx_hat = g * gain
    gx = inv_std / d * (
        d * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, g_gain, g_bias


def layernorm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Standardise each row by its mean and population variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layernorm gain/bias must be (1, {d}), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    gv = gain.value
    return _emit(
        xhat * gv + bias.value, (x, gain, bias),
        lambda g: _layernorm_backward(xhat, inv_std, gv, g),
    )


def _mha_backward(q, k, v, attn, scale_, heads, g):
    m, d = q.shape
    n = k.shape[0]
    dh = d // heads
    qh = q.reshape(m, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(n, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(n, heads, dh).transpose(1, 0, 2)
    gh = g.reshape(m, heads, dh).transpose(1, 0, 2)
    g_attn = gh @ vh.transpose(0, 2, 1)
    gv = attn.transpose(0, 2, 1) @ gh
    gs = _softmax_backward(attn, g_attn) * scale_
    gq = gs @ kh
    gk = gs.transpose(0, 2, 1) @ qh
    back = lambda t, rows: t.transpose(1, 0, 2).reshape(rows, d)
    return back(gq, m), back(gk, n), back(gv, n)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int):
    """Scaled dot-product attention split over ``heads`` column groups.

    q: (m, d), k and v: (n, d). Head ``i`` uses columns ``i*d_h:(i+1)*d_h``
    and scores are scaled by sqrt(d_h). Returns ``(out, weights)`` where
    ``out`` is the (m, d) concatenation of head outputs and ``weights`` the
    (heads, m, n) attention matrix as a plain array.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    m, d = q.shape
    n = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if heads < 1 or d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    scale_ = 1.0 / np.sqrt(dh)
    qv, kv, vv = q.value, k.value, v.value
    qh = qv.reshape(m, heads, dh).transpose(1, 0, 2)
    kh = kv.reshape(n, heads, dh).transpose(1, 0, 2)
    vh = vv.reshape(n, heads, dh).transpose(1, 0, 2)
    attn = _softmax_forward(qh @ kh.transpose(0, 2, 1) * scale_)
    out = (attn @ vh).transpose(1, 0, 2).reshape(m, d)
    t = _emit(
        out, (q, k, v),
        lambda g: _mha_backward(qv, kv, vv, attn, scale_, heads, g),
    )
    return t, attn


def _focal_backward(p, y, alpha, gamma, g):
    pt = np.where(y > 0.5, p, 1.0 - p)
    at = np.where(y > 0.5, alpha, 1.0 - alpha)
    clamped = pt < LOG_CLAMP
    logpt = np.log(np.maximum(pt, LOG_CLAMP))
    one_m = 1.0 - pt
    # d/dpt of at * (1-pt)^gamma * (-log pt)
    if gamma == 0:
        dfocal = np.zeros_like(pt)
    else:
        dfocal = -gamma * one_m ** (gamma - 1.0)
    dloss_dpt = at * (dfocal * (-logpt) + np.where(clamped, 0.0, -(one_m ** gamma) / np.maximum(pt, LOG_CLAMP)))
    dpt_dz = np.where(y > 0.5, 1.0, -1.0) * p * (1.0 - p)
    return (g[0, 0] * dloss_dpt * dpt_dz, None)


def focal_bce(logits: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed class-balanced focal binary cross-entropy over a (1, C) logit row.

    Per class: ``alpha_t * (1 - p_t)**gamma * -log(p_t)`` with ``p = sigmoid(z)``,
    ``p_t = p`` for positives and ``1 - p`` otherwise, ``alpha_t = alpha`` for
    positives and ``1 - alpha`` otherwise. ``log`` is clamped at 1e-12.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    logits = as_tensor(logits)
    y = np.asarray(target, dtype=np.float64).reshape(logits.shape)
    p = _sigmoid(logits.value)
    pt = np.where(y > 0.5, p, 1.0 - p)
    at = np.where(y > 0.5, alpha, 1.0 - alpha)
    terms = at * (1.0 - pt) ** gamma * -np.log(np.maximum(pt, LOG_CLAMP))
    ytensor = Tensor(y)
    return _emit(
        np.array([[terms.sum()]]), (logits, ytensor),
        lambda g: _focal_backward(p, y, alpha, gamma, g),
    )


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction; ``lr`` may be changed between steps."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.lr, self.betas, self.eps, self.t)


def adam_step(params, m, v, lr, betas=(0.9, 0.999), eps=1e-8, step_index=1) -> None:
    """One in-place Adam update of ``params`` using their ``.grad``."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for p, mi, vi in zip(params, m, v):
        g = p.grad
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        p.value -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


# ---------------------------------------------------------------- gradcheck

def numeric_grad(f: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` wrt every entry of ``param``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return out


def gradcheck(f: Callable[[], Tensor], params: Sequence[Param], step: float = 1e-5,
              per_param: bool = False):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` builds a fresh 1x1 loss from the current param values. Returns the
    max over entries of ``|a - n| / max(1, |a|, |n|)``; with ``per_param`` a
    dict ``name -> error`` is returned as well.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss, params)
    analytic = {id(p): p.grad.copy() for p in params}

    def value() -> float:
        return f().item()

    errs: dict[str, float] = {}
    worst = 0.0
    for p in params:
        a = analytic[id(p)]
        n = numeric_grad(value, p, step)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        e = float((np.abs(a - n) / denom).max()) if a.size else 0.0
        errs[p.name or f"param{len(errs)}"] = e
        worst = max(worst, e)
    return (worst, errs) if per_param else worst
