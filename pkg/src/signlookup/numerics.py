"""Dense-tensor math with reverse-mode gradients.

Everything the spotting network needs is built from the primitives in this
module: matmul/add/mul, stabilized softmax, scaled dot-product attention,
multi-head attention, feed-forward blocks, layer norm, leaky ReLU, inverted
dropout and xavier init. A :class:`Tensor` wraps a float32 numpy array and
records a backward closure per operation; ``Tensor.backward`` replays the
tape in reverse topological order. ``grad_check`` validates any scalar loss
against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "RngState",
    "tensor",
    "parameter",
    "no_grad",
    "watch_activation_kinks",
    "softmax",
    "scaled_dot_attention",
    "multi_head_attention",
    "feed_forward",
    "layer_norm",
    "relu",
    "leaky_relu",
    "dropout",
    "xavier_init",
    "grad_check",
    "GradCheckReport",
    "AttentionParams",
    "FeedForwardParams",
]

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5

_grad_enabled = True
_kink_trace: list | None = None


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class watch_activation_kinks:
    """Record, per relu/leaky_relu call, how close inputs come to the kink.

    Finite-difference gradient checks are only meaningful at points where the
    loss is differentiable; instances whose recorded margin is below a few
    eps must be redrawn.
    """

    def __enter__(self) -> list:
        global _kink_trace
        self._prev = _kink_trace
        _kink_trace = []
        return _kink_trace

    def __exit__(self, *exc):
        global _kink_trace
        _kink_trace = self._prev
        return False


def _note_kink_margin(data: np.ndarray) -> None:
    if _kink_trace is not None and data.size:
        _kink_trace.append(float(np.abs(data).min()))


@dataclass(frozen=True)
class RngState:
    """Seed plus stream id; identical pairs yield identical draw sequences."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, self.stream)))
        )

    def child(self, stream: int) -> "RngState":
        return RngState(self.seed, stream)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngState(int(rng)).generator()
    raise ConfigError(f"cannot derive a random generator from {type(rng).__name__}")


class Tensor:
    """Dense float array with an optional gradient buffer.

    ``data`` is row-major float32 (float64 during gradient checks); ``grad``
    has the same shape once backward has run. Operations on tensors record
    backward closures while gradients are enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None) -> None:
        """Reverse-accumulate gradients from this node to all leaves."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.broadcast_to(
                np.asarray(grad, dtype=self.data.dtype), self.data.shape
            ).copy()
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, like=self))

    def __rsub__(self, other):
        return add(_as_tensor(other, like=self), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# core primitives ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bwd(g, a=a, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        out._backward = _bwd
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bwd(g, a=a, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        out._backward = _bwd
    return out


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bwd(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        out._backward = _bwd
    return out


def linear(x, w, b=None) -> Tensor:
    """x @ w + b in one graph node."""
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes {x.data.shape} x {w.data.shape}")
    data = x.data @ w.data
    if b is not None:
        b = _as_tensor(b, like=x)
        data = data + b.data
    out = _result(data, (x, w) if b is None else (x, w, b))
    if out.requires_grad:
        def _bwd(g, x=x, w=w, b=b):
            if x.requires_grad:
                x._accum(g @ w.data.T)
            if w.requires_grad:
                w._accum(x.data.T @ g)
            if b is not None and b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        out._backward = _bwd
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.T, (a,))
    if out.requires_grad:
        def _bwd(g, a=a):
            a._accum(g.T)
        out._backward = _bwd
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bwd(g, a=a):
            a._accum(g.reshape(a.data.shape))
        out._backward = _bwd
    return out


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]`` as a differentiable op."""
    a = _as_tensor(a)
    out = _result(a.data[:, start:stop], (a,))
    if out.requires_grad:
        def _bwd(g, a=a, start=start, stop=stop):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accum(full)
        out._backward = _bwd
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    if out.requires_grad:
        widths = [p.data.shape[1] for p in parts]
        def _bwd(g, parts=parts, widths=widths):
            off = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p._accum(g[:, off:off + w])
                off += w
        out._backward = _bwd
    return out


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.sum(), (a,))
    if out.requires_grad:
        def _bwd(g, a=a):
            a._accum(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
        out._backward = _bwd
    return out


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.mean(), (a,))
    if out.requires_grad:
        inv = 1.0 / a.data.size
        def _bwd(g, a=a, inv=inv):
            a._accum(np.broadcast_to(g * inv, a.data.shape).astype(a.data.dtype))
        out._backward = _bwd
    return out


def tlog(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.log(a.data), (a,))
    if out.requires_grad:
        def _bwd(g, a=a):
            a._accum(g / a.data)
        out._backward = _bwd
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes only through the interior."""
    a = _as_tensor(a)
    out = _result(np.clip(a.data, lo, hi), (a,))
    if out.requires_grad:
        mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
        def _bwd(g, a=a, mask=mask):
            a._accum(g * mask)
        out._backward = _bwd
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _note_kink_margin(a.data)
    out = _result(np.maximum(a.data, 0), (a,))
    if out.requires_grad:
        mask = (a.data > 0).astype(a.data.dtype)
        def _bwd(g, a=a, mask=mask):
            a._accum(g * mask)
        out._backward = _bwd
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """x if x >= 0 else slope * x, elementwise."""
    a = _as_tensor(a)
    _note_kink_margin(a.data)
    factor = np.where(a.data >= 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))
    out = _result(a.data * factor, (a,))
    if out.requires_grad:
        def _bwd(g, a=a, factor=factor):
            a._accum(g * factor)
        out._backward = _bwd
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; rows sum to 1.

    Max subtraction makes the result invariant under adding a constant to
    every input of a row.
    """
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("softmax over an empty tensor")
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input must be finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (a,))
    if out.requires_grad:
        def _bwd(g, a=a, y=y, axis=axis):
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accum(y * (g - inner))
        out._backward = _bwd
    return out


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    bias = _as_tensor(bias, like=x)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = _result(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, inv_std=inv_std, d=d):
            if bias.requires_grad:
                bias._accum(_unbroadcast(g, bias.data.shape))
            if gain.requires_grad:
                gain._accum(_unbroadcast(g * xhat, gain.data.shape))
            if x.requires_grad:
                gx = g * gain.data
                mean_gx = gx.mean(axis=-1, keepdims=True)
                mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
                x._accum(inv_std * (gx - mean_gx - xhat * mean_gx_xhat))
        out._backward = _bwd
    return out


def dropout(x, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    gen = _as_generator(rng)
    keep = (gen.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    out = _result(x.data * keep * scale, (x,))
    if out.requires_grad:
        def _bwd(g, x=x, keep=keep, scale=scale):
            x._accum(g * keep * scale)
        out._backward = _bwd
    return out


# composite blocks ---------------------------------------------------------


@dataclass
class AttentionParams:
    """Fused query/key/value projections plus the output projection."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo, f"{prefix}.bo": self.bo,
        }


@dataclass
class FeedForwardParams:
    """Two linear layers with a ReLU in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
        }


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V; rows are convex combinations of V rows."""
    q = _as_tensor(q)
    k = _as_tensor(k, like=q)
    v = _as_tensor(v, like=q)
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"query dim {q.data.shape} vs key dim {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"key count {k.data.shape} vs value count {v.data.shape}")
    d_k = q.data.shape[1]
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax(scores, axis=-1), v)


def _attend_heads(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """All heads of scaled dot attention in one graph node.

    Equivalent to slicing q/k/v into n_heads column blocks, running
    scaled_dot_attention per block and concatenating the results.
    """
    n_q, d = q.data.shape
    n_k = k.data.shape[0]
    d_head = d // n_heads
    scale = 1.0 / math.sqrt(d_head)

    def split(t: np.ndarray, n: int) -> np.ndarray:
        return t.reshape(n, n_heads, d_head).transpose(1, 0, 2)  # (H, n, d_head)

    qh, kh, vh = split(q.data, n_q), split(k.data, n_k), split(v.data, n_k)
    scores = qh @ kh.transpose(0, 2, 1) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)  # (H, n_q, n_k)
    mixed = (attn @ vh).transpose(1, 0, 2).reshape(n_q, d)
    out = _result(mixed, (q, k, v))
    if out.requires_grad:
        def _bwd(g, q=q, k=k, v=v, qh=qh, kh=kh, vh=vh, attn=attn):
            gh = split(g, n_q)
            if v.requires_grad:
                gv = attn.transpose(0, 2, 1) @ gh
                v._accum(gv.transpose(1, 0, 2).reshape(n_k, d))
            g_attn = gh @ vh.transpose(0, 2, 1)
            g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq = (g_scores @ kh) * scale
                q._accum(gq.transpose(1, 0, 2).reshape(n_q, d))
            if k.requires_grad:
                gk = (g_scores.transpose(0, 2, 1) @ qh) * scale
                k._accum(gk.transpose(1, 0, 2).reshape(n_k, d))
        out._backward = _bwd
    return out


def multi_head_attention(x_q, x_kv, params: AttentionParams, n_heads: int) -> Tensor:
    """Concatenated per-head scaled dot attention followed by a projection."""
    x_q = _as_tensor(x_q)
    x_kv = _as_tensor(x_kv, like=x_q)
    d = x_q.data.shape[1]
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")
    if not (np.isfinite(x_q.data).all() and np.isfinite(x_kv.data).all()):
        raise NumericError("attention inputs must be finite")
    q = linear(x_q, params.wq, params.bq)
    k = linear(x_kv, params.wk, params.bk)
    v = linear(x_kv, params.wv, params.bv)
    mixed = _attend_heads(q, k, v, n_heads)
    return linear(mixed, params.wo, params.bo)


def feed_forward(x, params: FeedForwardParams) -> Tensor:
    """linear -> ReLU -> linear, applied row-wise."""
    x = _as_tensor(x)
    return linear(relu(linear(x, params.w1, params.b1)), params.w2, params.b2)


def xavier_init(fan_in: int, fan_out: int, rng) -> np.ndarray:
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out)), shape (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"fan dimensions must be positive, got {fan_in}, {fan_out}")
    gen = _as_generator(rng)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DEFAULT_DTYPE)


# gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst-case disagreement between analytic and numeric gradients."""

    max_rel_error: float
    worst_param: str
    worst_index: int
    n_params: int


def _param_dict(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    if isinstance(params, Iterable):
        return {f"param{i}": p for i, p in enumerate(params)}
    raise ConfigError("params must be a mapping or iterable of tensors")


def grad_check_report(
    loss_fn: Callable[[], Tensor], params, eps: float = 1e-3
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    The check promotes parameters to float64 for the duration (finite
    differences at eps=1e-3 are meaningless in float32) and restores the
    original buffers afterwards. ``loss_fn`` must be deterministic.
    """
    named = _param_dict(params)
    originals = {name: t.data for name, t in named.items()}
    try:
        for t in named.values():
            t.data = t.data.astype(np.float64)
        for t in named.values():
            t.zero_grad()
        loss = loss_fn()
        if loss.data.ndim != 0:
            raise ShapeError("grad_check loss must be scalar")
        if not np.isfinite(loss.data):
            raise NumericError("grad_check loss is not finite")
        loss.backward()
        analytic = {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in named.items()
        }
        worst = GradCheckReport(0.0, "", -1, sum(t.data.size for t in named.values()))
        for name, t in named.items():
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = float(loss_fn().data)
                flat[i] = saved - eps
                f_minus = float(loss_fn().data)
                flat[i] = saved
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(analytic[name].reshape(-1)[i])
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                if rel > worst.max_rel_error:
                    worst = GradCheckReport(rel, name, i, worst.n_params)
        return worst
    finally:
        for name, t in named.items():
            t.data = originals[name]
            t.zero_grad()


def grad_check(loss_fn: Callable[[], Tensor], params, eps: float = 1e-3) -> float:
    """Max over all parameters of |analytic - numeric| / (|analytic| + |numeric|)."""
    return grad_check_report(loss_fn, params, eps=eps).max_rel_error
