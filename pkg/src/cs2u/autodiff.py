"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps an ndarray and remembers the closure that propagates its
gradient; ``backward()`` walks the tape in reverse topological order. The op
set is deliberately small: exactly what the encoder/decoder stack and the
loss kernels need. No broadcasting zoo, no views into shared storage.

Training is single-threaded by contract: gradient accumulation into a
Parameter is a plain ndarray ``+=``. Inference under ``no_grad()`` builds no
tape and may run concurrently on frozen weights.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "grad_enabled",
    "add",
    "mul",
    "scale",
    "matmul",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv1d",
    "depthwise_conv1d",
    "embedding",
    "gather_rows",
    "replace_rows",
    "repeat_rows",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "dropout",
    "attention",
    "external_grad",
    "finite_difference",
    "max_rel_error",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction (inference, glancing first pass)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=1.0) -> None:
        """Accumulate d(self)/d(leaf) into every reachable gradient.

        ``seed`` is the upstream gradient; the default 1.0 is the usual
        scalar-loss case. Accumulation is += so repeated backward calls from
        independent graphs (per-sample losses in a batch) combine naturally.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that tracks no gradient")
        topo: list[Tensor] = []
        seen: set[int] = set()
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
        g = np.asarray(seed, dtype=np.float64)
        if g.shape != self.data.shape:
            if g.ndim != 0:
                raise ValueError(
                    f"seed shape {g.shape} does not match tensor shape {self.data.shape}"
                )
            g = np.full(self.data.shape, float(g))
        _accum(self, g)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf: named, with an always-materialized gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.data.shape})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient contribution that may alias another array."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _accum_owned(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient the caller will not reuse."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_builder) -> Tensor:
    """Create an op result; wire the tape only when some parent needs it."""
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_builder(out)
    return out


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b) -> Tensor:
    """a + b. b may be a same-shape Tensor, a 1-D bias Tensor matching the
    last axis of a, or a constant (float / ndarray broadcastable into a)."""
    if isinstance(b, Tensor):
        if a.shape == b.shape:
            data = a.data + b.data

            def bwd(out):
                def run():
                    if a.requires_grad:
                        _accum(a, out.grad)
                    if b.requires_grad:
                        _accum(b, out.grad)

                return run

            return _make(data, (a, b), bwd)
        if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[-1] == b.shape[0]:
            data = a.data + b.data

            def bwd(out):
                def run():
                    if a.requires_grad:
                        _accum(a, out.grad)
                    if b.requires_grad:
                        axes = tuple(range(a.data.ndim - 1))
                        _accum_owned(b, out.grad.sum(axis=axes))

                return run

            return _make(data, (a, b), bwd)
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    const = np.asarray(b, dtype=np.float64)
    data = a.data + const
    if data.shape != a.data.shape:
        raise ValueError(
            f"constant of shape {const.shape} does not broadcast into {a.shape}"
        )

    def bwd(out):
        def run():
            _accum(a, out.grad)

        return run

    return _make(data, (a,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    data = a.data * b.data

    def bwd(out):
        def run():
            if a.requires_grad:
                _accum_owned(a, out.grad * b.data)
            if b.requires_grad:
                _accum_owned(b, out.grad * a.data)

        return run

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def bwd(out):
        def run():
            _accum_owned(a, out.grad * c)

        return run

    return _make(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or batched 3-D x 3-D with equal batch dims."""
    if a.data.ndim == b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    elif a.data.ndim == b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    else:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(out):
        def run():
            if a.requires_grad:
                _accum_owned(a, out.grad @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                _accum_owned(b, a.data.swapaxes(-1, -2) @ out.grad)

        return run

    return _make(data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(out):
        def run():
            _accum_owned(a, out.grad * (a.data > 0.0))

        return run

    return _make(data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU (smooth, closed-form derivative)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    half_1pt = 0.5 * (1.0 + t)
    data = x * half_1pt

    def bwd(out):
        def run():
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
            local = half_1pt + 0.5 * x * (1.0 - t * t) * du
            _accum_owned(a, out.grad * local)

        return run

    return _make(data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def run():
            g = out.grad
            y = data
            _accum_owned(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return run

    return _make(data, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    s = a.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    data = s - lse

    def bwd(out):
        def run():
            g = out.grad
            _accum_owned(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

        return run

    return _make(data, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis. Zero-variance rows map to zeros (then affine)."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(out):
        def run():
            g = out.grad
            if gain.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _accum_owned(gain, (g * xhat).sum(axis=axes))
            if bias.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _accum_owned(bias, g.sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gain.data
                dx = inv * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
                _accum_owned(x, dx)

        return run

    return _make(data, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# convolutions


def conv1d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """1-D convolution over the first axis.

    x: (L, C_in), w: (k, C_in, C_out), optional bias (C_out,).
    Output length is (L + 2*padding - k) // stride + 1.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    length = x.shape[0]
    padded = length + 2 * padding
    if padded < k:
        raise ValueError(f"conv1d input of length {length} shorter than kernel {k}")
    l_out = (padded - k) // stride + 1
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    data = np.zeros((l_out, c_out))
    hi = stride * (l_out - 1) + 1
    for j in range(k):
        data += xp[j : j + hi : stride] @ w.data[j]
    if b is not None:
        if b.shape != (c_out,):
            raise ValueError(f"conv1d bias shape {b.shape} does not match {c_out}")
        data += b.data

    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def run():
            g = out.grad
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[j : j + hi : stride] += g @ w.data[j].T
                _accum_owned(x, gxp[padding : padding + length] if padding else gxp)
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for j in range(k):
                    gw[j] = xp[j : j + hi : stride].T @ g
                _accum_owned(w, gw)
            if b is not None and b.requires_grad:
                _accum_owned(b, g.sum(axis=0))

        return run

    return _make(data, parents, bwd)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel convolution over time with same-length output.

    x: (L, C), w: (k, C) with odd k; output (L, C).
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"depthwise_conv1d shape mismatch: x {x.shape}, w {w.shape}")
    k = w.shape[0]
    if k % 2 != 1:
        raise ValueError(f"depthwise kernel width must be odd, got {k}")
    length = x.shape[0]
    pad = k // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    data = np.zeros_like(x.data)
    for j in range(k):
        data += xp[j : j + length] * w.data[j]
    if b is not None:
        data += b.data

    parents = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def run():
            g = out.grad
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[j : j + length] += g * w.data[j]
                _accum_owned(x, gxp[pad : pad + length])
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for j in range(k):
                    gw[j] = (xp[j : j + length] * g).sum(axis=0)
                _accum_owned(w, gw)
            if b is not None and b.requires_grad:
                _accum_owned(b, g.sum(axis=0))

        return run

    return _make(data, parents, bwd)


# ---------------------------------------------------------------------------
# lookups and row surgery


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ValueError(f"embedding ids must be 1-D, got shape {ids.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValueError(f"embedding id out of range [0, {n})")
    data = table.data[ids]

    def bwd(out):
        def run():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)

        return run

    return _make(data, (table,), bwd)


def gather_rows(x: Tensor, ids) -> Tensor:
    """Pick x[i, ids[i]] for every row i; returns a vector of length L."""
    ids = np.asarray(ids, dtype=np.intp)
    if x.data.ndim != 2 or ids.shape != (x.shape[0],):
        raise ValueError(f"gather_rows shape mismatch: x {x.shape}, ids {ids.shape}")
    rows = np.arange(x.shape[0])
    data = x.data[rows, ids]

    def bwd(out):
        def run():
            g = np.zeros_like(x.data)
            g[rows, ids] = out.grad
            _accum_owned(x, g)

        return run

    return _make(data, (x,), bwd)


def replace_rows(x: Tensor, positions, table: Tensor, token_ids) -> Tensor:
    """Copy x with rows at `positions` replaced by table rows for `token_ids`.

    Gradients route to x through untouched rows and to the table through the
    replaced ones (the glancing-training substitution).
    """
    positions = np.asarray(positions, dtype=np.intp)
    token_ids = np.asarray(token_ids, dtype=np.intp)
    if positions.shape != token_ids.shape or positions.ndim != 1:
        raise ValueError("positions and token_ids must be 1-D and equal length")
    if x.data.ndim != 2 or table.data.ndim != 2 or x.shape[1] != table.shape[1]:
        raise ValueError(f"replace_rows width mismatch: x {x.shape}, table {table.shape}")
    data = x.data.copy()
    data[positions] = table.data[token_ids]

    def bwd(out):
        def run():
            if x.requires_grad:
                gx = out.grad.copy()
                gx[positions] = 0.0
                _accum_owned(x, gx)
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                np.add.at(table.grad, token_ids, out.grad[positions])

        return run

    return _make(data, (x, table), bwd)


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """Uniform row upsampling: row i of the output is x[i // times]."""
    if times < 1:
        raise ValueError(f"repeat factor must be >= 1, got {times}")
    if x.data.ndim != 2:
        raise ValueError(f"repeat_rows expects a matrix, got shape {x.shape}")
    data = np.repeat(x.data, times, axis=0)

    def bwd(out):
        def run():
            g = out.grad.reshape(x.shape[0], times, x.shape[1]).sum(axis=1)
            _accum_owned(x, g)

        return run

    return _make(data, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops, reductions, regularization


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(out):
        def run():
            _accum_owned(x, out.grad.reshape(x.data.shape))

        return run

    return _make(data, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = x.data.transpose(axes)

    def bwd(out):
        def run():
            _accum_owned(x, out.grad.transpose(inv))

        return run

    return _make(data, (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def bwd(out):
        def run():
            _accum_owned(x, np.full(x.data.shape, float(out.grad)))

        return run

    return _make(data, (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())

    def bwd(out):
        def run():
            _accum_owned(x, np.full(x.data.shape, float(out.grad) / n))

        return run

    return _make(data, (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws the mask from `rng` (caller owns determinism)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    data = x.data * mask

    def bwd(out):
        def run():
            _accum_owned(x, out.grad * mask)

        return run

    return _make(data, (x,), bwd)


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention with n_heads heads.

    q: (T_q, d), k/v: (T_k, d); d must divide evenly by n_heads. `mask`, when
    given, is a constant (T_q, T_k) additive array (-inf blocks attention)
    applied before normalization.
    """
    tq, d = q.shape
    tk = k.shape[0]
    if k.shape != (tk, d) or v.shape != (tk, d):
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(x: Tensor, t: int) -> Tensor:
        return transpose(reshape(x, (t, n_heads, dh)), (1, 0, 2))

    qh = split(q, tq)
    kh = split(k, tk)
    vh = split(v, tk)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (tq, tk):
            raise ValueError(f"mask shape {mask.shape} does not match ({tq}, {tk})")
        scores = add(scores, mask[None, :, :] + np.zeros((n_heads, tq, tk)))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)
    return reshape(transpose(ctx, (1, 0, 2)), (tq, d))


# ---------------------------------------------------------------------------
# bridge for externally differentiated losses


def external_grad(value: float, grad: np.ndarray, parent: Tensor) -> Tensor:
    """Wrap a scalar loss whose gradient w.r.t. `parent` was computed outside
    the tape (the CTC / bigram-matching kernels)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != parent.data.shape:
        raise ValueError(
            f"external gradient shape {grad.shape} does not match parent {parent.shape}"
        )
    data = np.asarray(float(value))

    def bwd(out):
        def run():
            _accum_owned(parent, float(out.grad) * grad)

        return run

    return _make(data, (parent,), bwd)


# ---------------------------------------------------------------------------
# numerical checking helpers


def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
