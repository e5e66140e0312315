"""Dense tensors with tape-based reverse-mode differentiation.

Every op computes its forward value eagerly with numpy.  When a :class:`Tape`
is active and at least one input requires a gradient, the op appends a node
``(output, inputs, backward_fn)`` to that tape.  :func:`backward` walks the
nodes in reverse and accumulates gradients additively, so a tensor that is
used twice (tied weights) receives the sum of both path contributions.

Outside a tape nothing is recorded, which is what decoding uses.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_DEBUG = os.environ.get("PREFIXVLM_DEBUG", "") not in ("", "0")
_TAPES: list["Tape"] = []

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def set_debug(flag: bool) -> None:
    """Toggle the non-finite output check run after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64) if arr.dtype.kind != "b" else arr
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("trainable",)

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable

    @property
    def tensor(self) -> Tensor:
        return self


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded on this tape.  Tapes nest, the innermost one records.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {name}")


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG:
        _check_finite(name, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        s = b

        def bw_scalar(g):
            return (g * s,)

        return _emit("mul", a.data * a.dtype.type(s), (a,), bw_scalar)
    a, b = _coerce_pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    v = x.data
    dt = v.dtype.type
    inner = dt(GELU_C) * (v + dt(GELU_A) * v * v * v)
    t = np.tanh(inner)
    out = dt(0.5) * v * (dt(1.0) + t)

    def bw(g):
        dinner = dt(GELU_C) * (dt(1.0) + dt(3.0 * GELU_A) * v * v)
        d = dt(0.5) * (dt(1.0) + t) + dt(0.5) * v * (dt(1.0) - t * t) * dinner
        return (g * d,)

    return _emit("gelu", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def bw(g):
        return (g * keep,)

    return _emit("relu", x.data * keep, (x,), bw)


# ----------------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _emit("reshape", x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _emit("transpose", x.data.transpose(axes), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in idx)

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]`` along axis 0 (embedding lookup)."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"index out of range for table with {table.shape[0]} rows")
    rows, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(rows, dtype=dtype)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + rows[1:]))
        return (out,)

    return _emit("take", table.data[index], (table,), bw)


def take_last(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[..., index]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    shape, dtype = table.shape, table.dtype
    flat = index.reshape(-1)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        g2 = g.reshape(shape[:-1] + (flat.size,))
        np.add.at(out, (Ellipsis, flat), g2)
        return (out,)

    return _emit("take_last", table.data[..., index], (table,), bw)


# ----------------------------------------------------------------------------
# reductions and contractions
# ----------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul batch dims not broadcastable: {a.shape} x {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` laid out [in, out]; folds leading dims into one GEMM."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} x {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, bw)


# ----------------------------------------------------------------------------
# normalization, softmax, losses
# ----------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    v = x.data
    dt = v.dtype.type
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(v.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (x, gain, bias), bw)


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Single-group normalization over (C, H, W) of a [B, C, H, W] tensor.

    Statistics are per sample, so results do not depend on batch composition.
    """
    v = x.data
    dt = v.dtype.type
    red = (1, 2, 3)
    n = v.shape[1] * v.shape[2] * v.shape[3]
    mu = v.mean(axis=red, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=red, keepdims=True)
    rstd = dt(1.0) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    g4 = gain.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx_hat = g * g4
        s1 = gx_hat.sum(axis=red, keepdims=True) / dt(n)
        s2 = (gx_hat * xhat).sum(axis=red, keepdims=True) / dt(n)
        gx = rstd * (gx_hat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("group_norm", out, (x, gain, bias), bw)


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; disallowed entries are exactly 0.

    ``mask`` broadcasts against ``logits``.  A query row with no allowed key is
    an error rather than a silent NaN.
    """
    v = logits.data
    if mask is None:
        z = v - v.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not m.any(axis=-1).all():
            raise ValueError("empty attention row")
        z = np.where(m, v, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("masked_softmax", y, (logits,), bw)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    loss_mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Without ``weights`` the result is the mean over unmasked positions.  With
    ``weights`` it is ``sum(weights * mask * nll)``, which lets callers apply
    per-sample normalization.
    """
    v = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != v.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {v.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v.shape[-1]):
        raise ValueError("target id outside vocabulary")
    mask = np.ones(targets.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    dt = v.dtype.type
    if weights is None:
        count = int(mask.sum())
        if count == 0:
            raise ValueError("empty loss")
        w = mask.astype(v.dtype) / dt(count)
    else:
        w = np.asarray(weights, dtype=v.dtype) * mask
    logp = log_softmax_np(v)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum()

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - dt(1.0), -1)
        return (p * (w[..., None] * g),)

    return _emit("cross_entropy", np.asarray(loss, dtype=v.dtype), (logits,), bw)


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation. ``x`` is [C, H, W] or [B, C, H, W]; ``w`` is [C_out, C_in, kh, kw]."""
    unbatched = x.ndim == 3
    xv = x.data[None] if unbatched else x.data
    B, C, H, W = xv.shape
    co, ci, kh, kw = w.shape
    if ci != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    ho, wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, C * kh * kw)
    wmat = w.data.reshape(co, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, ho, wo, co).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]

    def bw(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(B, ho, wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        if unbatched:
            gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", np.ascontiguousarray(out), inputs, bw)


# ----------------------------------------------------------------------------
# reverse pass and verification
# ----------------------------------------------------------------------------


class Gradients(dict):
    """Mapping tensor -> gradient array, keyed by tensor identity."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Reverse-accumulate d(loss)/d(t) over ``tape``.

    With ``wrt`` given, returns exactly those tensors' gradients (zeros for any
    not reachable from ``loss``); intermediate tensors are allowed.  Without
    it, returns gradients for every leaf that required grad.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    wanted = None if wrt is None else list(wrt)
    keep = set() if wanted is None else {id(t) for t in wanted}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for out, inputs, fn in reversed(tape.nodes):
        produced.add(id(out))
        g = grads.get(id(out)) if id(out) in keep else grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = inp
    result = Gradients()
    if wanted is None:
        for key, t in leaves.items():
            if key not in produced:
                result[t] = grads[key]
        return result
    for t in wanted:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        result[t] = g.reshape(t.shape) if g.shape != t.shape else g
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    p: Tensor,
    step: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
    floor: float = 1e-6,
    order: int = 2,
) -> float:
    """Max relative error between backward and central differences for ``p``.

    ``f`` is re-evaluated after in-place perturbation of ``p.data``; it must be
    deterministic.  ``indices`` limits the check to selected elements.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``step``
    and so loses far fewer digits to cancellation.
    """
    if p.dtype != np.float64:
        raise TypeError("grad_check requires float64 tensors")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, wrt=[p])[p]
    if indices is None:
        indices = list(np.ndindex(p.shape))

    def at(idx, orig, delta):
        p.data[idx] = orig + delta
        return float(f().data)

    worst = 0.0
    for idx in indices:
        orig = p.data[idx]
        if order == 2:
            numeric = (at(idx, orig, step) - at(idx, orig, -step)) / (2.0 * step)
        else:
            numeric = (8.0 * (at(idx, orig, step) - at(idx, orig, -step)) - (at(idx, orig, 2 * step) - at(idx, orig, -2 * step))) / (12.0 * step)
        p.data[idx] = orig
        err = float(relative_error(np.asarray(analytic[idx]), np.asarray(numeric), floor))
        worst = max(worst, err)
    return worst
