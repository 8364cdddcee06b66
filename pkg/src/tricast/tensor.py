"""numpy-backed reverse-mode automatic differentiation on an explicit tape.

Ops run as plain numpy when no tape is active.  Inside a ``with Tape() as
tape:`` block every op touching a tracked tensor appends a node; the tape
replays those nodes in reverse to accumulate gradients into leaf tensors.
One training step owns exactly one tape (plus short-lived sub-tapes inside
chunked rendering); a tape can be backwarded once.

Single precision is the training default.  Gradient checking runs the same
code paths in float64 — ops inherit the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor", "Tape", "TapeError", "NumericError", "no_tape", "backward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "tanh",
    "sigmoid", "relu", "gelu", "softplus", "clip_min", "pow_const",
    "matmul", "softmax", "layer_norm", "conv2d", "conv2d_transpose",
    "bilinear_sample", "composite", "gather_rows",
    "reduce_sum", "reduce_mean", "reduce_max", "reduce",
    "reshape", "transpose", "concat", "stack",
    "check_gradient", "live_saved_floats", "peak_saved_floats",
    "reset_peak_saved_floats",
]


class TapeError(RuntimeError):
    """Misuse of the gradient tape (double backward, non-scalar loss, ...)."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


_ACTIVE_TAPE: "Tape | None" = None

# Live-activation instrumentation: every recorded node contributes its output
# size (plus explicitly declared extras such as im2col buffers) while its tape
# is alive.  The high-water mark backs the chunked-rendering memory contract.
_LIVE_FLOATS = 0
_PEAK_FLOATS = 0


def live_saved_floats() -> int:
    return _LIVE_FLOATS


def peak_saved_floats() -> int:
    return _PEAK_FLOATS


def reset_peak_saved_floats() -> None:
    global _PEAK_FLOATS
    _PEAK_FLOATS = _LIVE_FLOATS


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if (arr.dtype == np.float64 and dtype is None
                and not isinstance(data, (np.ndarray, np.generic))):
            # python floats/lists default to float32; explicit dtype and
            # numpy-carried dtypes (arrays and scalars alike) win
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: "Tape | None" = None

    # ---- introspection ----
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # ---- graph utilities ----
    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None):
        if self._tape is None:
            raise TapeError("tensor is not attached to a tape")
        return self._tape.backward(self, seed=seed)

    # ---- operators ----
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Append-only record of op applications; reverse replay = backprop."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._released = False
        self._saved_floats = 0
        self._prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable,
               extra_saved: int = 0) -> None:
        global _LIVE_FLOATS, _PEAK_FLOATS
        self._nodes.append((out, inputs, backward_fn))
        n = out.data.size + extra_saved
        self._saved_floats += n
        _LIVE_FLOATS += n
        if _LIVE_FLOATS > _PEAK_FLOATS:
            _PEAK_FLOATS = _LIVE_FLOATS

    def release(self) -> None:
        """Drop saved activations (backward is no longer possible)."""
        global _LIVE_FLOATS
        if not self._released:
            _LIVE_FLOATS -= self._saved_floats
            self._saved_floats = 0
            self._nodes = []
            self._released = True
            self._consumed = True

    def __del__(self):
        try:
            self.release()
        except Exception:  # pragma: no cover - interpreter teardown
            pass

    def backward(self, root, seed=None) -> dict[Tensor, np.ndarray]:
        """Backpropagate from ``root`` (a Tensor, or a list of (Tensor, seed)).

        Returns {leaf tensor: gradient} and accumulates into each leaf's
        ``.grad``.  A scalar root defaults to seed 1; non-scalar roots require
        an explicit seed array.  A tape can be backwarded exactly once.
        """
        if self._consumed:
            raise TapeError("tape already backwarded; build a new tape")
        self._consumed = True

        if isinstance(root, Tensor):
            roots = [(root, seed)]
        else:
            roots = list(root)

        grads: dict[int, np.ndarray] = {}
        registry: dict[int, Tensor] = {}
        for t, s in roots:
            if s is None:
                if t.data.size != 1:
                    raise TapeError("backward root must be scalar or carry an explicit seed")
                if not np.isfinite(t.data).all():
                    raise NumericError("backward root is not finite")
                s = np.ones_like(t.data)
            else:
                s = np.asarray(s, dtype=t.data.dtype)
                if s.shape != t.data.shape:
                    raise TapeError(f"seed shape {s.shape} != root shape {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + s
            else:
                grads[key] = s
            registry[key] = t

        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward_fn(g)
            for t, ig in zip(inputs, in_grads):
                if ig is None or not _tracked_on(t, self):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                registry[key] = t

        result: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            t = registry[key]
            if not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g
            result[t] = g
        self.release()
        return result


@contextlib.contextmanager
def no_tape():
    """Temporarily disable recording (inference inside a training step)."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Module-level convenience: backprop a scalar loss through its tape."""
    return loss.backward()


def _tracked_on(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _wrap(x, like: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if np.isscalar(x) or isinstance(x, (int, float)) else None))


def _apply(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable,
           extra_saved: int = 0) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(_tracked_on(t, tape) for t in inputs):
        out._tape = tape
        tape.record(out, inputs, backward_fn, extra_saved)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy trailing-dim broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.data)
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _apply(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.data)
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _apply(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply(ad * bd, (a, b), bwd)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _apply(ad / bd, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def pow_const(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1),)

    return _apply(ad ** p, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _apply(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _apply(np.log(ad), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return _apply(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _apply(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _apply(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0)

    def bwd(g):
        return (g * (ad > 0),)

    return _apply(out, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _apply(0.5 * x * (1.0 + th), (a,), bwd, extra_saved=th.size)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    x = a.data
    out = np.logaddexp(np.zeros((), dtype=x.dtype), x)

    def bwd(g):
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * sig,)

    return _apply(out, (a,), bwd)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(x, lo) with gradient gated to x > lo."""
    ad = a.data

    def bwd(g):
        return (g * (ad > lo),)

    return _apply(np.maximum(ad, lo), (a,), bwd)


# ---------------------------------------------------------------------------
# matmul / softmax / layer_norm
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        if bd.ndim == 1:
            ga = np.outer(g, bd) if ad.ndim > 1 else g * bd
            gb = ad.T @ g if ad.ndim > 1 else g * ad
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        if ad.ndim == 1 and bd.ndim == 2:
            # vector @ matrix: out is 1-D, grads are vector/outer products
            return g @ bd.T, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _apply(ad @ bd, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply(out, (a,), bwd, extra_saved=out.size)


def layer_norm(x: Tensor, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xm = xd - mu
    var = (xm * xm).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xm * inv
    gd = gamma.data

    def bwd(g):
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _apply(xhat * gd + beta.data, (x, gamma, beta), bwd,
                  extra_saved=xhat.size)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: (N, C, Hp, Wp) already padded
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, w: Tensor, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding.  x: (C,H,W) or (N,C,H,W)."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    f, cin, kh, kw = wd.shape
    n, c, h, wdim = xd.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input {c} vs kernel {cin}")
    if h + 2 * pad < kh or wdim + 2 * pad < kw:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2 = wd.reshape(f, -1)
    out = (cols @ w2.T).transpose(0, 2, 1).reshape(n, f, ho, wo)
    has_b = b is not None
    if has_b:
        b = b if isinstance(b, Tensor) else Tensor(b)
        out = out + b.data[None, :, None, None]

    def bwd(g):
        if squeeze:
            g = g[None]
        g2 = g.reshape(n, f, ho * wo).transpose(0, 2, 1)           # (N,L,F)
        dw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(wd.shape)
        dcols = g2 @ w2                                            # (N,L,CKK)
        dxp = np.zeros_like(xp)
        dc = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wdim] if pad else dxp
        if squeeze:
            dx = dx[0]
        db = g.sum(axis=(0, 2, 3)) if has_b else None
        return (dx, dw, db) if has_b else (dx, dw)

    inputs = (x, w, b) if has_b else (x, w)
    out_t = _apply(out[0] if squeeze else out, inputs, bwd, extra_saved=cols.size)
    return out_t


def conv2d_transpose(x: Tensor, w: Tensor, b=None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution (gradient of conv2d w.r.t. its input).

    x: (C,H,W) or (N,C,H,W); w: (C_in, C_out, kh, kw).
    Output spatial extent: (H-1)*stride + kh - 2*pad.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    cin, cout, kh, kw = wd.shape
    n, c, h, wdim = xd.shape
    if c != cin:
        raise ValueError(f"conv2d_transpose channel mismatch: input {c} vs kernel {cin}")
    ho = (h - 1) * stride + kh - 2 * pad
    wo = (wdim - 1) * stride + kw - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d_transpose output size would be non-positive")
    w2 = wd.reshape(cin, cout * kh * kw)
    x2 = xd.reshape(n, cin, h * wdim).transpose(0, 2, 1)           # (N,L,Cin)
    prod = (x2 @ w2).reshape(n, h, wdim, cout, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    outp = np.zeros((n, cout, ho + 2 * pad, wo + 2 * pad), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            outp[:, :, i:i + stride * h:stride, j:j + stride * wdim:stride] += prod[:, :, i, j]
    out = outp[:, :, pad:pad + ho, pad:pad + wo]
    has_b = b is not None
    if has_b:
        b = b if isinstance(b, Tensor) else Tensor(b)
        out = out + b.data[None, :, None, None]

    def bwd(g):
        if squeeze:
            g = g[None]
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        # gather the windows that forward scattered into
        dprod = np.empty((n, cout, kh, kw, h, wdim), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dprod[:, :, i, j] = gp[:, :, i:i + stride * h:stride, j:j + stride * wdim:stride]
        dp2 = dprod.transpose(0, 4, 5, 1, 2, 3).reshape(n, h * wdim, cout * kh * kw)
        dx = (dp2 @ w2.T).transpose(0, 2, 1).reshape(n, cin, h, wdim)
        dw = np.tensordot(x2, dp2, axes=([0, 1], [0, 1])).reshape(wd.shape)
        if squeeze:
            dx = dx[0]
        db = g.sum(axis=(0, 2, 3)) if has_b else None
        return (dx, dw, db) if has_b else (dx, dw)

    inputs = (x, w, b) if has_b else (x, w)
    return _apply(out[0] if squeeze else out, inputs, bwd, extra_saved=prod.size)


# ---------------------------------------------------------------------------
# plane sampling / volume compositing (kernel-backed)
# ---------------------------------------------------------------------------

def bilinear_sample(plane: Tensor, uv: Tensor) -> Tensor:
    """Sample a (H,W,D) plane at uv in [-1,1]².

    (-1,-1) maps to the center of texel [0,0], (+1,+1) to texel [H-1,W-1];
    u indexes columns, v indexes rows.  Out-of-range uv are clamped (with
    zero positional gradient outside).  Differentiable w.r.t. both inputs.
    """
    pd, uvd = np.ascontiguousarray(plane.data), uv.data
    if not np.isfinite(uvd).all():
        raise NumericError("bilinear_sample: non-finite uv")
    h, w, _ = pd.shape
    sx = (w - 1) * 0.5
    sy = (h - 1) * 0.5
    x = (uvd[:, 0] + 1.0) * sx
    y = (uvd[:, 1] + 1.0) * sy
    # texel coords in the plane's dtype so the compiled kernel sees one type
    xc = np.ascontiguousarray(np.clip(x, 0.0, w - 1.0), dtype=pd.dtype)
    yc = np.ascontiguousarray(np.clip(y, 0.0, h - 1.0), dtype=pd.dtype)
    out = _kernels.bilinear_forward(pd, xc, yc)

    def bwd(g):
        dplane, dxt, dyt = _kernels.bilinear_backward(
            pd, xc, yc, np.ascontiguousarray(g, dtype=pd.dtype))
        gate_x = (x > 0.0) & (x < w - 1.0)
        gate_y = (y > 0.0) & (y < h - 1.0)
        duv = np.stack([dxt * sx * gate_x, dyt * sy * gate_y], axis=1)
        return dplane, duv.astype(uvd.dtype, copy=False)

    return _apply(out, (plane, uv), bwd, extra_saved=uvd.size)


def composite(sigma: Tensor, rgb: Tensor, tmid: np.ndarray, delta: np.ndarray,
              background: np.ndarray) -> Tensor:
    """Emission-absorption compositing along rays.

    sigma: (R,S) non-negative densities; rgb: (R,S,3); tmid/delta: (R,S)
    sample positions and spacings (constants); background: (3,).
    Returns packed (R,5): [r,g,b, Σw·t, opacity] with w_k = T_k·α_k,
    α_k = 1 - exp(-σ_k δ_k), T_k = Π_{j<k}(1-α_j).
    """
    sd, cd = sigma.data, rgb.data
    tmid = np.ascontiguousarray(tmid, dtype=sd.dtype)
    delta = np.ascontiguousarray(delta, dtype=sd.dtype)
    bg = np.ascontiguousarray(background, dtype=sd.dtype)
    out = _kernels.composite_forward(np.ascontiguousarray(sd),
                                     np.ascontiguousarray(cd), delta, tmid, bg)

    def bwd(g):
        dsigma, drgb = _kernels.composite_backward(
            np.ascontiguousarray(sd), np.ascontiguousarray(cd), delta, tmid, bg,
            np.ascontiguousarray(g))
        return dsigma, drgb

    return _apply(out, (sigma, rgb), bwd, extra_saved=sd.size)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    td = table.data

    def bwd(g):
        dt = np.zeros_like(td)
        np.add.at(dt, ids, g)
        return (dt,)

    return _apply(td[ids], (table,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _apply(ad.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    axes = _norm_axis(axis, ad.ndim)
    count = ad.size if axes is None else int(np.prod([ad.shape[i] for i in axes]))
    if count == 0:
        raise ValueError("mean over empty reduction")
    inv = np.asarray(1.0 / count, dtype=ad.dtype)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, ad.shape).copy(),)

    return _apply(ad.mean(axis=axes, keepdims=keepdims), (a,), bwd)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduce; gradient flows to the first argmax (lowest index)."""
    ad = a.data
    if ad.size == 0:
        raise ValueError("max over empty tensor")
    if axis is None:
        idx = int(np.argmax(ad))
        out = ad.reshape(-1)[idx]
        if keepdims:
            out = np.asarray(out).reshape((1,) * ad.ndim)

        def bwd(g):
            dx = np.zeros_like(ad)
            dx.reshape(-1)[idx] = np.asarray(g).reshape(-1)[0]
            return (dx,)

        return _apply(np.asarray(out), (a,), bwd)

    ax = axis % ad.ndim
    idx = np.argmax(ad, axis=ax)
    out = np.take_along_axis(ad, np.expand_dims(idx, ax), ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        dx = np.zeros_like(ad)
        np.put_along_axis(dx, np.expand_dims(idx, ax), g, ax)
        return (dx,)

    return _apply(out, (a,), bwd)


def reduce(kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    try:
        fn = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}[kind]
    except KeyError:
        raise ValueError(f"unknown reduction kind {kind!r}") from None
    return fn(a, axis, keepdims)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _apply(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _apply(a.data.transpose(axes), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:])
                for t in tensors]
    return concat(expanded, axis=axis)


def _getitem(a: Tensor, idx) -> Tensor:
    ad = a.data

    def bwd(g):
        dx = np.zeros_like(ad)
        dx[idx] = g
        return (dx,)

    return _apply(ad[idx], (a,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def check_gradient(f: Callable, xs, h: float = 1e-4) -> float:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``xs`` is a Tensor or a list of Tensors (float64 strongly recommended —
    single-precision finite differences are too noisy to meet tight
    tolerances).  Returns max over coordinates of
    |analytic − fd| / max(1, |fd|).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.requires_grad = True
        x.zero_grad()

    with Tape() as tape:
        loss = f(*xs)
    if loss.data.size != 1:
        raise TapeError("check_gradient requires a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise NumericError("check_gradient: non-finite loss")
    tape.backward(loss)

    worst = 0.0
    for x in xs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            f_plus = float(f(*xs).data)
            flat[i] = orig - step
            f_minus = float(f(*xs).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError("check_gradient: non-finite value at perturbed point")
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
