"""Dense tensors with reverse-mode differentiation for the grasp networks.

The operation set is deliberately small: 2-D convolution (plain, dilated,
transposed), max pooling, ReLU, and the elementwise/sum arithmetic the loss
functions need. Arrays are NCHW, float32 by default; float64 is available for
high-precision gradient checks. Every op records enough on the produced node
to replay the trace backward exactly once per node.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractViolation, NonFiniteGradientError

DEFAULT_DTYPE = np.float32

_allocator_tuned = False


def tune_allocator():
    """Raise glibc's mmap/trim thresholds so the multi-megabyte activation
    buffers allocated every forward pass are recycled on the heap instead of
    being mmap'd and unmapped each time (which costs a page fault per 4 KiB).
    Idempotent; silently a no-op off glibc."""
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 64 << 20)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 256 << 20)  # M_TRIM_THRESHOLD
    except Exception:
        pass


# Transient buffers (padded inputs, im2col matrices) are recycled per thread so
# repeated forward/backward passes do not thrash the allocator. Nothing that
# escapes an op may live in a workspace.
_tls = threading.local()


def _workspace(tag, shape, dtype):
    cache = getattr(_tls, "buffers", None)
    if cache is None:
        cache = _tls.buffers = {}
    key = (tag, dtype)
    buf = cache.get(key)
    n = int(np.prod(shape))
    if buf is None or buf.size < n:
        buf = np.empty(n, dtype=dtype)
        cache[key] = buf
    return buf[:n].reshape(shape)


class Tensor:
    """A value grid plus the trace hooks needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _mul(other, -1.0) if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return _add(_mul(self, -1.0), other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __neg__(self):
        return _mul(self, -1.0)

    def sum(self):
        return _sum(self)

    # -- reverse pass -------------------------------------------------------

    def backward(self):
        """Propagate d(self)/d(node) to every node that fed this scalar.

        Visits each recorded node exactly once (reverse topological order) and
        accumulates into ``node.grad``. Parameters that never entered the
        trace keep ``grad is None``; callers treat that as an exact zero.
        """
        if self.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {tuple(self.data.shape)}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._grad_fn(node.grad)):
                if grad is None:
                    continue
                if parent.grad is None:
                    parent.grad = grad
                else:
                    parent.grad = parent.grad + grad


def _result(data, parents, grad_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _coerce_scalar(value, dtype):
    return np.asarray(value, dtype=dtype).reshape(())


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ConfigurationError(
            f"{op}: operand shapes differ: {tuple(a.data.shape)} vs {tuple(b.data.shape)}"
        )
    if a.data.dtype != b.data.dtype:
        raise ConfigurationError(
            f"{op}: operand dtypes differ: {a.data.dtype} vs {b.data.dtype}"
        )


def _add(a, other):
    if isinstance(other, Tensor):
        _check_same_shape(a, other, "add")
        data = a.data + other.data
        return _result(data, (a, other), lambda g: (g, g))
    s = _coerce_scalar(other, a.data.dtype)
    data = a.data + s
    return _result(data, (a,), lambda g: (g,))


def _mul(a, other):
    if isinstance(other, Tensor):
        _check_same_shape(a, other, "mul")
        data = a.data * other.data
        return _result(data, (a, other), lambda g: (g * other.data, g * a.data))
    s = _coerce_scalar(other, a.data.dtype)
    data = a.data * s
    return _result(data, (a,), lambda g: (g * s,))


def _sum(a):
    data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype).reshape(())
    shape = a.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(a.data.dtype, copy=True),)

    return _result(data, (a,), grad_fn)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); the gradient at exactly 0 is defined as 0."""
    if x.requires_grad:
        data = np.maximum(x.data, 0)

        def grad_fn(g):
            return (g * (x.data > 0),)

        return _result(data, (x,), grad_fn)
    # No trace to preserve: clamp in place to spare a full-map allocation.
    return Tensor(np.maximum(x.data, 0, out=x.data))


# -- convolution ------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one (possibly dilated or transposed) convolution layer."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def out_size(self, n: int) -> int:
        span = self.dilation * (self.kernel_size - 1) + 1
        out = (n + 2 * self.padding - span) // self.stride + 1
        if out < 1:
            raise ConfigurationError(
                f"conv output size {out} < 1 for input {n} with {self}"
            )
        return out

    def transpose_out_size(self, n: int) -> int:
        out = (n - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_size - 1) + 1
        if out < 1:
            raise ConfigurationError(
                f"transposed conv output size {out} < 1 for input {n} with {self}"
            )
        return out


def _check_nchw(x, spec, op):
    if x.data.ndim != 4:
        raise ConfigurationError(f"{op}: expected NCHW input, got shape {tuple(x.data.shape)}")
    if x.data.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"{op}: input has {x.data.shape[1]} channels but spec expects "
            f"{spec.in_channels} (input shape {tuple(x.data.shape)})"
        )


def _check_weights(w, expected, op):
    if tuple(w.data.shape) != expected:
        raise ConfigurationError(
            f"{op}: weight shape {tuple(w.data.shape)} does not match spec shape {expected}"
        )


def _pad_nchw(x, p, tag, dtype):
    if p == 0:
        return x
    n, c, h, w = x.shape
    buf = _workspace(tag, (n, c, h + 2 * p, w + 2 * p), dtype)
    buf[:, :, :p, :] = 0
    buf[:, :, h + p:, :] = 0
    buf[:, :, p:h + p, :p] = 0
    buf[:, :, p:h + p, w + p:] = 0
    buf[:, :, p:h + p, p:w + p] = x
    return buf


def _im2col(xp, k, stride, dilation, ho, wo, tag, dtype, row0=0, rows=None):
    # (N, C, Hp, Wp) -> (N, C*k*k, rows*wo) for output rows [row0, row0+rows);
    # per-tap strided copies keep the inner rows contiguous, which is what
    # makes this fast.
    rows = ho - row0 if rows is None else rows
    n, c = xp.shape[:2]
    cols = _workspace(tag, (n, c, k, k, rows, wo), dtype)
    hi = (rows - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    base = row0 * stride
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, base + a * dilation:base + a * dilation + hi:stride,
                                  b * dilation:b * dilation + wi:stride]
    return cols.reshape(n, c * k * k, rows * wo)


def _col_scatter(cols, k, stride, dilation, ho, wo, out_shape, dtype):
    # Adjoint of _im2col: overlap-add the tap planes back into a dense grid.
    n, c = out_shape[0], out_shape[1]
    out = np.zeros(out_shape, dtype=dtype)
    view = cols.reshape(n, c, k, k, ho, wo)
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    for a in range(k):
        for b in range(k):
            out[:, :, a * dilation:a * dilation + hi:stride,
                b * dilation:b * dilation + wi:stride] += view[:, :, a, b]
    return out


def _phase_scatter(cols, k, stride, h, w, pad, out_hw, dtype):
    # _col_scatter for upsampling layers (stride > 1, dilation 1): accumulate
    # per-phase into compact buffers with unit-stride adds, then interleave
    # directly into the cropped output. Equal results, but avoids k*k
    # read-modify-write passes over strided views of the large output grid.
    n, c = cols.shape[0], cols.shape[1] // (k * k)
    ho, wo = out_hw
    hb = (k - 1) // stride + h
    wb = (k - 1) // stride + w
    view = cols.reshape(n, c, k, k, h, w)
    buf = _workspace("deconv_phase", (stride, stride, n, c, hb, wb), dtype)
    buf[...] = 0
    for a in range(k):
        for b in range(k):
            buf[a % stride, b % stride, :, :, a // stride:a // stride + h,
                b // stride:b // stride + w] += view[:, :, a, b]
    out = np.zeros((n, c, ho, wo), dtype=dtype)
    for r in range(stride):
        # padded row m = r + stride*j lands on output row m - pad
        j0 = max(0, -(-(pad - r) // stride))
        m0 = r + stride * j0 - pad
        if m0 >= ho:
            continue
        cr = min(hb - j0, (ho - 1 - m0) // stride + 1)
        for s in range(stride):
            i0 = max(0, -(-(pad - s) // stride))
            m1 = s + stride * i0 - pad
            if m1 >= wo:
                continue
            cc = min(wb - i0, (wo - 1 - m1) // stride + 1)
            out[:, :, m0:m0 + stride * cr:stride, m1:m1 + stride * cc:stride] = \
                buf[r, s, :, :, j0:j0 + cr, i0:i0 + cc]
    return out


# Keep each im2col strip around this size so the GEMM reads it back from
# cache instead of DRAM; the big full-resolution layers are bandwidth-bound.
_STRIP_BYTES = 4 << 20


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """2-D convolution (cross-correlation) with stride, padding and dilation.

    ``weights`` is (out_channels, in_channels, k, k); dilation spaces the
    kernel taps without growing the parameter count.
    """
    _check_nchw(x, spec, "conv2d")
    k = spec.kernel_size
    _check_weights(weights, (spec.out_channels, spec.in_channels, k, k), "conv2d")
    n, c, h, w = x.data.shape
    ho, wo = spec.out_size(h), spec.out_size(w)
    dtype = x.data.dtype
    wm = weights.data.reshape(spec.out_channels, c * k * k)

    if k == 1 and spec.stride == 1 and spec.padding == 0:
        out = np.matmul(wm, x.data.reshape(n, c, h * w))
    else:
        xp = _pad_nchw(x.data, spec.padding, "conv_pad", dtype)
        row_bytes = n * c * k * k * wo * x.data.itemsize
        strip = min(ho, max(1, _STRIP_BYTES // max(1, row_bytes)))
        out = np.empty((n, spec.out_channels, ho * wo), dtype=dtype)
        for row0 in range(0, ho, strip):
            rows = min(strip, ho - row0)
            cols = _im2col(xp, k, spec.stride, spec.dilation, ho, wo,
                           "conv_cols", dtype, row0, rows)
            tmp = _workspace("conv_out", (n, spec.out_channels, rows * wo), dtype)
            np.matmul(wm, cols, out=tmp)
            out[:, :, row0 * wo:(row0 + rows) * wo] = tmp
    out += bias.data.reshape(1, -1, 1)
    out = out.reshape(n, spec.out_channels, ho, wo)

    def grad_fn(g):
        go = g.reshape(n, spec.out_channels, ho * wo)
        xp_b = _pad_nchw(x.data, spec.padding, "conv_pad_b", dtype)
        cols_b = _im2col(xp_b, k, spec.stride, spec.dilation, ho, wo, "conv_cols_b", dtype)
        gw = np.matmul(go, cols_b.transpose(0, 2, 1)).sum(axis=0)
        gcols = np.matmul(wm.T, go)
        pad_shape = (n, c, h + 2 * spec.padding, w + 2 * spec.padding)
        gxp = _col_scatter(gcols, k, spec.stride, spec.dilation, ho, wo, pad_shape, dtype)
        p = spec.padding
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        gb = go.sum(axis=(0, 2))
        return (np.ascontiguousarray(gx), gw.reshape(weights.data.shape), gb)

    return _result(out, (x, weights, bias), grad_fn)


def conv_transpose2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed convolution: the exact adjoint of conv2d's linear map.

    ``weights`` is (in_channels, out_channels, k, k), so the same weight
    tensor serves a conv2d C->O and its adjoint O->C, and
    <conv2d(x,w), y> == <x, conv_transpose2d(y,w)> holds with zero bias.
    """
    _check_nchw(x, spec, "conv_transpose2d")
    k = spec.kernel_size
    _check_weights(weights, (spec.in_channels, spec.out_channels, k, k), "conv_transpose2d")
    n, c, h, w = x.data.shape
    ho, wo = spec.transpose_out_size(h), spec.transpose_out_size(w)
    dtype = x.data.dtype
    p = spec.padding

    wm = weights.data.reshape(c, spec.out_channels * k * k)
    cols = _workspace("deconv_cols", (n, spec.out_channels * k * k, h * w), dtype)
    np.matmul(wm.T, x.data.reshape(n, c, h * w), out=cols)
    if spec.dilation == 1 and spec.stride > 1:
        out = _phase_scatter(cols, k, spec.stride, h, w, p, (ho, wo), dtype)
    else:
        pad_shape = (n, spec.out_channels, ho + 2 * p, wo + 2 * p)
        yp = _col_scatter(cols, k, spec.stride, spec.dilation, h, w, pad_shape, dtype)
        out = np.ascontiguousarray(yp[:, :, p:p + ho, p:p + wo]) if p else yp
    out += bias.data.reshape(1, -1, 1, 1)

    def grad_fn(g):
        gp = _pad_nchw(g, p, "deconv_pad_b", dtype)
        gcols = _im2col(gp, k, spec.stride, spec.dilation, h, w, "deconv_cols_b", dtype)
        gx = np.matmul(wm, gcols).reshape(n, c, h, w)
        gw = np.matmul(x.data.reshape(n, c, h * w), gcols.transpose(0, 2, 1)).sum(axis=0)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw.reshape(weights.data.shape), gb)

    return _result(out, (x, weights, bias), grad_fn)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over window x window patches; gradient flows to the first
    (row-major) maximal element of each window."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise ConfigurationError(f"maxpool2d: expected NCHW input, got {tuple(x.data.shape)}")
    n, c, h, w = x.data.shape
    if window > h or window > w:
        raise ConfigurationError(f"maxpool2d: window {window} exceeds spatial size {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1

    out = None
    for a in range(window):
        for b in range(window):
            plane = x.data[:, :, a:a + hi:stride, b:b + wi:stride]
            if out is None:
                out = plane.copy()
            else:
                np.maximum(out, plane, out=out)

    if x.requires_grad:
        sw = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        amax = sw.reshape(n, c, ho, wo, window * window).argmax(axis=-1)
    else:
        amax = None

    def grad_fn(g):
        gi, gj = np.divmod(amax, window)
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oi[None, None] * stride + gi
        cols = oj[None, None] * stride + gj
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        nn = nn[:, :, None, None]
        cc = cc[:, :, None, None]
        gx = np.zeros_like(x.data)
        if stride >= window:
            gx[nn, cc, rows, cols] = g
        else:
            np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return _result(out, (x,), grad_fn)


# -- parameters and optimization ---------------------------------------------


def he_uniform(shape, fan_in, rng, dtype=DEFAULT_DTYPE):
    """Fan-in-scaled uniform init suited to ReLU stacks; deterministic per rng."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list.

    The update order follows the parameter list, so two runs fed identical
    gradients produce bit-identical parameters. A non-finite gradient aborts
    the whole step before any parameter is touched.
    """

    def __init__(self, params, config: AdamConfig | None = None):
        self.params = [(name, p) for name, p in params]
        self.config = config or AdamConfig()
        self.t = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for _, p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        cfg = self.config
        grads = []
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
            grads.append(np.asarray(g, dtype=np.float64))
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for (name, p), g, m, v in zip(self.params, grads, self._m, self._v):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data.astype(np.float64)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= update.astype(p.data.dtype)
