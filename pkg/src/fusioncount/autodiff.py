"""Minimal reverse-mode autodiff over numpy arrays.

Values flow through :class:`Tensor` nodes; every operation records its
parents and a backward closure, and ``Tensor.backward()`` replays the
recorded graph in reverse topological order.  Storage is float32 by
default; reductions and the finite-difference oracle accumulate in
float64 so gradient checks stay meaningful.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)

_KINK_TRACE = None


@contextmanager
def trace_kinks():
    """Collect (kind, margin) pairs for every piecewise operation hit.

    The margin is the distance of the nearest input coordinate to the
    operation's nondifferentiable point.  Gradient-check fixtures use
    this to pick inputs whose finite-difference steps cannot cross a
    kink, which would otherwise poison the comparison.
    """
    global _KINK_TRACE
    prev, _KINK_TRACE = _KINK_TRACE, []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def _note_kink(kind, margin):
    if _KINK_TRACE is not None:
        _KINK_TRACE.append((kind, float(margin)))


class Tensor:
    """A dense array with an optional gradient slot.

    Tensors produced by operations are immutable by convention: the
    graph caches forward values for the backward pass, so mutating
    ``data`` in place invalidates recorded gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_TYPES else np.float32
        arr = arr.astype(dtype, copy=False)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Propagate d(self)/d(leaf) to every reachable leaf.

        Only defined for scalar outputs (a single loss value).
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar output, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _node(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def as_tensor(value, dtype=None):
    """Wrap ``value`` as a constant (no-grad) Tensor if it is not one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    data = a.data + b.data

    def backward(g):
        _accumulate(a, g if a.shape == data.shape else g.sum(dtype=g.dtype))
        _accumulate(b, g if b.shape == data.shape else g.sum(dtype=g.dtype))

    return _node(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} differ")
    data = a.data - b.data

    def backward(g):
        _accumulate(a, g if a.shape == data.shape else g.sum(dtype=g.dtype))
        _accumulate(b, -g if b.shape == data.shape else -g.sum(dtype=g.dtype))

    return _node(data, (a, b), backward)


def mul(a, b):
    """Elementwise product; either operand may be a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        s = float(b)
        return _node(a.data * s, (a,), lambda g: _accumulate(a, g * s))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ")
    data = a.data * b.data

    def backward(g):
        ga, gb = g * b.data, g * a.data
        _accumulate(a, ga if a.shape == ga.shape else ga.sum(dtype=g.dtype))
        _accumulate(b, gb if b.shape == gb.shape else gb.sum(dtype=g.dtype))

    return _node(data, (a, b), backward)


def relu(x):
    x = as_tensor(x)
    if x.data.size:
        _note_kink("relu", np.abs(x.data).min())
    mask = x.data > 0
    return _node(
        np.where(mask, x.data, 0).astype(x.dtype),
        (x,),
        lambda g: _accumulate(x, np.where(mask, g, 0)),
    )


_SIGMOID_CLAMP = 30.0  # exp argument bound; saturation error < 1e-13


def sigmoid(x):
    """Logistic function with the exponent clamped to +-30 before exp."""
    x = as_tensor(x)
    if x.data.size:
        _note_kink("sigmoid_clamp", np.abs(np.abs(x.data) - _SIGMOID_CLAMP).min())
    z = np.clip(x.data, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)
    s = 1.0 / (1.0 + np.exp(-z))

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    return _node(s.astype(x.dtype), (x,), backward)


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: requires strictly positive input")
    return _node(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data))


def clip(x, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only inside the band."""
    x = as_tensor(x)
    if x.data.size:
        # margin relative to the distance from the nearer extreme: values
        # deep in saturation only drift multiplicatively, so the hazard
        # band around each bound scales with the bound itself
        rel_lo = np.abs(x.data - lo) / max(abs(lo), 1e-300)
        rel_hi = np.abs(x.data - hi) / max(abs(1.0 - hi), abs(hi), 1e-300)
        _note_kink("clip", min(rel_lo.min(), rel_hi.min()))
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(data, (x,), lambda g: _accumulate(x, np.where(inside, g, 0)))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _node(data, (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def mat_t(x):
    """Transpose the last two axes."""
    x = as_tensor(x)
    data = np.ascontiguousarray(x.data.swapaxes(-1, -2))
    return _node(data, (x,), lambda g: _accumulate(x, g.swapaxes(-1, -2)))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, result stored at input precision)


def sum_all(x):
    x = as_tensor(x)
    data = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return _node(data, (x,), backward)


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size
    data = np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=x.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).astype(x.dtype))

    return _node(data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product of 2-d operands, or batched over a leading axis for 3-d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim != a.data.ndim:
        raise ValueError(f"matmul: expects matching 2-d or 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul: batch sizes disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _node(data, (a, b), backward)


def softmax_rows(x):
    """Row-wise softmax along the last axis, stabilized by row-max subtraction."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ValueError("softmax_rows: needs at least 2 dimensions")
    if np.isnan(x.data).any():
        raise ValueError("softmax_rows: NaN input rejected")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _node(y.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# spatial ops on (n, c, h, w) maps


def _pad2d(x, pad):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:-pad, pad:-pad] = x
    return out


def _corr2d(x, w, stride, pad):
    # cross-correlation core shared by conv2d forward and its input gradient
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        w2 = w.reshape(co, ci)
        if n == 1:
            out = (w2 @ x.reshape(ci, h * wd)).reshape(1, co, h, wd)
        else:
            out = np.tensordot(w2, x, axes=([1], [1])).swapaxes(0, 1)
        return out, x
    xp = _pad2d(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), xp


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-d convolution (cross-correlation) of an (n, ci, h, w) batch.

    ``weight`` has shape (co, ci, kh, kw) with odd kernel dims; ``bias``
    is a length-co vector or None.  The padded extent must divide evenly
    by ``stride``.  Differentiable in input, weight and bias.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d: input and weight must be 4-d, got {x.shape} and {weight.shape}"
        )
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = weight.shape
    if ci != ci_w:
        raise ValueError(
            f"conv2d: input has {ci} channels but weight expects {ci_w} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ValueError(
            f"conv2d: spatial extent {h}x{wd} with pad {pad} does not tile at stride {stride}"
        )
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")

    out, xp = _corr2d(x.data, weight.data, stride, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            if stride > 1:
                win = win[:, :, ::stride, ::stride]
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (co, ci, kh, kw)
            _accumulate(weight, dw)
        if x.requires_grad:
            oh, ow = g.shape[2], g.shape[3]
            if stride > 1:
                gd = np.zeros(
                    (n, co, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype
                )
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].swapaxes(0, 1))
            dx_full, _ = _corr2d(gd, wf, 1, kh - 1)
            if pad:
                dx_full = dx_full[:, :, pad:pad + h, pad:pad + wd]
            _accumulate(x, dx_full)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def avgpool2(x):
    """2x2 average pooling; spatial dims must be even."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2: spatial dims must be even, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] * 0.25, (n, c, h // 2, 2, w // 2, 2)
        ).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _node(data.astype(x.dtype), (x,), backward)


_UPSAMPLE_CACHE = {}


def _upsample_matrix(size, dtype):
    # 1-d bilinear x2 weights with half-pixel-aligned sampling:
    # source coordinate of output i is (i + 0.5)/2 - 0.5, clamped at edges.
    key = (size, np.dtype(dtype).name)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * size, size), dtype=dtype)
        for i in range(2 * size):
            src = (i + 0.5) / 2.0 - 0.5
            j0 = int(np.floor(src))
            t = src - j0
            j0c = min(max(j0, 0), size - 1)
            j1c = min(max(j0 + 1, 0), size - 1)
            m[i, j0c] += 1.0 - t
            m[i, j1c] += t
        _UPSAMPLE_CACHE[key] = m
    return m


def upsample2(x):
    """Bilinear x2 upsampling with half-pixel-aligned corners.

    A 1-d row [a, b] maps to [a, 0.75a + 0.25b, 0.25a + 0.75b, b]; the
    2-d kernel is the separable product of that rule in each axis.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    ry = _upsample_matrix(h, x.dtype)
    rx = _upsample_matrix(w, x.dtype)
    tmp = np.einsum("nchw,Ww->nchW", x.data, rx)
    data = np.einsum("nchW,Hh->ncHW", tmp, ry)

    def backward(g):
        gt = np.einsum("ncHW,Hh->nchW", g, ry)
        _accumulate(x, np.einsum("nchW,Ww->nchw", gt, rx))

    return _node(np.ascontiguousarray(data), (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(fn, inputs, eps=1e-3):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` must map the given tensors to a scalar Tensor.  All inputs are
    promoted to float64 copies so the differencing happens at 64-bit
    precision; the analytic pass runs on the same copies.  Returns the
    maximum over every input coordinate of

        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    A non-finite analytic gradient is reported as ``inf`` (failure).
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    work = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = fn(*work)
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar")
    out.backward()
    analytic = []
    for t in work:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            return float("inf")
        analytic.append(g.reshape(-1).copy())
        t.grad = None
        t.requires_grad = False  # differencing needs forward values only

    max_rel = 0.0
    for t, ga in zip(work, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            plus = fn(*work).item()
            flat[i] = saved - eps
            minus = fn(*work).item()
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * eps)
            rel = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel
