"""Dense tensor arithmetic with record/replay reverse-mode differentiation.

Every operation builds a node in a computation record (a DAG of ``Tensor``
objects).  Calling :func:`backward` on a scalar node walks the record in
reverse topological order and accumulates exact gradients into every
reachable :class:`Parameter`.  Values are plain numpy arrays; float32 is the
training precision, float64 the testing precision.  Tensors are treated as
immutable after construction; only Parameters are mutated (by the optimizer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "Parameter",
    "constant",
    "add", "sub", "mul", "div", "neg", "pow_", "exp", "log", "sqrt", "square",
    "sigmoid", "silu", "softplus", "erf", "gauss_cdf", "clip",
    "sum_", "mean", "reshape", "transpose", "concat", "split", "take_rows",
    "matmul", "conv2d", "avg_pool", "nearest_upsample",
    "backward", "replay", "zero_grads", "global_grad_norm",
    "grad_check", "GradCheckReport",
]


class Tensor:
    """One node of the computation record.

    ``data`` is the forward value, ``parents`` the input nodes and ``_vjp``
    a function mapping the output gradient to per-parent gradients.  Leaf
    tensors (constants) carry no parents.  ``_replay`` recomputes ``data``
    from the parents' current data, so replaying a record reproduces the
    forward pass bit-identically in the same precision.
    """

    __slots__ = ("data", "parents", "op", "_vjp", "_replay", "needs_grad")

    def __init__(self, data, parents=(), op="leaf", vjp=None, replay_fn=None,
                 needs_grad=None):
        self.data = np.asarray(data)
        self.parents = tuple(parents)
        self.op = op
        self._vjp = vjp
        self._replay = replay_fn
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self.parents)
        self.needs_grad = needs_grad

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
        return self.data.item()

    # operator sugar; plain numbers/arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable leaf: value plus an accumulated gradient of the same shape."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name=""):
        data = np.asarray(data)
        super().__init__(data, op="param", needs_grad=True)
        self.grad = np.zeros_like(data)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def constant(data, dtype=None):
    """Wrap an array as a non-differentiable leaf."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, needs_grad=False)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return constant(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data, parents, op, vjp, replay_fn):
    if any(p.needs_grad for p in parents):
        return Tensor(data, parents, op, vjp, replay_fn)
    return Tensor(data, parents, op, None, replay_fn, needs_grad=False)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _node(a.data + b.data, (a, b), "add", vjp, lambda: a.data + b.data)


def sub(a, b):
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _node(a.data - b.data, (a, b), "sub", vjp, lambda: a.data - b.data)


def mul(a, b):
    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _node(a.data * b.data, (a, b), "mul", vjp, lambda: a.data * b.data)


def div(a, b):
    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _node(a.data / b.data, (a, b), "div", vjp, lambda: a.data / b.data)


def neg(a):
    return _node(-a.data, (a,), "neg", lambda g: (-g,), lambda: -a.data)


def pow_(a, exponent):
    """Elementwise power with a fixed (non-differentiated) exponent."""
    e = float(exponent)
    out = a.data ** np.asarray(e, dtype=a.dtype)

    def vjp(g):
        return (g * e * a.data ** np.asarray(e - 1.0, dtype=a.dtype),)
    return _node(out, (a,), "pow", vjp, lambda: a.data ** np.asarray(e, dtype=a.dtype))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,), lambda: np.exp(a.data))


def log(a):
    def vjp(g):
        return (g / a.data,)
    return _node(np.log(a.data), (a,), "log", vjp, lambda: np.log(a.data))


def sqrt(a):
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)
    return _node(out, (a,), "sqrt", vjp, lambda: np.sqrt(a.data))


def square(a):
    def vjp(g):
        return (g * 2.0 * a.data,)
    return _node(a.data * a.data, (a,), "square", vjp, lambda: a.data * a.data)


def _sigmoid_np(x):
    return _special.expit(x)


def sigmoid(a):
    out = _sigmoid_np(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)
    return _node(out, (a,), "sigmoid", vjp, lambda: _sigmoid_np(a.data))


def silu(a):
    """x * sigmoid(x), the model's activation."""
    s = _sigmoid_np(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)
    return _node(out, (a,), "silu", vjp, lambda: a.data * _sigmoid_np(a.data))


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    def vjp(g):
        return (g * _sigmoid_np(a.data),)
    return _node(_softplus_np(a.data), (a,), "softplus", vjp,
                 lambda: _softplus_np(a.data))


_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


def erf(a):
    def vjp(g):
        return (g * (_TWO_OVER_SQRT_PI * np.exp(-a.data * a.data)).astype(a.dtype),)
    return _node(_special.erf(a.data).astype(a.dtype, copy=False), (a,), "erf", vjp,
                 lambda: _special.erf(a.data).astype(a.dtype, copy=False))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def gauss_cdf(a):
    """Standard normal CDF, 0.5 * (1 + erf(x / sqrt(2)))."""
    return mul(add(erf(mul(a, constant(np.asarray(_INV_SQRT2, a.dtype)))),
                   constant(np.asarray(1.0, a.dtype))),
               constant(np.asarray(0.5, a.dtype)))


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only inside the interval."""
    out = np.clip(a.data, lo, hi)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)

    def vjp(g):
        return (g * inside,)
    return _node(out, (a,), "clip", vjp, lambda: np.clip(a.data, lo, hi))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(a.data.shape))
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
    return _node(out, (a,), "sum", vjp,
                 lambda: a.data.sum(axis=axis, keepdims=keepdims))


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def vjp(g):
        g = np.asarray(g) / n
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(a.data.shape))
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
    return _node(out, (a,), "mean", vjp,
                 lambda: a.data.mean(axis=axis, keepdims=keepdims))


def reshape(a, shape):
    def vjp(g):
        return (g.reshape(a.data.shape),)
    return _node(a.data.reshape(shape), (a,), "reshape", vjp,
                 lambda: a.data.reshape(shape))


def transpose(a, axes):
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)
    return _node(a.data.transpose(axes), (a,), "transpose", vjp,
                 lambda: a.data.transpose(axes))


def concat(tensors, axis):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat", vjp,
                 lambda: np.concatenate([t.data for t in tensors], axis=axis))


def split(a, sizes, axis):
    """Split along ``axis`` into chunks of the given sizes."""
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis {axis} of shape {a.data.shape}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)
        outs.append(_node(np.ascontiguousarray(a.data[sl]), (a,), "split", vjp,
                          lambda sl=sl: np.ascontiguousarray(a.data[sl])))
    return tuple(outs)


def take_rows(table, index):
    """Row gather ``table[index]``; used for learned step embeddings."""
    idx = np.asarray(index)

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)
    return _node(table.data[idx], (table,), "take_rows", vjp,
                 lambda: table.data[idx])


def matmul(a, b):
    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))
    return _node(a.data @ b.data, (a, b), "matmul", vjp, lambda: a.data @ b.data)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW interface, channels-last internals for speed)
# ---------------------------------------------------------------------------

def _conv_out_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _conv2d_forward(x, w, stride, padding):
    B, Ci, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = _conv_out_extent(H, k, stride, padding)
    Wo = _conv_out_extent(W, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        col = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, Ci)
        wm = w.reshape(O, Ci).T
    else:
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, Ci), dtype=x.dtype)
        xp[:, padding:padding + H, padding:padding + W, :] = x.transpose(0, 2, 3, 1)
        col = np.empty((B, Ho, Wo, k * k, Ci), dtype=x.dtype)
        idx = 0
        for di in range(k):
            for dj in range(k):
                col[:, :, :, idx, :] = xp[:, di:di + stride * (Ho - 1) + 1:stride,
                                          dj:dj + stride * (Wo - 1) + 1:stride, :]
                idx += 1
        col = col.reshape(B * Ho * Wo, k * k * Ci)
        wm = w.transpose(2, 3, 1, 0).reshape(k * k * Ci, O)
    y = (col @ wm).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), col


def _conv2d_backward(g, col, x_shape, w, stride, padding):
    B, Ci, H, W = x_shape
    O, _, k, _ = w.shape
    _, _, Ho, Wo = g.shape
    gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
    if k == 1 and stride == 1 and padding == 0:
        gw = (col.T @ gm).T.reshape(O, Ci, 1, 1)
        gcol = gm @ w.reshape(O, Ci)
        gx = gcol.reshape(B, H, W, Ci).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gw
    wm = w.transpose(2, 3, 1, 0).reshape(k * k * Ci, O)
    gw = (col.T @ gm).reshape(k, k, Ci, O).transpose(3, 2, 0, 1)
    if stride == 1:
        # input gradient is itself a correlation: flip the kernel spatially,
        # swap in/out channels, and run the forward path on g (faster than a
        # strided col2im scatter)
        w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx, _ = _conv2d_forward(g, np.ascontiguousarray(w_flip), 1, k - 1 - padding)
        return gx, np.ascontiguousarray(gw)
    gcol = (gm @ wm.T).reshape(B, Ho, Wo, k * k, Ci)
    gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, Ci), dtype=g.dtype)
    idx = 0
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + stride * (Ho - 1) + 1:stride,
                dj:dj + stride * (Wo - 1) + 1:stride, :] += gcol[:, :, :, idx, :]
            idx += 1
    gx = gxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of NCHW input with an (Out,In,k,k) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and kernel, got input shape "
                         f"{x.data.shape} and kernel shape {w.data.shape}")
    B, Ci, H, W = x.data.shape
    O, Ciw, k, kw = w.data.shape
    if k != kw:
        raise ValueError(f"conv2d kernel must be square, got {w.data.shape}")
    if k % 2 != 1:
        raise ValueError(f"conv2d kernel extent must be odd, got {k}")
    if Ci != Ciw:
        raise ValueError(f"conv2d channel mismatch: input shape {x.data.shape} "
                         f"vs kernel shape {w.data.shape}")
    if H < k - 2 * padding or W < k - 2 * padding:
        raise ValueError(f"conv2d input {x.data.shape} too small for kernel "
                         f"{w.data.shape} with padding {padding}")
    y, col = _conv2d_forward(x.data, w.data, stride, padding)

    def vjp(g):
        return _conv2d_backward(g, col, x.data.shape, w.data, stride, padding)

    def replay_fn():
        return _conv2d_forward(x.data, w.data, stride, padding)[0]
    return _node(y, (x, w), "conv2d", vjp, replay_fn)


def avg_pool(x, window):
    """Mean over non-overlapping window x window blocks of the last two axes."""
    w = int(window)
    if w < 1:
        raise ValueError(f"avg_pool window must be >= 1, got {window}")
    *lead, H, W = x.data.shape
    if H % w or W % w:
        raise ValueError(f"avg_pool extents {(H, W)} not divisible by window {w}")
    if w == 1:
        return _node(x.data.copy(), (x,), "avg_pool", lambda g: (g,),
                     lambda: x.data.copy())
    shape = (*lead, H // w, w, W // w, w)
    nd = len(shape)
    out = x.data.reshape(shape).mean(axis=(nd - 3, nd - 1))

    def vjp(g):
        g = g / (w * w)
        g = np.repeat(np.repeat(g, w, axis=-2), w, axis=-1)
        return (g.astype(x.dtype, copy=False),)
    return _node(out, (x,), "avg_pool", vjp,
                 lambda: x.data.reshape(shape).mean(axis=(nd - 3, nd - 1)))


def nearest_upsample(x, factor):
    """Replicate each cell of the last two axes into a factor x factor block."""
    f = int(factor)
    if f < 1:
        raise ValueError(f"nearest_upsample factor must be >= 1, got {factor}")
    if f == 1:
        return _node(x.data.copy(), (x,), "nearest_upsample", lambda g: (g,),
                     lambda: x.data.copy())
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    *lead, H, W = x.data.shape
    shape = (*lead, H, f, W, f)
    nd = len(shape)

    def vjp(g):
        return (g.reshape(shape).sum(axis=(nd - 3, nd - 1)),)
    return _node(out, (x,), "nearest_upsample", vjp,
                 lambda: np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1))


# ---------------------------------------------------------------------------
# record traversal
# ---------------------------------------------------------------------------

def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(param) into every reachable Parameter's .grad."""
    if root.data.size != 1:
        raise ValueError(f"backward expects a scalar output, got shape {root.data.shape}")
    if not root.needs_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.needs_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def replay(root):
    """Re-execute the record bottom-up; returns the recomputed root value."""
    order = []
    seen = set()
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
        for p in node.parents:
            stack.append((p, False))
    values = {}
    for node in order:
        if node._replay is None:
            values[id(node)] = node.data
        else:
            values[id(node)] = node._replay()
    return values[id(root)]


def zero_grads(params):
    for p in params:
        p.zero_grad()


def global_grad_norm(params):
    total = 0.0
    for p in params:
        g = p.grad.astype(np.float64, copy=False)
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter comparison of reverse-mode against central differences."""

    rel_tol: float
    max_rel_err: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    @property
    def worst(self):
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        lines = [f"grad_check {status} (rel_tol={self.rel_tol:g}, worst={self.worst:.3e})"]
        lines += [f"  offending: {name} rel_err={err:.3e}"
                  for name, err in self.failures]
        return "\n".join(lines)


def grad_check(scalar_fn, params, rel_tol=1e-4, step=1e-4):
    """Compare reverse-mode gradients of ``scalar_fn()`` with central differences.

    ``scalar_fn`` must rebuild the record from the parameters' current values
    and be deterministic (fix any noise inputs).  Parameters should be float64
    for the differences to resolve at the default step.
    """
    zero_grads(params)
    out = scalar_fn()
    backward(out)
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(rel_tol=rel_tol)
    for p in params:
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(scalar_fn().data)
            flat[i] = orig - step
            f_minus = float(scalar_fn().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(analytic[p.name].reshape(-1)[i])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
        report.max_rel_err[p.name] = worst
        if worst > rel_tol:
            report.failures.append((p.name, worst))
    return report
