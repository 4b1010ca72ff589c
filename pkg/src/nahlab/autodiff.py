"""Minimal complex-tensor reverse-mode differentiation engine.

Gradient convention (fixed once, used everywhere): for a real scalar loss L
and a complex tensor z = x + jy, `grad` holds the Wirtinger cotangent with
respect to the conjugate variable, dL/d(conj z). Consequently

    dL/dx = 2 * Re(grad),    dL/dy = 2 * Im(grad),

which is what finite-difference checks and the optimizer's stacked
real/imaginary view rely on. For a holomorphic op w = f(z) the chain rule is
grad_z = grad_w * conj(f'(z)); non-holomorphic ops (cardioid, moduli) add the
conj(grad_w) * df/d(conj z) term.

Ops never mutate their inputs; graphs are single-use (one backward per loss).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import NahError


class NoGraph(NahError):
    """backward() on a tensor without a usable graph."""


class CTensor:
    """Complex tensor with optional reverse-mode graph node."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_consumed")

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None):
        self.values = np.asarray(values, dtype=np.complex128)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def real_scalar(self) -> float:
        if self.values.size != 1:
            raise ValueError("not a scalar tensor")
        return float(self.values.reshape(()).real)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"CTensor(shape={self.values.shape}{flag})"


def tensor(values, requires_grad=False) -> CTensor:
    return CTensor(np.array(values, dtype=np.complex128), requires_grad)


def _node(values, parents, backward_fn) -> CTensor:
    out = CTensor(values)
    out._parents = tuple(parents)
    out._backward_fn = backward_fn
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _accumulate(t: CTensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.values.shape, dtype=np.complex128)
    t.grad += g


def backward(loss: CTensor):
    """Populate grads of every requires_grad leaf reachable from loss.

    The loss must be a real scalar carrying a graph; each graph supports
    exactly one backward pass.
    """
    if loss._backward_fn is None and not loss._parents:
        raise NoGraph("tensor has no graph to backpropagate through")
    if loss._consumed:
        raise NoGraph("backward already called on this graph")
    if loss.values.size != 1:
        raise ValueError("backward requires a scalar loss")
    if abs(float(loss.values.reshape(()).imag)) > 1e-9 * (1 + abs(loss.real_scalar())):
        raise ValueError("backward requires a real scalar loss")

    topo, seen = [], set()
    stack = [(loss, False)]
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
            if p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.complex128) if loss.values.shape == () else \
        np.ones(loss.values.shape, dtype=np.complex128)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    loss._consumed = True
    # interior grads are scratch; leaves keep theirs for the optimizer
    for node in topo:
        if node._backward_fn is not None and node is not loss:
            node.grad = None


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(x: CTensor, w: CTensor, b: CTensor, stride=(1, 1), padding=(0, 0)) -> CTensor:
    """Complex cross-correlation: x (C_in,H,W), w (C_out,C_in,kH,kW), b (C_out,)."""
    sh, sw = stride
    ph, pw = padding
    cin, H, W = x.values.shape
    cout, cin_w, kh, kw = w.values.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}")
    if b.values.shape != (cout,):
        raise ValueError("conv2d bias shape mismatch")
    xp = np.pad(x.values, ((0, 0), (ph, ph), (pw, pw)))
    hp, wp = xp.shape[1], xp.shape[2]
    if hp < kh or wp < kw:
        raise ValueError("conv2d kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    wm = w.values.reshape(cout, cin * kh * kw)
    out = (wm @ cols).reshape(cout, ho, wo) + b.values[:, None, None]

    def backward_fn(g):
        gm = g.reshape(cout, ho * wo)
        _accumulate(b, g.sum(axis=(1, 2)))
        _accumulate(w, (gm @ cols.conj().T).reshape(w.values.shape))
        if x.requires_grad:
            gcols = (wm.conj().T @ gm).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros((cin, hp, wp), dtype=np.complex128)
            for a in range(kh):
                for c in range(kw):
                    gxp[:, a:a + sh * ho:sh, c:c + sw * wo:sw] += gcols[:, a, c]
            _accumulate(x, gxp[:, ph:ph + H, pw:pw + W])

    return _node(out, (x, w, b), backward_fn)


def upconv2d(x: CTensor, w: CTensor, b: CTensor, stride) -> CTensor:
    """Transposed complex convolution with kernel = stride (non-overlapping
    tiles), so output spatial size is exactly input * stride per axis.

    x: (C_in, H, W), w: (C_in, C_out, kH, kW) with (kH, kW) == stride.
    """
    sh, sw = stride
    cin, H, W = x.values.shape
    cin_w, cout, kh, kw = w.values.shape
    if cin != cin_w:
        raise ValueError(f"upconv2d channel mismatch: x has {cin}, w expects {cin_w}")
    if (kh, kw) != (sh, sw):
        raise ValueError("upconv2d requires kernel size equal to stride")
    if b.values.shape != (cout,):
        raise ValueError("upconv2d bias shape mismatch")
    # kernel == stride means non-overlapping tiles, so the whole op is one
    # (cout*kh*kw, cin) x (cin, H*W) matmul plus an interleaving reshape
    xm = x.values.reshape(cin, H * W)
    wm = w.values.reshape(cin, cout * sh * sw)
    prod = (wm.T @ xm).reshape(cout, sh, sw, H, W)
    out = prod.transpose(0, 3, 1, 4, 2).reshape(cout, H * sh, W * sw) \
        + b.values[:, None, None]

    def backward_fn(g):
        gm = g.reshape(cout, H, sh, W, sw).transpose(0, 2, 4, 1, 3) \
            .reshape(cout * sh * sw, H * W)
        _accumulate(b, g.sum(axis=(1, 2)))
        _accumulate(w, (xm.conj() @ gm.T).reshape(w.values.shape))
        if x.requires_grad:
            _accumulate(x, (wm.conj() @ gm).reshape(x.values.shape))

    return _node(out, (x, w, b), backward_fn)


def cardioid(z: CTensor) -> CTensor:
    """Phase-gated activation f(z) = (1 + cos(angle z))/2 * z, f(0) = 0.

    Wirtinger partials, evaluated from the saved input:
        df/dz       = 1/2 + cos(t)/2 + j sin(t)/4
        df/d(conj z) = -j/4 * sin(t) * exp(2jt),   t = angle(z).
    At z = 0 the angular-average limit df/dz = 1/2, df/d(conj z) = 0 is used.
    """
    zv = z.values
    mod = np.abs(zv)
    zero = mod == 0
    # u = exp(j angle z); cos/sin of the angle come from its parts, which
    # avoids trig calls on the hot path
    u = zv / np.where(zero, 1.0, mod)
    u = np.where(zero, 1.0 + 0j, u)
    cos_t = u.real
    out = 0.5 * (1.0 + cos_t) * zv

    def backward_fn(g):
        if not z.requires_grad:
            return
        sin_t = u.imag
        dfdz = 0.5 + 0.5 * cos_t + 0.25j * sin_t
        dfdzbar = -0.25j * sin_t * (u * u)
        if np.any(zero):
            dfdz = np.where(zero, 0.5 + 0j, dfdz)
        _accumulate(z, g.conj() * dfdzbar + g * dfdz.conj())

    return _node(out, (z,), backward_fn)


def _as_values(t) -> np.ndarray:
    if isinstance(t, CTensor):
        return t.values
    return np.asarray(t, dtype=np.complex128)


def mse_loss(pred: CTensor, target) -> CTensor:
    """(1/N) sum |pred - target|^2, a real scalar."""
    tv = _as_values(target)
    if tv.shape != pred.values.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.values.shape} vs {tv.shape}")
    d = pred.values - tv
    n = d.size
    val = np.complex128((d.real ** 2 + d.imag ** 2).sum() / n)

    def backward_fn(g):
        _accumulate(pred, g * d / n)

    return _node(val, (pred,), backward_fn)


def mae_loss(pred: CTensor, target) -> CTensor:
    """(1/M) sum |pred - target|, a real scalar.

    The cotangent d/(2|d| M) uses the subgradient 0 at exact zeros.
    """
    tv = _as_values(target)
    if tv.shape != pred.values.shape:
        raise ValueError(f"mae_loss shape mismatch: {pred.values.shape} vs {tv.shape}")
    d = pred.values - tv
    a = np.abs(d)
    m = d.size
    val = np.complex128(a.sum() / m)

    def backward_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(a > 0, d / np.where(a > 0, a, 1.0), 0.0)
        _accumulate(pred, g * u / (2.0 * m))

    return _node(val, (pred,), backward_fn)


def scale(z: CTensor, c: CTensor) -> CTensor:
    """Multiply a tensor elementwise by a scalar factor; both get gradients."""
    if c.values.size != 1:
        raise ValueError("scale factor must be a scalar tensor")
    cv = c.values.reshape(())
    out = z.values * cv

    def backward_fn(g):
        _accumulate(z, g * np.conj(cv))
        _accumulate(c, np.asarray((g * z.values.conj()).sum()).reshape(c.values.shape))

    return _node(out, (z, c), backward_fn)


def linear_apply(propagator, v: CTensor) -> CTensor:
    """Apply a constant linear operator (the propagator matrix) to v.

    Output is the flat image vector; the gradient map is the conjugate
    transpose, i.e. exactly the propagator adjoint.
    """
    mat = propagator.matrix
    if v.values.size != mat.shape[1]:
        raise ValueError(
            f"linear_apply: v has {v.values.size} entries, operator expects "
            f"{mat.shape[1]}"
        )
    out = mat @ v.values.reshape(-1)

    def backward_fn(g):
        if v.requires_grad:
            _accumulate(v, (mat.conj().T @ g.reshape(-1)).reshape(v.values.shape))

    return _node(out, (v,), backward_fn)


def concat(tensors, axis=0) -> CTensor:
    """Concatenate along an axis; backward splits the cotangent."""
    vals = [t.values for t in tensors]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _node(out, tuple(tensors), backward_fn)


def upsample_nearest(x: CTensor, stride) -> CTensor:
    """Repeat each pixel stride times per axis; backward sums each tile."""
    sh, sw = stride
    out = np.repeat(np.repeat(x.values, sh, axis=1), sw, axis=2)
    cin, H, W = x.values.shape

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(cin, H, sh, W, sw).sum(axis=(2, 4)))

    return _node(out, (x,), backward_fn)


def add(a: CTensor, b: CTensor) -> CTensor:
    if a.values.shape != b.values.shape:
        raise ValueError("add shape mismatch")
    out = a.values + b.values

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(out, (a, b), backward_fn)
