"""Dense float64 tensors with reverse-mode autodiff.

Every value is a numpy float64 array in row-major order. Operations record
their inputs and a backward rule on the resulting tensor, forming an implicit
tape; ``backward`` replays it in reverse topological order. All forward
outputs are checked for NaN/Inf and raise immediately on failure.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


class GradError(RuntimeError):
    """Backward invoked on an invalid target (e.g. non-scalar loss)."""


def _check_finite(arr: np.ndarray, opname: str) -> np.ndarray:
    # cheap screen: any NaN/Inf makes the sum non-finite
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite output from {opname}")
    return arr


class Tensor:
    """N-d float64 array plus optional gradient buffer.

    Data is immutable by convention once the tensor participates in a graph;
    only ``grad`` is mutated (by ``backward``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powc(self, float(p))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, opname: str, parents: Sequence[Tensor],
          backward: Callable) -> Tensor:
    _check_finite(data, opname)
    req = any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast to reach the output shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_compatible(sa: tuple, sb: tuple) -> bool:
    for a, b in zip(reversed(sa), reversed(sb)):
        if a != b and a != 1 and b != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} vs {b.shape}")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, "mul", (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_compatible(a.shape, b.shape):
        raise ShapeError(f"div: incompatible shapes {a.shape} vs {b.shape}")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _make(out, "div", (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    # stable: never exponentiates a positive argument
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open-interval contract where float64 would round to 0 or 1
    out = np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (x,), bw)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    xd = x.data

    def bw(g):
        e = np.exp(-np.abs(xd))
        s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _make(out, "softplus", (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)

    def bw(g):
        return (g * np.where(mask, 1.0, slope),)

    return _make(out, "leaky_relu", (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, "exp", (x,), bw)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)  # non-finite results raise in _make
    xd = x.data

    def bw(g):
        return (g / xd,)

    return _make(out, "log", (x,), bw)


def powc(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    xd = x.data

    def bw(g):
        return (g * p * xd ** (p - 1.0),)

    return _make(out, "powc", (x,), bw)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        axes = range(ndim)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if len(set(axes)) != len(axes):
        raise ShapeError("duplicate reduction axes")
    for a in axes:
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {a} invalid for ndim {ndim}")
    return axes


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    xshape = x.shape

    def bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg / n, xshape).copy(),)

    return _make(out, "reduce_mean", (x,), bw)


def stable_mean0(x: Tensor) -> Tensor:
    """Mean over axis 0 that is exactly invariant to permutations along it.

    Summands are sorted per output element before accumulation, which fixes
    the floating-point summation order regardless of how axis 0 is ordered.
    The gradient of a mean is uniform over the summands, so sorting does not
    change the backward pass.
    """
    if x.data.ndim < 1:
        raise ShapeError("stable_mean0 needs at least one axis")
    n = x.shape[0]
    out = np.sort(x.data, axis=0).mean(axis=0)
    xshape = x.shape

    def bw(g):
        return (np.broadcast_to(g / n, xshape).copy(),)

    return _make(out, "stable_mean0", (x,), bw)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    xshape = x.shape

    def bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, xshape).copy(),)

    return _make(out, "reduce_sum", (x,), bw)


def reduce_max(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Max over ``axes``; ties route the gradient to the first element in
    row-major order of the reduced block."""
    axes = _norm_axes(axes, x.data.ndim)
    ndim = x.data.ndim
    kept = tuple(a for a in range(ndim) if a not in axes)
    moved = np.transpose(x.data, kept + axes)
    kept_shape = moved.shape[:len(kept)]
    red_shape = moved.shape[len(kept):]
    flat = moved.reshape(kept_shape + (-1,))
    idx = flat.argmax(axis=-1)  # first occurrence on ties
    out_kept = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out_kept, axes)
    else:
        out = out_kept
    xshape = x.shape

    def bw(g):
        gk = g
        if keepdims:
            gk = gk.reshape(kept_shape)
        gflat = np.zeros(kept_shape + (int(np.prod(red_shape)) if red_shape else 1,))
        np.put_along_axis(gflat, idx[..., None], gk[..., None], axis=-1)
        gmoved = gflat.reshape(kept_shape + red_shape)
        inv = np.argsort(kept + axes)
        return (np.transpose(gmoved, inv).reshape(xshape),)

    return _make(out, "reduce_max", (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(out, "matmul", (a, b), bw)


def _pad_hw(arr: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return arr
    n, c, h, w = arr.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = arr
    return out


def _im2col(xpad: np.ndarray, k: int) -> tuple[np.ndarray, int, int]:
    """Flatten k x k sliding windows to rows: (n*oh*ow, c*k*k)."""
    n, c, hp, wp = xpad.shape
    oh, ow = hp - k + 1, wp - k + 1
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))  # (n,c,oh,ow,k,k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * k * k), oh, ow


def conv2d(x: Tensor, kernel: Tensor, padding: int) -> Tensor:
    """Stride-1 cross-correlation of (n,c_in,h,w) with (c_out,c_in,k,k)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd square, got {kh}x{kw}")
    if cin != cin_k:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    p = int(padding)
    if not 0 <= p <= kh - 1:
        raise ShapeError(f"conv2d padding {p} out of range for k={kh}")
    xpad = _pad_hw(x.data, p)
    cols, oh, ow = _im2col(xpad, kh)  # (n*oh*ow, cin*k*k)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ kmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    kd = kernel.data

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)  # (n*oh*ow, cout)
        dk = (gmat.T @ cols).reshape(cout, cin, kh, kw)
        # input gradient: full correlation with the flipped, transposed kernel
        kflip = np.ascontiguousarray(kd[:, :, ::-1, ::-1])
        q = kh - 1 - p
        gcols, gh, gw = _im2col(_pad_hw(g, q), kh)
        kfmat = kflip.transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
        dx = (gcols @ kfmat.T).reshape(n, gh, gw, cin).transpose(0, 3, 1, 2)
        return dx, dk

    return _make(out, "conv2d", (x, kernel), bw)


# ---------------------------------------------------------------------------
# structural ops

def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    xshape = x.shape

    def bw(g):
        return (g.reshape(xshape),)

    return _make(out, "reshape", (x,), bw)


def concat(inputs: Iterable[Tensor], axis: int) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat of zero tensors")
    ndim = inputs[0].data.ndim
    axis = axis % ndim
    ref = list(inputs[0].shape)
    for t in inputs[1:]:
        s = list(t.shape)
        if len(s) != ndim or any(s[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat: non-concat extents differ")
    out = np.concatenate([t.data for t in inputs], axis=axis)
    sizes = [t.shape[axis] for t in inputs]

    def bw(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(splits)

    return _make(out, "concat", tuple(inputs), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial value factor x factor times in h and w."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest expects a 4-d tensor")
    f = int(factor)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest", (x,), bw)


def crop_center(x: Tensor, target: Sequence[int]) -> Tensor:
    """Crop to ``target`` extents, removing equal margins per axis; with an
    odd total margin the kept window shifts one step toward high indices."""
    target = tuple(int(t) for t in target)
    if len(target) != x.data.ndim:
        raise ShapeError("crop_center: target rank mismatch")
    slices = []
    pads = []
    for s, t in zip(x.shape, target):
        if t > s:
            raise ShapeError(f"crop_center: target {t} exceeds source {s}")
        total = s - t
        lo = (total + 1) // 2
        slices.append(slice(lo, lo + t))
        pads.append((lo, s - t - lo))
    out = x.data[tuple(slices)].copy()
    xshape = x.shape

    def bw(g):
        gx = np.zeros(xshape)
        gx[tuple(slices)] = g
        return (gx,)

    return _make(out, "crop_center", (x,), bw)


def pad_slices(x: Tensor, target_l: int) -> Tensor:
    """Zero-pad or truncate the leading (slice) axis symmetrically."""
    l = x.shape[0]
    t = int(target_l)
    if t == l:
        sel = slice(0, l)
        lo_pad = 0
    elif t > l:
        lo_pad = (t - l) // 2
        sel = None
    else:
        lo = (l - t + 1) // 2
        sel = slice(lo, lo + t)
        lo_pad = 0
    if t >= l:
        padspec = [(lo_pad, t - l - lo_pad)] + [(0, 0)] * (x.data.ndim - 1)
        out = np.pad(x.data, padspec)
    else:
        out = x.data[sel].copy()
    xshape = x.shape

    def bw(g):
        if t >= l:
            return (g[lo_pad:lo_pad + l],)
        gx = np.zeros(xshape)
        gx[sel] = g
        return (gx,)

    return _make(out, "pad_slices", (x,), bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Normalize each (n, c) plane to zero mean / unit variance, then apply a
    per-channel affine. Built from primitive ops, so the backward rule is the
    composition of theirs."""
    if x.data.ndim != 4:
        raise ShapeError("instance_norm expects (n,c,h,w)")
    c = x.shape[1]
    if gamma.size != c or beta.size != c:
        raise ShapeError("instance_norm: affine size must equal channel count")
    mu = reduce_mean(x, axes=(2, 3), keepdims=True)
    xm = sub(x, mu)
    var = reduce_mean(mul(xm, xm), axes=(2, 3), keepdims=True)
    inv = powc(add(var, Tensor(eps)), -0.5)
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    return add(mul(mul(xm, inv), g4), b4)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle

def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor, reset: bool = True) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss.

    By default existing grads on the reachable subgraph are reset first;
    with ``reset=False`` repeated calls accumulate.
    """
    if loss.size != 1:
        raise GradError(f"backward target must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    if reset:
        for node in order:
            node.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: int | None = None, rng=None) -> float:
    """Compare analytic grads of scalar f against central finite differences.

    Returns max over checked coordinates of |analytic - numeric| / max(1, |numeric|).
    ``f`` must be deterministic; ``x`` is perturbed in place and restored, so
    closures over model parameters work. ``max_coords`` limits the check to a
    random coordinate subsample for large tensors.
    """
    if not x.requires_grad:
        raise GradError("grad_check target must require grad")
    out = f(x)
    backward(out)
    if x.grad is None:
        raise GradError("f does not depend on x")
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
