"""Dense float64 tensors with reverse-mode gradients.

Deliberately small: only the operations the encoder stacks, the
query-adaption head and the losses actually use. Everything runs in
float64 with numpy's fixed reduction order, so a seeded computation
replays bit-identically. Broadcasting is restricted to suffix-shape
matches (bias over batch/token axes); anything else needs an explicit
reshape or repeat_batch.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import DimensionError, GradientCheckError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Non-leaf tensors carry closures that send gradients back to their
    parents; ``backward()`` replays those closures in reverse
    topological order and, by default, frees the recorded graph so a
    fresh tape starts at the next step.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- autodiff machinery ---------------------------------------------------

    def backward(self, free_graph: bool = True) -> None:
        """Backpropagate from a scalar; populates .grad on every
        requires_grad tensor reachable on the tape."""
        if self.data.size != 1:
            raise DimensionError(
                f"backward() needs a scalar source, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; graphs outgrow the recursion limit
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._parents = ()
                node._backward = None
                if node is not self and not node.requires_grad:
                    node.grad = None

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), _as_tensor(other))

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


# -- elementwise arithmetic ----------------------------------------------------


def _broadcast_ok(a_shape, b_shape, a_size, b_size) -> bool:
    """Equal shapes, a suffix match (bias over leading axes), or a
    single-element operand acting as a scalar."""
    if a_shape == b_shape or a_size == 1 or b_size == 1:
        return True
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    return big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g, a=a):
            _accum(a, g)

        return _node(a.data + s, (a,), back_scalar)
    if not _broadcast_ok(a.shape, b.shape, a.size, b.size):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    data = a.data + b.data

    def back(g, a=a, b=b):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _node(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, -g)

    return _node(-a.data, (a,), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g, a=a, s=s):
            _accum(a, g * s)

        return _node(a.data * s, (a,), back_scalar)
    if not _broadcast_ok(a.shape, b.shape, a.size, b.size):
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data * b.data

    def back(g, a=a, b=b):
        _accum(a, _reduce_to(g * b.data, a.shape))
        _accum(b, _reduce_to(g * a.data, b.shape))

    return _node(data, (a, b), back)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D x 2D, batched 3D x 3D, or 3D x 2D (shared weight over batch)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul: inner axes disagree: {a.shape} x {b.shape}")

        def back22(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

        return _node(ad @ bd, (a, b), back22)
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise DimensionError(f"matmul: incompatible batched shapes {a.shape} x {b.shape}")

        def back33(g, a=a, b=b):
            _accum(a, g @ b.data.transpose(0, 2, 1))
            _accum(b, a.data.transpose(0, 2, 1) @ g)

        return _node(ad @ bd, (a, b), back33)
    if ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise DimensionError(f"matmul: inner axes disagree: {a.shape} x {b.shape}")

        def back32(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, np.tensordot(a.data, g, axes=([0, 1], [0, 1])))

        return _node(ad @ bd, (a, b), back32)
    raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def back(g, a=a):
        _accum(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))

    def back(g, a=a, inv=inv):
        _accum(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), back)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g, tensors=tuple(tensors), axis=axis, offsets=offsets):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(data, tuple(tensors), back)


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)

    def back(g, a=a, idx=idx):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _node(a.data[idx].copy(), (a,), back)


def repeat_batch(a: Tensor, n: int) -> Tensor:
    """Stack n identical copies along a new leading axis."""
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def back(g, a=a):
        _accum(a, g.sum(axis=0))

    return _node(data, (a,), back)


# -- nonlinearities and normalization ------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g, a=a, s=s, axis=axis):
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match feature axis ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def back(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (dxhat - m1 - xhat * m2) * inv)

    return _node(out, (x, gain, bias), back)


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = a.data * cdf

    def back(g, a=a, cdf=cdf):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accum(a, g * (cdf + a.data * pdf))

    return _node(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic

    def back(g, a=a, s=s):
        _accum(a, g * s * (1.0 - s))

    return _node(s, (a,), back)


def softplus(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def back(g, a=a):
        _accum(a, g * (0.5 * (1.0 + np.tanh(0.5 * a.data))))

    return _node(out, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g, a=a):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), back)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def back(g, a=a, e=e):
        _accum(a, g * e)

    return _node(e, (a,), back)


def pow_const(a: Tensor, p: float) -> Tensor:
    """a ** p for a fixed exponent; exponent 0 or >= 1 keeps the gradient
    finite at a == 0."""
    p = float(p)
    out = a.data ** p

    def back(g, a=a, p=p):
        if p == 0.0:
            return
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), back)


# -- reductions ------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)

    def back(g, a=a, axes=axes, keepdims=keepdims):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis % a.ndim]
    else:
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- lookup and structured ops -----------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; ids is a plain integer array of any shape."""
    ids = np.asarray(ids)
    if ids.max(initial=0) >= weight.shape[0] or ids.min(initial=0) < 0:
        raise DimensionError(
            f"embedding: id out of range for table with {weight.shape[0]} rows"
        )
    out = weight.data[ids]

    def back(g, weight=weight, ids=ids):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accum(weight, dw)

    return _node(out, (weight,), back)


def transposed_conv2x2(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel: spatial dims
    exactly double. x is (B, C, H, W); kernel is (C, C_out, 2, 2); no bias."""
    if x.ndim != 4:
        raise DimensionError(f"transposed_conv2x2: input must be 4D, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise DimensionError(f"transposed_conv2x2: kernel must be (C, C', 2, 2), got {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise DimensionError(
            f"transposed_conv2x2: channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    b, c, h, w = x.shape
    co = kernel.shape[1]
    # kernel 2 / stride 2 never overlaps: each output pixel is a linear map
    # of exactly one input pixel.
    out6 = np.einsum("bchw,cdpq->bdhpwq", x.data, kernel.data)
    out = out6.reshape(b, co, 2 * h, 2 * w)

    def back(g, x=x, kernel=kernel, b=b, c=c, h=h, w=w, co=co):
        g6 = g.reshape(b, co, h, 2, w, 2)
        _accum(x, np.einsum("bdhpwq,cdpq->bchw", g6, kernel.data))
        _accum(kernel, np.einsum("bchw,bdhpwq->cdpq", x.data, g6))

    return _node(out, (x, kernel), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Pixel-repeat upsampling of a (B, H, W) map."""
    if x.ndim != 3:
        raise DimensionError(f"upsample_nearest: expected (B, H, W), got {x.shape}")
    f = int(factor)
    data = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)

    def back(g, x=x, f=f):
        b, h, w = x.shape
        _accum(x, g.reshape(b, h, f, w, f).sum(axis=(2, 4)))

    return _node(data, (x,), back)


# -- verification harness -----------------------------------------------------------


def grad_check(f, point: list[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued f against central
    finite differences at ``point``.

    Returns the max over all coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    for t in point:
        t.requires_grad = True
        t.grad = None
    out = f(*point)
    if out.size != 1:
        raise DimensionError(f"grad_check: f must return a scalar, got {out.shape}")
    if not np.isfinite(out.data).all():
        raise GradientCheckError("grad_check: non-finite function value at the base point")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in point]

    worst = 0.0
    for ti, t in enumerate(point):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(*point).data)
            flat[j] = orig - h
            fm = float(f(*point).data)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[ti].reshape(-1)[j])
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(a)):
                raise GradientCheckError(
                    f"grad_check: non-finite value at tensor {ti}, coordinate {j}"
                )
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
    return worst
