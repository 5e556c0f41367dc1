"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function taking and returning :class:`Tensor`. When a
:class:`Tape` is active and any input requires a gradient, the op appends a
node holding a backward closure to the tape. ``backward`` then walks the
tape once in reverse append order, which is a valid topological order, so
replaying the same tape always produces the same gradients bit for bit.

Without an active tape ops simply compute values (inference mode).
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, ParameterError

_TAPES: list["Tape"] = []


class Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    ``seed`` drives every stochastic op recorded while the tape is active;
    dropout masks are keyed by ``(seed, invocation index)``.
    """

    def __init__(self, seed: int = 0):
        self.nodes: list[Node] = []
        self.seed = int(seed)
        self._stochastic_calls = 0

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def record(self, parents, backward) -> int:
        self.nodes.append(Node(parents, backward))
        return len(self.nodes) - 1

    def next_stochastic_index(self) -> int:
        i = self._stochastic_calls
        self._stochastic_calls += 1
        return i


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Row-major float64 array that may take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "tape_id", "grad", "_tape", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.tape_id = None
        out._tape = None
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return index(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)

    @property
    def T(self): return transpose(self, None)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    out = Tensor._result(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_id = tape.record(tuple(parents), backward_fn)
        out._tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register an op whose forward value was computed elsewhere.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
    """
    return _make(np.asarray(data, dtype=np.float64), [as_tensor(p) for p in parents], backward_fn)


# ---------------------------------------------------------------------------
# Reverse pass


def backward(loss: Tensor) -> dict:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns a dict keyed by leaf tensor. Leaf gradients accumulate, so call
    :func:`zero_grad` between independent passes.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_id is None or loss._tape is None:
        raise ContractError("loss is not recorded on an active tape")
    tape = loss._tape
    grads: list[Optional[np.ndarray]] = [None] * (loss.tape_id + 1)
    grads[loss.tape_id] = np.ones_like(loss.data)
    leaves: dict = {}
    for i in range(loss.tape_id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
            if parent.tape_id is not None and parent._tape is tape:
                j = parent.tape_id
                grads[j] = pg.copy() if grads[j] is None else grads[j] + pg
            elif parent.tape_id is None:
                prev = leaves.get(parent)
                leaves[parent] = pg.copy() if prev is None else prev + pg
        grads[i] = None
    for leaf, g in leaves.items():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return leaves


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # NaN inputs stay NaN so divergence is not masked
    return _make(np.where(mask | np.isnan(a.data), a.data, 0.0), (a,), lambda g: (g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


# ---------------------------------------------------------------------------
# Reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------------
# Linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (weight is [in, out])."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = matmul(x, weight) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), weight), (-1,))
    return out if bias is None else add(out, bias)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm affine shape {gamma.shape} != ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def dropout(x, rate: float, mode: str = "train", seed: Optional[int] = None) -> Tensor:
    """Inverted dropout with a counter-based mask.

    The mask comes from a Philox stream keyed by ``(seed, k)`` where ``k``
    counts stochastic ops on the active tape, so re-running a forward pass
    on a fresh tape reproduces every mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0.0:
        return x
    tape = active_tape()
    base = tape.seed if seed is None and tape is not None else (seed or 0)
    k = tape.next_stochastic_index() if tape is not None else 0
    mask = dropout_mask(x.shape, rate, base, k)
    scale = mask / (1.0 - rate)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def dropout_mask(shape, rate: float, seed: int, counter: int) -> np.ndarray:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, counter & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return (rng.random(shape) >= rate).astype(np.float64)


# ---------------------------------------------------------------------------
# Convolutions on [H, W, C] feature maps (zero padding, cross-correlation)


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv_args(k: int, l: int, stride: int, padding: int) -> None:
    if k % 2 == 0 or l % 2 == 0:
        raise ParameterError(f"kernel extents must be odd, got {k}x{l}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((p, p), (p, p), (0, 0))) if p else x


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation: input [H,W,Cin], weight [K,L,Cin,Cout]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [H,W,C] and [K,L,Cin,Cout], got {x.shape}, {weight.shape}")
    H, W, C = x.shape
    K, L, Cin, Cout = weight.shape
    if Cin != C:
        raise DimensionError(f"conv2d input has {C} channels, weight expects {Cin}")
    _check_conv_args(K, L, stride, padding)
    Ho, Wo = _out_extent(H, K, stride, padding), _out_extent(W, L, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    xp = _pad_hw(x.data, padding)
    win = sliding_window_view(xp, (K, L), axis=(0, 1))[::stride, ::stride][:Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(Ho * Wo, K * L * C)
    wmat = weight.data.reshape(K * L * C, Cout)
    out = (cols @ wmat).reshape(Ho, Wo, Cout)
    wd = weight.data

    def bw(g):
        g2 = g.reshape(Ho * Wo, Cout)
        dw = (cols.T @ g2).reshape(K, L, C, Cout)
        dxp = np.zeros_like(xp)
        for k in range(K):
            for l in range(L):
                dxp[k:k + stride * (Ho - 1) + 1:stride, l:l + stride * (Wo - 1) + 1:stride] += g @ wd[k, l].T
        dx = dxp[padding:padding + H, padding:padding + W] if padding else dxp
        return dx, dw

    return _make(out, (x, weight), bw)


def depthwise_conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial filtering: input [H,W,C], weight [K,L,C]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"depthwise_conv2d expects [H,W,C] and [K,L,C], got {x.shape}, {weight.shape}")
    H, W, C = x.shape
    K, L, Cw = weight.shape
    if Cw != C:
        raise DimensionError(f"depthwise weight has {Cw} channels, input has {C}")
    _check_conv_args(K, L, stride, padding)
    Ho, Wo = _out_extent(H, K, stride, padding), _out_extent(W, L, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"depthwise_conv2d output would be empty for input {x.shape}")
    xp = _pad_hw(x.data, padding)
    wd = weight.data
    sl = [[(slice(k, k + stride * (Ho - 1) + 1, stride), slice(l, l + stride * (Wo - 1) + 1, stride))
           for l in range(L)] for k in range(K)]
    out = np.zeros((Ho, Wo, C))
    for k in range(K):
        for l in range(L):
            out += xp[sl[k][l]] * wd[k, l]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wd)
        for k in range(K):
            for l in range(L):
                dw[k, l] = (g * xp[sl[k][l]]).sum(axis=(0, 1))
                dxp[sl[k][l]] += g * wd[k, l]
        dx = dxp[padding:padding + H, padding:padding + W] if padding else dxp
        return dx, dw

    return _make(out, (x, weight), bw)


def pointwise_conv2d(x, weight) -> Tensor:
    """1x1 convolution: per-pixel linear map [H,W,Cin] x [Cin,Cout]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2:
        raise DimensionError(f"pointwise_conv2d expects [H,W,C] and [Cin,Cout], got {x.shape}, {weight.shape}")
    if x.shape[2] != weight.shape[0]:
        raise DimensionError(f"pointwise weight expects {weight.shape[0]} channels, input has {x.shape[2]}")
    return matmul(x, weight)


def dsconv(x, w_depth, w_point, stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise-separable convolution: depthwise filtering then 1x1 projection."""
    return pointwise_conv2d(depthwise_conv2d(x, w_depth, stride, padding), w_point)


# ---------------------------------------------------------------------------
# Resampling


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, edges clamped."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resample a [H,W,C] map to [out_h,out_w,C]."""
    x = as_tensor(x)
    H, W, _ = x.shape
    if (H, W) == (out_h, out_w):
        return x
    ry, rx = _interp_matrix(out_h, H), _interp_matrix(out_w, W)
    out = np.einsum("ah,hwc->awc", ry, x.data)
    out = np.einsum("bw,awc->abc", rx, out)

    def bw(g):
        t = np.einsum("bw,abc->awc", rx, g)
        return (np.einsum("ah,awc->hwc", ry, t),)

    return _make(out, (x,), bw)


def sample_points(x, px: np.ndarray, py: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Bilinear samples of a [H,W,C] map at pixel coordinates (centres at integers).

    Points outside the map read zeros. Returns the [P,C] samples and a
    boolean array marking points that fall inside the map footprint.
    Differentiable with respect to the map values only.
    """
    x = as_tensor(x)
    H, W, C = x.shape
    px = np.asarray(px, dtype=np.float64).ravel()
    py = np.asarray(py, dtype=np.float64).ravel()
    P = px.size
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    tx, ty = px - x0, py - y0
    smat = np.zeros((P, H * W))
    rows = np.arange(P)
    for dy, wy in ((0, 1.0 - ty), (1, ty)):
        for dx, wx in ((0, 1.0 - tx), (1, tx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            np.add.at(smat, (rows[ok], (yi * W + xi)[ok]), (wy * wx)[ok])
    inside = (px >= -0.5) & (px <= W - 0.5) & (py >= -0.5) & (py <= H - 0.5)
    flat = x.data.reshape(H * W, C)
    out = _make(smat @ flat, (x,), lambda g: ((smat.T @ g).reshape(H, W, C),))
    return out, inside


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_grad(f: Callable, x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every element of ``x``.

    ``f`` takes no arguments and reads ``x`` by closure; ``x.data`` is
    perturbed in place and restored.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f())
        flat[i] = orig - eps
        fm = _scalar(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a-n| / max(|a|, |n|, floor)``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
