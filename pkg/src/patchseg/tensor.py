"""Dense tensors with reverse-mode automatic differentiation.

Conventions:
  - row-major data, explicit shapes; the only implicit broadcasting is
    scalar-vs-tensor (0-d tensors and Python numbers),
  - float32 is the working precision for training and inference; the same
    ops run unchanged in float64 for finite-difference gradient checks,
  - gradients accumulate (+=) into leaf tensors; the recorded graph is
    freed after backward() unless retain_graph is passed.
"""
from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Iterable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

# tanh approximation of gelu: 0.5*x*(1 + tanh(C0*(x + C1*x^3)))
GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715

# per-thread so concurrent eval forwards cannot disable recording for a trainer
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/eval paths)."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A dense nd-array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _reduce_to_scalar_grad(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be a Python number or a 0-d tensor."""
    b = _as_tensor(b, a.data.dtype)
    _check_same_dtype(a, b, "add")
    if b.data.ndim != 0 and a.data.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0

    def bw(g):
        ga = _reduce_to_scalar_grad(g) if a_scalar and g.ndim != 0 else g
        gb = _reduce_to_scalar_grad(g) if b_scalar and g.ndim != 0 else g
        return ga, gb

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    _check_same_dtype(a, b, "sub")
    if b.data.ndim != 0 and a.data.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0

    def bw(g):
        ga = _reduce_to_scalar_grad(g) if a_scalar and g.ndim != 0 else g
        gb = _reduce_to_scalar_grad(g) if b_scalar and g.ndim != 0 else g
        return ga, -gb

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a Python number or a 0-d tensor."""
    b = _as_tensor(b, a.data.dtype)
    _check_same_dtype(a, b, "mul")
    if b.data.ndim != 0 and a.data.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd
        gb = g * ad
        if ad.ndim == 0 and ga.ndim != 0:
            ga = _reduce_to_scalar_grad(ga)
        if bd.ndim == 0 and gb.ndim != 0:
            gb = _reduce_to_scalar_grad(gb)
        return ga, gb

    return _make(ad * bd, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    """x * s for a compile-time constant s (no graph node for s)."""
    s = x.data.dtype.type(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    _check_same_dtype(a, b, "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from e

    def bw(g):
        return (g.reshape(old),)

    return _make(np.ascontiguousarray(data), (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries starting at `start` along `axis`."""
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    xshape, dtype = x.shape, x.data.dtype

    def bw(g):
        gx = np.zeros(xshape, dtype=dtype)
        gx[idx] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        return (np.full(shape, g, dtype=dtype),)

    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-d bias to every row of x (explicit row broadcast)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    _check_same_dtype(x, b, "add_bias")
    k = b.shape[0]

    def bw(g):
        return g, g.reshape(-1, k).sum(axis=0)

    return _make(x.data + b.data, (x, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max subtraction). NaN inputs propagate."""
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _make(y, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """gelu(x) = 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    c0 = xd.dtype.type(GELU_C0)
    c1 = xd.dtype.type(GELU_C1)
    inner = c0 * (xd + c1 * xd**3)
    t = np.tanh(inner)

    def bw(g):
        dinner = c0 * (1.0 + 3.0 * c1 * xd**2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * dx.astype(xd.dtype),)

    return _make(0.5 * xd * (1.0 + t), (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis of {x.shape}")
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mean) * inv_std
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx.astype(xd.dtype), dgain, dbias

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along `axis` to unit L2 norm (eps-guarded for zero input)."""
    xd = x.data
    n = np.sqrt((xd**2).sum(axis=axis, keepdims=True) + xd.dtype.type(eps))
    y = xd / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _make(y, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).

    rate == 0 returns x unchanged and draws nothing from rng.
    """
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    factor = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep * factor

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean cross-entropy of integer labels over all non-ignored positions.

    logits: (..., K); labels: (...) integer class ids in [0, K) or ignore_index.
    An all-ignored label map yields 0 and emits a RuntimeWarning.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    k = logits.shape[-1]
    flat = logits.data.reshape(-1, k)
    lab = labels.reshape(-1).astype(np.int64)
    valid = lab != ignore_index
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        raise ValueError(f"cross_entropy: label {lab[bad][0]} outside [0, {k}) and not ignore_index")
    n_valid = int(valid.sum())
    dtype = flat.dtype
    if n_valid == 0:
        warnings.warn("cross_entropy: all positions ignored, loss is 0", RuntimeWarning, stacklevel=2)
        return _make(np.asarray(0.0, dtype=dtype), (logits,), lambda g: (np.zeros(logits.shape, dtype=dtype),))

    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe_lab = np.where(valid, lab, 0)
    ll = z[np.arange(flat.shape[0]), safe_lab] - lse[:, 0]
    loss = -(ll[valid].sum() / n_valid)

    def bw(g):
        p = np.exp(z - lse)
        p[np.arange(flat.shape[0]), safe_lab] -= 1.0
        p[~valid] = 0.0
        p *= g / n_valid
        return (p.reshape(logits.shape).astype(dtype),)

    return _make(np.asarray(loss, dtype=dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# resampling


def _resample_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates: lower index, upper index, blend weight."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src)
    w = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, w


def resample_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (h, w) or (h, w, c) array, half-pixel convention.

    Identity sizes return the input array unchanged (bit-exact shortcut).
    """
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"resample_bilinear: target size {out_h}x{out_w} must be positive")
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr
    i0, i1, wy = _resample_coords(h, out_h)
    j0, j1, wx = _resample_coords(w, out_w)
    wy = wy.reshape(-1, 1) if arr.ndim == 2 else wy.reshape(-1, 1, 1)
    wx = wx.reshape(1, -1) if arr.ndim == 2 else wx.reshape(1, -1, 1)
    top = arr[np.ix_(i0, j0)] * (1.0 - wx) + arr[np.ix_(i0, j1)] * wx
    bot = arr[np.ix_(i1, j0)] * (1.0 - wx) + arr[np.ix_(i1, j1)] * wx
    return ((1.0 - wy) * top + wy * bot).astype(arr.dtype)


def resample_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize (used for label maps); half-pixel convention."""
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"resample_nearest: target size {out_h}x{out_w} must be positive")
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr
    ii = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)), 0, h - 1).astype(np.int64)
    jj = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)), 0, w - 1).astype(np.int64)
    return arr[np.ix_(ii, jj)]


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of an (h, w, c) tensor to (out_h, out_w, c)."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample: expects (h, w, c), got {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_upsample: target size {out_h}x{out_w} must be positive")
    h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    i0, i1, wy = _resample_coords(h, out_h)
    j0, j1, wx = _resample_coords(w, out_w)
    dtype = x.data.dtype
    wyc = wy.reshape(-1, 1, 1).astype(dtype)
    wxc = wx.reshape(1, -1, 1).astype(dtype)
    xd = x.data
    top = xd[np.ix_(i0, j0)] * (1 - wxc) + xd[np.ix_(i0, j1)] * wxc
    bot = xd[np.ix_(i1, j0)] * (1 - wxc) + xd[np.ix_(i1, j1)] * wxc
    out = (1 - wyc) * top + wyc * bot

    def bw(g):
        gx = np.zeros((h, w, c), dtype=dtype)
        for ii, wyy in ((i0, 1 - wyc), (i1, wyc)):
            for jj, wxx in ((j0, 1 - wxc), (j1, wxc)):
                np.add.at(gx, np.ix_(ii, jj), g * wyy * wxx)
        return (gx,)

    return _make(out.astype(dtype), (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    The recorded graph is freed afterwards unless retain_graph is set; a
    second backward on a freed graph raises GraphError.  With retain_graph,
    repeated calls keep accumulating (grads double, triple, ...).
    """
    if loss.data.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward: graph already freed (pass retain_graph=True to reuse it)")
    if not loss.requires_grad:
        raise GraphError("backward: loss is not connected to any tensor requiring grad")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    if not retain_graph:
        for node in topo:
            if node._backward_fn is not None:
                node._backward_fn = None
                node._parents = ()
                node._freed = True


# ---------------------------------------------------------------------------
# parameter initialization


def trunc_normal(rng: np.random.Generator, shape: Iterable[int], std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples with the standard draw truncated at +/- bound."""
    out = rng.standard_normal(tuple(shape))
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
