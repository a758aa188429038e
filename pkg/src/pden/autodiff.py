"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; a :class:`Tensor` wraps one array together with
an accumulated gradient and the backward rule of the op that produced it.
Ops build the graph eagerly, and :meth:`Tensor.backward` walks it once in
reverse topological order from a scalar root.

Backward rules are pure closures ``g -> (grad_parent_0, grad_parent_1, ...)``.
The engine propagates a per-call gradient map and then adds each call's
contribution into the persistent ``.grad`` buffers, so repeated ``backward()``
calls without an intervening ``zero_grad`` accumulate exactly linearly.

Shape discipline: binary elementwise ops require identical shapes or one true
scalar (shape ``()``) operand.  Anything richer -- row bias, channel bias,
spatial expansion, reductions -- is its own op with an explicit backward rule,
so there is no silent broadcasting to reason about.

Tensors that do not require grad build no graph: a forward pass through a
frozen model allocates values only.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DomainError(ValueError):
    """Operand values are outside an op's numeric domain (log of <= 0, div by 0, ...)."""


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``data`` is the value, ``grad`` the accumulated gradient (lazily allocated,
    ``None`` until the first backward pass reaches this node), ``requires_grad``
    marks trainable leaves and propagates through ops.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self) -> "Tensor":
        """Same value, cut from the graph; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node.

        The root must be a scalar (shape ``()``).  Each call propagates its
        own unit seed; contributions add into ``.grad``, so two calls without
        ``zero_grad`` leave exactly twice the gradient.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        pass_grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = pass_grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = pass_grads.get(id(parent))
                # new array on accumulate: stored grads are never mutated in
                # place, so closures may safely return views of g or caches
                pass_grads[id(parent)] = pg if acc is None else acc + pg
        pass_grads.clear()

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of common ops -----------------------------------------

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return tsqrt(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def clamp_min(self, bound: float):
        return clamp_min(self, bound)

    def clamp_max(self, bound: float):
        return clamp_max(self, bound)


def parameter(data) -> Tensor:
    """Trainable leaf: a Tensor with requires_grad=True and its own copy of data."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    """Non-trainable tensor wrapping ``data`` (no copy if already f64)."""
    return Tensor(data)


def _toposort(root: Tensor) -> list:
    """Iterative post-order over grad-requiring ancestors of ``root``."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.float64(x))
    raise TypeError(f"expected Tensor or scalar number, got {type(x).__name__}")


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar broadcast exists, so reduction is a full sum
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# -- elementwise binary ops ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


# -- elementwise unary ops ----------------------------------------------------


def neg(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    """Elementwise square root; argument must be >= 0.

    The derivative blows up at 0, so differentiable call sites must floor the
    argument (see clamp_min) before taking the root.
    """
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: argument must be nonnegative")
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    # stable two-sided form
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), backward)


def clamp_min(a: Tensor, bound: float) -> Tensor:
    """max(a, bound); gradient passes where a >= bound."""
    a = _coerce(a)
    bound = float(bound)

    def backward(g):
        return (g * (a.data >= bound),)

    return _make(np.maximum(a.data, bound), (a,), backward)


def clamp_max(a: Tensor, bound: float) -> Tensor:
    """min(a, bound); gradient passes where a <= bound."""
    a = _coerce(a)
    bound = float(bound)

    def backward(g):
        return (g * (a.data <= bound),)

    return _make(np.minimum(a.data, bound), (a,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape),)

    return _make(np.sum(a.data), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    a = _coerce(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean over an empty tensor")

    def backward(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _make(np.mean(a.data), (a,), backward)


def sum_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    """Sum over the given axes."""
    a = _coerce(a)
    axes = tuple(int(ax) for ax in (axes if isinstance(axes, Iterable) else (axes,)))
    kept = np.sum(a.data, axis=axes, keepdims=True)

    def backward(g):
        gk = g if keepdims else g.reshape(kept.shape)
        return (np.broadcast_to(gk, a.shape),)

    out_data = kept if keepdims else np.squeeze(kept, axis=axes)
    return _make(np.ascontiguousarray(out_data), (a,), backward)


def mean_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes_t = tuple(int(ax) for ax in (axes if isinstance(axes, Iterable) else (axes,)))
    count = int(np.prod([a.shape[ax] for ax in axes_t]))
    return mul(sum_axes(a, axes_t, keepdims=keepdims), 1.0 / count)


# -- shape ops -----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(d) for d in shape) if not isinstance(shape, int) else (shape,)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-d tensor, got shape {a.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(a.data.T), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree."""
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(t.ndim)
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = a[i, index[i]] for a 2-d tensor and integer index vector."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d tensor, got shape {a.shape}")
    idx = np.asarray(index)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"gather_rows: index shape {idx.shape} != ({a.shape[0]},)")
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows: index must be integer-typed")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= a.shape[1]:
        raise IndexError(f"gather_rows: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(np.ascontiguousarray(a.data[rows, idx]), (a,), backward)


# -- linear algebra / structured ops -------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (N, D) plus bias b (D,) added to every row."""
    x, b = _coerce(x), _coerce(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row_bias: got x {x.shape}, b {b.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _make(x.data + b.data[None, :], (x, b), backward)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (N, C, H, W) plus bias b (C,) added to every channel plane."""
    x, b = _coerce(x), _coerce(b)
    if x.ndim != 4 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_channel_bias: got x {x.shape}, b {b.shape}")

    def backward(g):
        return g, g.sum(axis=(0, 2, 3))

    return _make(x.data + b.data[None, :, None, None], (x, b), backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of x (N, C, H, W) with kernels w (O, C, kh, kw).

    Forward lowers patches to a matrix (im2col) and multiplies; the weight
    gradient reuses the cached patch matrix, the input gradient scatters
    kernel-tap slices back onto the padded canvas.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d operands, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {c2}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    cols = windows.reshape(n * ho * wo, c * kh * kw)  # copies into contiguous memory
    wmat = w.data.reshape(o, c * kh * kw)
    out = np.ascontiguousarray(
        (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    )

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=np.float64)
            for i in range(kh):
                hi = i + stride * (ho - 1) + 1
                for j in range(kw):
                    wj = j + stride * (wo - 1) + 1
                    gxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _make(out, (x, w), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of x (N, C, H, W) -> (N, C)."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool needs 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


def expand_spatial(a: Tensor, h: int, w: int) -> Tensor:
    """Tile a (N, C) tensor to (N, C, h, w); gradient sums over the plane."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"expand_spatial needs 2-d input, got {a.shape}")
    n, c = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data[:, :, None, None], (n, c, h, w)))

    def backward(g):
        return (g.sum(axis=(2, 3)),)

    return _make(out, (a,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of (N, C, H, W)."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x needs 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


# -- fused row-structured ops ---------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Row softmax of a 2-d tensor, max-subtracted for stability."""
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax needs a 2-d tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), backward)


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Row-normalize a 2-d tensor onto the unit sphere.

    Raises DomainError if any row norm is at or below ``min_norm``; silent
    near-zero rows would produce exploding, meaningless gradients.
    """
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize needs a 2-d tensor, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    if np.any(norms <= min_norm):
        raise DomainError(f"l2_normalize: row norm <= {min_norm}")
    y = x.data / norms

    def backward(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make(y, (x,), backward)


# -- composite helpers -----------------------------------------------------------


def instance_stats(z: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-(sample, channel) spatial mean and floored population std.

    For z of shape (N, C, H, W) returns mu, sigma of shape (N, C) where
    sigma = sqrt(max(var, eps^2)) = max(sqrt(var), eps).  The floor keeps the
    gradient finite (and zero) on constant channels.
    """
    z = _coerce(z)
    if z.ndim != 4:
        raise ShapeError(f"instance_stats needs 4-d input, got {z.shape}")
    mu = global_avg_pool(z)
    n, c, h, w = z.shape
    centered = sub(z, expand_spatial(mu, h, w))
    var = global_avg_pool(mul(centered, centered))
    sigma = tsqrt(clamp_min(var, eps * eps))
    return mu, sigma


def instance_norm(z: Tensor, eps: float = 1e-5) -> Tensor:
    """(z - mu) / sigma with the floored population sigma of instance_stats."""
    z = _coerce(z)
    mu, sigma = instance_stats(z, eps)
    n, c, h, w = z.shape
    return div(sub(z, expand_spatial(mu, h, w)), expand_spatial(sigma, h, w))
