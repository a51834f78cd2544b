"""Dense float64 primitives with hand-written reverse-mode adjoints.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure propagating the upstream gradient.  Arrays may carry
leading batch axes; the trailing axes follow the usual row-major convention
(tokens x channels for embeddings).

Adjoint kernels live at module level (``_<name>_backward``) so that a test can
swap one out and confirm the gradient checker notices.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -np.inf
DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad", "_spent")

    def __init__(self, data, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # operator sugar keeps model code readable
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A learned weight with a gradient accumulator of the same shape."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; used for inference-only forwards."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    if not _GRAD_ENABLED[-1] or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents, backward_fn, op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(.) into every reachable Parameter's accumulator.

    A loss node may be differentiated once; a node without a recorded graph
    (plain constant) is rejected.
    """
    if loss._spent:
        raise StateError("backward already ran on this graph; run a new forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or (not loss.parents and not isinstance(loss, Parameter)):
        raise StateError("backward called without a recorded forward pass")

    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._spent = True


def finite_diff_gradient(f: Callable[[], float], params: Sequence[Parameter], eps: float = 1e-6,
                         names: Sequence[str] | None = None) -> list[np.ndarray]:
    """Central-difference estimate of df/dθ for every entry of every parameter.

    ``f`` is re-evaluated with each coordinate nudged in place, so it must read
    the parameters' current ``data``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside the supported range [1e-7, 1e-3]")
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                label = names[k] if names else getattr(p, "name", str(k))
                raise NumericError(f"non-finite objective probing {label}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor): one number per parameter tensor."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _is_const(x):
    return not isinstance(x, Tensor)


def add(a, b):
    if _is_const(b) and isinstance(a, Tensor):
        b = np.asarray(b, dtype=DTYPE)
        return _node(a.data + b, (a,), lambda g: (_unbroadcast(g, a.shape),), "add")
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b):
    if _is_const(b) and isinstance(a, Tensor):
        return add(a, -np.asarray(b, dtype=DTYPE))
    if _is_const(a) and isinstance(b, Tensor):
        a = np.asarray(a, dtype=DTYPE)
        return _node(a - b.data, (b,), lambda g: (_unbroadcast(-g, b.shape),), "sub")
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b):
    if _is_const(a) and isinstance(b, Tensor):
        a, b = b, a
    if _is_const(b) and isinstance(a, Tensor):
        b = np.asarray(b, dtype=DTYPE)
        return _node(a.data * b, (a,), lambda g: (_unbroadcast(g * b, a.shape),), "mul")
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def _matmul_backward(g, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bw(g):
        ga, gb = _matmul_backward(g, a.data, b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw, "matmul")


def _linear_backward(g, x, w):
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, gw, gb


def linear(x, weight: Tensor, bias: Tensor | None = None):
    """x @ weight + bias over the last axis; weight is (in, out)."""
    x = as_tensor(x)
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx, gw, gb = _linear_backward(g, x.data, weight.data)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw, "linear")


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), bw, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), bw, "transpose")


def concat(items: Sequence, axis: int):
    items = [as_tensor(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in items])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, items, bw, "concat")


def take(a, index, axis: int):
    """Gather along ``axis`` with an integer index array (numpy.take semantics)."""
    a = as_tensor(a)
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (ga,)

    return _node(out, (a,), bw, "take")


def slice_axis(a, start: int, stop: int, axis: int):
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)

    return _node(out, (a,), bw, "slice")


def select(a, *indices):
    """Per-batch fancy index: out[b] = a[b, idx0[b], idx1[b], ...]."""
    a = as_tensor(a)
    idx = tuple(np.asarray(i) for i in indices)
    bidx = np.arange(a.shape[0]).reshape((-1,) + (1,) * (idx[0].ndim - 1))
    key = (bidx,) + idx
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _node(out, (a,), bw, "select")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def abs_(a):
    a = as_tensor(a)
    out = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _node(out, (a,), bw, "abs")


def _log_backward(g, x):
    return g / x


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    out = np.log(a.data)

    def bw(g):
        return (_log_backward(g, a.data),)

    return _node(out, (a,), bw, "log")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw, "exp")


def _sigmoid_backward(g, y):
    return g * y * (1.0 - y)


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        return (_sigmoid_backward(g, out),)

    return _node(out, (a,), bw, "sigmoid")


def clamp(a, lo: float, hi: float):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _node(out, (a,), bw, "clamp")


def _relu_backward(g, x):
    return g * (x > 0)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (_relu_backward(g, a.data),)

    return _node(out, (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_backward(g, x, t=None):
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def gelu(a):
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        return (_gelu_backward(g, x, t),)

    return _node(out, (a,), bw, "gelu")


def maximum(items: Sequence):
    """Elementwise max of several tensors; ties route the gradient to the first."""
    items = [as_tensor(t) for t in items]
    stacked = np.stack(np.broadcast_arrays(*[t.data for t in items]))
    winner = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def bw(g):
        return tuple(_unbroadcast(g * (winner == k), t.shape) for k, t in enumerate(items))

    return _node(out, items, bw, "maximum")


def minimum(items: Sequence):
    """Elementwise min; ties route the gradient to the first argument."""
    items = [as_tensor(t) for t in items]
    stacked = np.stack(np.broadcast_arrays(*[t.data for t in items]))
    winner = np.argmin(stacked, axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def bw(g):
        return tuple(_unbroadcast(g * (winner == k), t.shape) for k, t in enumerate(items))

    return _node(out, items, bw, "minimum")


# ---------------------------------------------------------------------------
# fused kernels


def _masked_softmax_forward(logits, mask):
    z = logits if mask is None else logits + mask
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax[~np.isfinite(zmax)] = 0.0
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def _masked_softmax_backward(g, y):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def masked_softmax(logits, mask=None):
    """Softmax over the last axis with an additive {0, -inf} mask.

    Blocked entries come out exactly 0; a row with every entry blocked is
    all-zero instead of NaN.
    """
    logits = as_tensor(logits)
    if mask is not None:
        mask = np.asarray(mask, dtype=DTYPE)
        try:
            np.broadcast_shapes(mask.shape, logits.shape)
        except ValueError as exc:
            raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}") from exc
        if mask.shape[-1] != logits.shape[-1]:
            raise ShapeError(f"mask width {mask.shape[-1]} != logits width {logits.shape[-1]}")
    y = _masked_softmax_forward(logits.data, mask)

    def bw(g):
        return (_masked_softmax_backward(g, y),)

    return _node(y, (logits,), bw, "masked_softmax")


def _layer_norm_backward(g, xhat, inv, scale):
    gs = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gx_hat = g * scale
    n = xhat.shape[-1]
    gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
    return gx, gs, gb


def layer_norm(x, scale, shift, eps: float = 1e-6):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm on a zero-width row")
    if scale.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise ShapeError("scale/shift width must equal the row width")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def bw(g):
        return _layer_norm_backward(g, xhat, inv, scale.data)

    return _node(out, (x, scale, shift), bw, "layer_norm")


def _cosine_backward(g, a, b, na, nb, cos):
    # a: (..., n, C) rows, b: (..., C) broadcast against every row
    ga = g[..., None] * (b[..., None, :] / (na * nb[..., None, :]) - cos[..., None] * a / (na * na))
    gb_rows = g[..., None] * (a / (na * nb[..., None, :]) - cos[..., None] * b[..., None, :] / (nb[..., None, :] ** 2))
    return ga, gb_rows.sum(axis=-2)


def cosine_rows(a, b, eps: float = 1e-12):
    """Cosine similarity between every row of ``a`` (..., n, C) and vector ``b`` (..., C)."""
    a, b = as_tensor(a), as_tensor(b)
    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    if np.any(na < eps) or np.any(nb < eps):
        raise NumericError("cosine similarity of a zero-norm vector")
    cos = (a.data @ b.data[..., None])[..., 0] / (na[..., 0] * nb)

    def bw(g):
        ga, gb = _cosine_backward(g, a.data, b.data, na, nb, cos)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(cos, (a, b), bw, "cosine")


def logsumexp(a, axis: int = -1):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _node(out, (a,), bw, "logsumexp")


def _im2col3(x):
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = [xp[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)


def _col2im3(gcols, shape):
    b, h, w, c = shape
    gp = np.zeros((b, h + 2, w + 2, c), dtype=gcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            gp[:, dy:dy + h, dx:dx + w] += gcols[..., k * c:(k + 1) * c]
            k += 1
    return gp[:, 1:-1, 1:-1]


def _conv3x3_backward(g, cols, weight, shape):
    gw = cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gx = _col2im3(g @ weight.T, shape)
    return gx, gw, gb


def conv3x3(x, weight: Tensor, bias: Tensor):
    """Zero-padded 3x3 convolution on (B, H, W, Cin) maps; weight is (9*Cin, Cout)."""
    x = as_tensor(x)
    cols = _im2col3(x.data)
    out = cols @ weight.data + bias.data

    def bw(g):
        return _conv3x3_backward(g, cols, weight.data, x.shape)

    return _node(out, (x, weight, bias), bw, "conv3x3")


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {where}")
    return t


# ---------------------------------------------------------------------------
# transformer block


def multi_head_attention(x: Tensor, mask, p: dict, heads: int) -> Tensor:
    """Masked self-attention; ``x`` is already layer-normalized, shape (B, T, C)."""
    b, t, c = x.shape
    d = c // heads
    qkv = linear(x, p["qkv_w"], p["qkv_b"])                       # (B, T, 3C)
    qkv = transpose(reshape(qkv, (b, t, 3, heads, d)), (2, 0, 3, 1, 4))  # (3, B, h, T, d)
    q = take(qkv, 0, axis=0)
    k = take(qkv, 1, axis=0)
    v = take(qkv, 2, axis=0)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = masked_softmax(scores, None if mask is None else np.asarray(mask)[:, None])
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))                 # (B, T, h, d)
    return linear(reshape(ctx, (b, t, c)), p["proj_w"], p["proj_b"])


def encoder_layer(e, mask, p: dict, heads: int, index: int = 0, eps: float = 1e-6) -> Tensor:
    """Pre-norm residual attention followed by pre-norm residual MLP.

    ``e`` is (B, T, C) (a 2-D input is treated as a batch of one) and ``mask``
    an additive (B, T, T) mask.  Keys ending in ``_w``/``_b`` in ``p`` are the
    layer's parameters.
    """
    e = as_tensor(e)
    squeeze = e.data.ndim == 2
    if squeeze:
        e = reshape(e, (1,) + e.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    c = e.shape[-1]
    if c % heads:
        raise ShapeError(f"{heads} heads do not divide width {c}")
    h = layer_norm(e, p["ln1_g"], p["ln1_b"], eps)
    e_hat = add(multi_head_attention(h, mask, p, heads), e)
    h2 = layer_norm(e_hat, p["ln2_g"], p["ln2_b"], eps)
    mlp = linear(gelu(linear(h2, p["fc1_w"], p["fc1_b"])), p["fc2_w"], p["fc2_b"])
    out = add(mlp, e_hat)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite output in encoder layer {index}")
    return reshape(out, out.shape[1:]) if squeeze else out


def init_layer_params(rng: np.random.Generator, width: int, hidden: int, std: float = 0.02,
                      prefix: str = "") -> dict:
    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    return {
        "ln1_g": Parameter(np.ones(width), prefix + "ln1_g"),
        "ln1_b": Parameter(np.zeros(width), prefix + "ln1_b"),
        "qkv_w": Parameter(normal(width, 3 * width), prefix + "qkv_w"),
        "qkv_b": Parameter(np.zeros(3 * width), prefix + "qkv_b"),
        "proj_w": Parameter(normal(width, width), prefix + "proj_w"),
        "proj_b": Parameter(np.zeros(width), prefix + "proj_b"),
        "ln2_g": Parameter(np.ones(width), prefix + "ln2_g"),
        "ln2_b": Parameter(np.zeros(width), prefix + "ln2_b"),
        "fc1_w": Parameter(normal(width, hidden), prefix + "fc1_w"),
        "fc1_b": Parameter(np.zeros(hidden), prefix + "fc1_b"),
        "fc2_w": Parameter(normal(hidden, width), prefix + "fc2_w"),
        "fc2_b": Parameter(np.zeros(width), prefix + "fc2_b"),
    }


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
