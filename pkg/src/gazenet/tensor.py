"""Dense float64 arrays with tape-based reverse-mode differentiation.

Only the operations the Gaze-Net graph needs are provided. Every op accepts an
optional leading batch axis where that makes sense, which keeps training
vectorised without general-purpose broadcasting machinery.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor's reflected method

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

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
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
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


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Operations reachable from an output, in topological (execution) order."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order
        self.output = output

    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients accumulate across calls; use :func:`zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for leaf of shape {node.shape}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "identity": lambda x: x}


def elementwise(x: Tensor, fn: str) -> Tensor:
    """Apply ``relu``, ``sigmoid`` or ``identity`` per element."""
    try:
        return _ELEMENTWISE[fn](x)
    except KeyError:
        raise ValueError(f"unknown activation {fn!r}") from None


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw, "stack")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer ``x @ W + b`` on ``[n]`` or ``[B, n]`` inputs."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"dense: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} vs weights {weights.shape}")
    return add(matmul(x, weights), bias)


def _einsum_grad_spec(spec: str) -> tuple[str, str, str]:
    ins, out = spec.replace(" ", "").split("->")
    a, b = ins.split(",")
    for operand, other in ((a, b), (b, a)):
        if len(set(operand)) != len(operand):
            raise ValueError(f"einsum: repeated index in {operand!r}")
        missing = set(operand) - set(other) - set(out)
        if missing:
            raise ValueError(f"einsum: index {missing} is summed within one operand")
    return a, b, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum where every index appears in at least two places."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb, so = _einsum_grad_spec(spec)
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        ga = np.einsum(f"{so},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{so},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "einsum")


def capsule_predictions(u: Tensor, weights: Tensor) -> Tensor:
    """Prediction vectors ``u_hat[b,i,j,:] = W[i,j] @ u[b,i]``.

    ``u`` is ``[B, N_in, d_in]`` and ``weights`` is ``[N_in, N_out, d_out, d_in]``.
    Implemented as a per-input-capsule batched matmul, which is far faster than
    the equivalent einsum at full size.
    """
    u, weights = as_tensor(u), as_tensor(weights)
    n_in, n_out, d_out, d_in = weights.shape
    if u.ndim != 3 or u.shape[1:] != (n_in, d_in):
        raise DimensionError(f"capsule predictions: u {u.shape} vs W {weights.shape}")
    batch = u.shape[0]
    w2 = weights.data.reshape(n_in, n_out * d_out, d_in)
    ut = u.data.transpose(1, 2, 0)  # [N_in, d_in, B]
    out = np.matmul(w2, ut)  # [N_in, N_out*d_out, B]
    out = out.transpose(2, 0, 1).reshape(batch, n_in, n_out, d_out)

    def bw(g):
        gt = g.reshape(batch, n_in, n_out * d_out).transpose(1, 2, 0)  # [N_in, M, B]
        gw = gu = None
        if weights.requires_grad:
            gw = np.matmul(gt, u.data.transpose(1, 0, 2)).reshape(weights.shape)
        if u.requires_grad:
            gu = np.matmul(w2.transpose(0, 2, 1), gt).transpose(2, 0, 1)
        return gu, gw

    return _make(out, (u, weights), bw, "capsule_predictions")


# ---------------------------------------------------------------------------
# convolution

# Bytes of im2col scratch allowed per chunk; full-size PrimaryCaps patches are
# ~36 MB per sample so batches are processed a few samples at a time.
_IM2COL_BUDGET = 256 * 2**20

# dtype of the convolution matmuls; results are always stored as float64
_conv_dtype = DTYPE


@contextlib.contextmanager
def conv_precision(dtype):
    """Run convolution matmuls (forward and backward) in ``dtype``.

    float32 roughly halves the cost of the wide PrimaryCaps convolution.
    Gradient checks need the float64 default.
    """
    global _conv_dtype
    prev = _conv_dtype
    _conv_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _conv_dtype = prev


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _patches(x: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [B, ho, wo, C, k, k] -> [B*ho*wo, k*k*C] matching kernel layout [k, k, C]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * x.shape[3])


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution.

    ``x`` is ``[H, W, Cin]`` or ``[B, H, W, Cin]``; ``kernels`` is
    ``[k, k, Cin, Cout]``. Output extents are ``(H - k) // stride + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernels {kernels.shape}")
    xd = x.data if batched else x.data[None]
    b, h, w, cin = xd.shape
    k, k2, kcin, cout = kernels.shape
    if k != k2 or kcin != cin:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    if h < k or w < k:
        raise DimensionError(f"conv2d: input {h}x{w} smaller than kernel {k}x{k}")
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    ctype = _conv_dtype
    kmat = kernels.data.reshape(k * k * cin, cout).astype(ctype, copy=False)
    xc = xd.astype(ctype, copy=False)
    per_sample = ho * wo * k * k * cin * np.dtype(ctype).itemsize
    chunk = max(1, _IM2COL_BUDGET // per_sample)

    out = np.empty((b, ho, wo, cout), dtype=DTYPE)
    for s in range(0, b, chunk):
        cols = _patches(xc[s : s + chunk], k, stride, ho, wo)
        out[s : s + chunk] = (cols @ kmat).reshape(-1, ho, wo, cout)

    def bw(g):
        g = (g if batched else g[None]).astype(ctype, copy=False)
        gk = np.zeros(kmat.shape, dtype=DTYPE) if kernels.requires_grad else None
        gx = np.zeros_like(xd) if x.requires_grad else None
        for s in range(0, b, chunk):
            gs = g[s : s + chunk].reshape(-1, cout)
            if gk is not None:
                gk += _patches(xc[s : s + chunk], k, stride, ho, wo).T @ gs
            if gx is not None:
                gcols = (gs @ kmat.T).reshape(-1, ho, wo, k, k, cin)
                dst = gx[s : s + chunk]
                for di, dj in itertools.product(range(k), range(k)):
                    dst[:, di : di + (ho - 1) * stride + 1 : stride,
                        dj : dj + (wo - 1) * stride + 1 : stride] += gcols[:, :, :, di, dj]
        if gx is not None and not batched:
            gx = gx[0]
        return gx, (gk.reshape(kernels.shape) if gk is not None else None)

    return _make(out if batched else out[0], (x, kernels), bw, "conv2d")


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(
    fn: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. ``coords`` restricts the check to
    selected flat indices (useful for large parameter arrays).
    """
    base = np.array(as_tensor(point).data, dtype=DTYPE)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = fn(Tensor(base)).item()
        flat[i] = orig - h
        with no_grad():
            fm = fn(Tensor(base)).item()
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
