"""A small reverse-mode autodiff engine over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` holding its
parents and a closure that maps the output gradient to parent gradients.
:func:`backward` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._accel import njit
from .errors import CheckpointError, ContractError, DimensionError, FormatError, ParameterError, TruncationError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for frozen teachers and evaluation."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn: Callable) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    with ``requires_grad``.  Calling twice without resetting accumulates."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Elementwise and shape operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        return scale(a, b)
    if np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T, (x,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def row_normalize(x: Tensor) -> Tensor:
    """Divide each row of a matrix by its Euclidean norm; zero rows pass through."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms).astype(x.dtype)
    y = x.data / safe

    def fn(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(zero, g, (g - y * proj) / safe),)

    return _make(y, (x,), fn)


# ---------------------------------------------------------------------------
# Softmax family


def _check_temperature(t: float):
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """``log softmax(x / temperature)`` along the last axis."""
    _check_temperature(temperature)
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: ((g - p * g.sum(axis=-1, keepdims=True)) / x.dtype.type(temperature),))


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """``softmax(x / temperature)`` along the last axis."""
    _check_temperature(temperature)
    z = x.data / x.dtype.type(temperature)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)) / x.dtype.type(temperature),))


# ---------------------------------------------------------------------------
# Convolution and pooling, NHWC layout, HWIO weights


def _col2im_loop(cols, k, stride, pad, ho, wo, out):
    n, h, w, c = out.shape
    r = 0
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for i in range(k):
                    y = oy * stride + i - pad
                    for j in range(k):
                        xx = ox * stride + j - pad
                        if 0 <= y < h and 0 <= xx < w:
                            for ch in range(c):
                                out[b, y, xx, ch] += cols[r, col + ch]
                        col += c
                r += 1
    return out


_col2im_nb = njit(_col2im_loop)


def _pad(x, pad):
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s = xp.strides
    return as_strided(xp, shape=(n, ho, wo, k, k, c), strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]))


def im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Patches of an NHWC array as rows ``(N*ho*wo, k*k*C)``, zero padded."""
    # a strided-window copy beats a compiled loop here, so there is no numba variant
    n, _, _, c = x.shape
    xp = np.ascontiguousarray(_pad(x, pad))
    return _windows(xp, k, stride, ho, wo).reshape(n * ho * wo, k * k * c)


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an NHWC array."""
    n, h, w, c = shape
    if _col2im_nb is not None:
        return _col2im_nb(np.ascontiguousarray(cols), k, stride, pad, ho, wo, np.zeros(shape, dtype=cols.dtype))
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    d6 = cols.reshape(n, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += d6[:, :, :, i, j, :]
    return dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, H, W, C) with ``weight`` (k, k, C, O)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, h, w, c = x.shape
    k, k2, cw, o = weight.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {weight.shape}")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d input {x.shape} too small for kernel {k}")
    cols = im2col(x.data, k, stride, padding, ho, wo)
    wmat = weight.data.reshape(k * k * c, o)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gm = g.reshape(-1, o)
        gw = (cols.T @ gm).reshape(weight.shape) if weight.requires_grad else None
        gx = col2im(gm @ wmat.T, x.shape, k, stride, padding, ho, wo) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _make(out, parents, fn)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects a 4-D input, got {x.shape}")
    n, h, w, c = x.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d input {x.shape} smaller than kernel {kernel}")
    win = _windows(np.ascontiguousarray(x.data), kernel, stride, ho, wo)  # (n, ho, wo, k, k, c)
    win = win.transpose(0, 1, 2, 5, 3, 4).reshape(n, ho, wo, c, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (arg == i * kernel + j) * g
        return (gx,)

    return _make(out, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    n, h, w, c = x.shape
    return _make(x.data.mean(axis=(1, 2)), (x,), lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"TGDCK1"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray | Tensor]):
    """Write named float32 tensors; the file appears atomically."""
    chunks = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write(path, b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:6] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file", 0)
    pos = 6

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncationError(f"{path}: checkpoint truncated", pos)
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        nvals = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * nvals), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after last tensor", pos)
    return out


def assign_params(params: Mapping[str, Tensor], values: Mapping[str, np.ndarray]):
    """Copy ``values`` into ``params`` by name, rejecting any mismatch."""
    missing = set(params) ^ set(values)
    if missing:
        raise CheckpointError(f"checkpoint tensor names differ: {sorted(missing)}")
    for name, t in params.items():
        v = values[name]
        if tuple(v.shape) != t.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {tuple(v.shape)} vs model {t.shape}")
    for name, t in params.items():
        t.data = np.array(values[name], dtype=t.dtype)


def atomic_write(path, payload: bytes | str):
    """Write to ``path`` through a temporary sibling renamed on success."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(payload)
    tmp.replace(path)
