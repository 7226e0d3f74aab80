"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation used by the model is defined here as a pure function over
``Tensor`` values.  Each op records a backward closure on the output, so a
scalar loss can be differentiated exactly with :func:`grad`.  The engine is
deliberately small: row-major float64 only, and no broadcasting beyond what
the model needs.  Non-finite values are rejected where they can first arise
(construction, div, exp) and again when gradients are collected, so a NaN or
Inf anywhere in a computation surfaces as NumericsError.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Sequence, Tuple

import numpy as np
import scipy.sparse as _sp


def _tune_allocator() -> None:
    # Forward/backward passes allocate many multi-MB temporaries; with glibc
    # defaults each goes through mmap/munmap and re-faults its pages, which
    # dominates runtime.  Raising the thresholds keeps buffers reusable.
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        libc.mallopt(-3, 1 << 28)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 28)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):  # non-glibc platforms
        pass


_tune_allocator()


class NumericsError(RuntimeError):
    """Raised on shape mismatches, non-finite values, or misuse of an op."""


class CheckpointError(RuntimeError):
    """Raised when a parameter checkpoint cannot be parsed."""


class _TapeState(threading.local):
    def __init__(self):
        self.grad_enabled = True


_tape = _TapeState()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles).

    The flag is thread-local, so concurrent inference passes are safe.
    """
    prev = _tape.grad_enabled
    _tape.grad_enabled = False
    try:
        yield
    finally:
        _tape.grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite value produced by {what}")
    return arr


class Tensor:
    """Immutable float64 array plus tape bookkeeping.

    ``data`` is never mutated after construction; ``grad`` is filled in by a
    backward pass and holds an array of the same shape.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check:
            _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar used by the loss code; all routed through module ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, what: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    return out


def _reduce_to_shape(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, "add")

    def backward():
        a._accum(_reduce_to_shape(out.grad, a.data.shape))
        b._accum(_reduce_to_shape(out.grad, b.data.shape))

    return _attach(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data - b.data, "sub")

    def backward():
        a._accum(_reduce_to_shape(out.grad, a.data.shape))
        b._accum(_reduce_to_shape(-out.grad, b.data.shape))

    return _attach(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, "mul")

    def backward():
        a._accum(_reduce_to_shape(out.grad * b.data, a.data.shape))
        b._accum(_reduce_to_shape(out.grad * a.data, b.data.shape))

    return _attach(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(_check_finite(a.data / b.data, "div"), "div")

    def backward():
        a._accum(_reduce_to_shape(out.grad / b.data, a.data.shape))
        b._accum(_reduce_to_shape(-out.grad * a.data / (b.data * b.data),
                                  b.data.shape))

    return _attach(out, (a, b), backward)


def _attach(out: Tensor, parents: Tuple[Tensor, ...],
            backward: Callable[[], None]) -> Tensor:
    if _tape.grad_enabled:
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions broadcast per numpy rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul expects operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise NumericsError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = _result(np.matmul(a.data, b.data), "matmul")

    def backward():
        g = out.grad
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        a._accum(_reduce_to_shape(ga, a.data.shape))
        if b.ndim == 2 and a.ndim > 2:
            # shared right operand: one flat GEMM instead of a batch of
            # outer products followed by a reduction
            k = a.data.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            b._accum(gb)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_reduce_to_shape(gb, b.data.shape))

    return _attach(out, (a, b), backward)


def linear(x, W, b) -> Tensor:
    """x @ W + b in one op (bias broadcast over rows)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.shape[-1] != W.data.shape[0] or b.data.shape != (W.data.shape[1],):
        raise NumericsError("linear shape mismatch")
    data = np.matmul(x.data, W.data)
    data += b.data
    out = _result(data, "linear")

    def backward():
        g = out.grad
        x._accum(np.matmul(g, W.data.T))
        if g.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            W._accum(x.data.reshape(-1, x.data.shape[-1]).T @ g2)
            b._accum(g2.sum(axis=0))
        else:
            W._accum(x.data.T @ g)
            b._accum(g.sum(axis=0))

    return _attach(out, (x, W, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise NumericsError("transpose expects ndim >= 2")
    out = _result(np.swapaxes(a.data, -1, -2), "transpose")

    def backward():
        a._accum(np.swapaxes(out.grad, -1, -2))

    return _attach(out, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), "reshape")

    def backward():
        a._accum(out.grad.reshape(a.data.shape))

    return _attach(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), "concat")
    sizes = [p.data.shape[axis] for p in parts]

    def backward():
        pieces = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
        for p, g in zip(parts, pieces):
            p._accum(g)

    return _attach(out, tuple(parts), backward)


def concat_cols(a, b) -> Tensor:
    """Column-wise concatenation of two matrices with equal row counts."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise NumericsError("concat_cols row shapes differ")
    return concat([a, b], axis=-1)


def outer(u, v) -> Tensor:
    """Outer product of two vectors: (N,) x (M,) -> (N, M)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise NumericsError("outer expects two 1-D vectors")
    out = _result(np.outer(u.data, v.data), "outer")

    def backward():
        u._accum(out.grad @ v.data)
        v._accum(u.data @ out.grad)

    return _attach(out, (u, v), backward)


def frobenius(a, b) -> Tensor:
    """Elementwise inner product sum(A * B) of two equal-shape arrays."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise NumericsError(
            f"frobenius shapes differ: {a.data.shape} vs {b.data.shape}")
    out = _result(np.asarray((a.data * b.data).sum()), "frobenius")

    def backward():
        a._accum(out.grad * b.data)
        b._accum(out.grad * a.data)

    return _attach(out, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and indexing
# ---------------------------------------------------------------------------

def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.sum(axis=axis), "sum_axis")

    def backward():
        a._accum(np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape).copy())

    return _attach(out, (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.asarray(a.data.sum()), "sum_all")

    def backward():
        a._accum(np.full_like(a.data, out.grad))

    return _attach(out, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def gather_rows(a, idx, scatter=None) -> Tensor:
    """Select rows along axis 0; backward scatter-adds into the source.

    ``scatter`` may be a precomputed (source_rows x len(idx)) sparse matrix
    with ones at (idx[e], e); when given, the backward scatter-add becomes a
    sparse matmul, which is much faster than np.add.at on large index sets.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = _result(a.data[idx], "gather_rows")

    def backward():
        if scatter is not None:
            a._accum(scatter @ out.grad)
        else:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accum(g)

    return _attach(out, (a,), backward)


def segment_sum(a, segment_ids, num_segments: int, scatter=None) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets along axis 0.

    ``scatter`` is the same optional sparse matrix as in gather_rows (here
    shaped num_segments x rows); it accelerates the forward accumulation.
    """
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.data.shape[0]:
        raise NumericsError("segment_sum id count differs from row count")
    if scatter is not None:
        data = np.asarray(scatter @ a.data)
    else:
        data = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
        np.add.at(data, seg, a.data)
    out = _result(data, "segment_sum")

    def backward():
        a._accum(out.grad[seg])

    return _attach(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

_scratch: Dict[Tuple[str, Tuple[int, ...]], np.ndarray] = {}


def _scratch_buf(tag: str, shape: Tuple[int, ...]) -> np.ndarray:
    """Reusable transient buffer (single-threaded use only).

    Keeping edge-wide temporaries out of the tape and reusing hot buffers is
    what makes full-graph attention affordable; backward recomputes gathers
    into the same scratch space instead of retaining them.
    """
    key = (tag, shape)
    buf = _scratch.get(key)
    if buf is None:
        buf = np.empty(shape, dtype=np.float64)
        _scratch[key] = buf
    return buf


def pair_dot(A, B, rows_a, rows_b, heads: int, scatter_a, scatter_b) -> Tensor:
    """Per-edge head-blocked dot products out[e, h] = A[rows_a[e]] . B[rows_b[e]]
    over column block h, without retaining edge-wide gathers on the tape.

    ``scatter_a``/``scatter_b`` are the sparse scatter matrices for the two
    index vectors (as in gather_rows); backward regathers into scratch.
    """
    A, B = as_tensor(A), as_tensor(B)
    m = rows_a.shape[0]
    n_cols = A.data.shape[1]
    if B.data.shape[1] != n_cols or n_cols % heads != 0:
        raise NumericsError("pair_dot needs equal (n, heads*w) operands")
    w = n_cols // heads

    def gathered(tag, source, rows):
        buf = _scratch_buf(tag, (m, n_cols))
        np.take(source, rows, axis=0, out=buf, mode="clip")
        return buf.reshape(m, heads, w)

    av = gathered("pair_a", A.data, rows_a)
    bv = gathered("pair_b", B.data, rows_b)
    out = _result(np.einsum("mhw,mhw->mh", av, bv), "pair_dot")

    def backward():
        g = out.grad[:, :, None]
        tmp = _scratch_buf("pair_tmp", (m, heads, w))
        np.multiply(gathered("pair_b", B.data, rows_b), g, out=tmp)
        A._accum(scatter_a @ tmp.reshape(m, n_cols))
        np.multiply(gathered("pair_a", A.data, rows_a), g, out=tmp)
        B._accum(scatter_b @ tmp.reshape(m, n_cols))

    return _attach(out, (A, B), backward)


def edge_mix(alpha, V, src, indptr, dst, heads: int, scatter_src) -> Tensor:
    """out[x, h-block] = sum over in-edges e of x:  alpha[e, h] * V[src[e], h-block].

    Edges must be grouped by destination with boundaries ``indptr`` (CSR
    layout), which makes the mix a sparse matrix product per head; nothing
    edge-wide is retained on the tape.
    """
    alpha, V = as_tensor(alpha), as_tensor(V)
    m, got_heads = alpha.data.shape
    n, n_cols = V.data.shape
    if got_heads != heads or n_cols % heads != 0:
        raise NumericsError("edge_mix operand shapes inconsistent with heads")
    w = n_cols // heads

    def weight_matrix(h, data):
        return _sp.csr_matrix((data[:, h], src, indptr), shape=(n, n))

    data = np.empty((n, n_cols))
    for h in range(heads):
        data[:, h * w:(h + 1) * w] = weight_matrix(h, alpha.data) @ np.ascontiguousarray(
            V.data[:, h * w:(h + 1) * w])
    out = _result(data, "edge_mix")

    def backward():
        g = out.grad
        dv = np.empty_like(V.data)
        for h in range(heads):
            block = slice(h * w, (h + 1) * w)
            dv[:, block] = weight_matrix(h, alpha.data).T @ np.ascontiguousarray(g[:, block])
        V._accum(dv)
        gbuf = _scratch_buf("mix_g", (m, n_cols))
        np.take(g, dst, axis=0, out=gbuf, mode="clip")
        vbuf = _scratch_buf("mix_v", (m, n_cols))
        np.take(V.data, src, axis=0, out=vbuf, mode="clip")
        alpha._accum(np.einsum("mhw,mhw->mh", gbuf.reshape(m, heads, w),
                               vbuf.reshape(m, heads, w)))

    return _attach(out, (alpha, V), backward)


def rowwise_head_dot(a, b, heads: int) -> Tensor:
    """Per-row dot products in ``heads`` groups of columns.

    For (m, heads*w) inputs returns (m, heads) where out[i, h] is the dot of
    the h-th column block of row i of ``a`` and ``b``.  Fused so the (m,
    heads, w) product is never materialized in the forward pass.
    """
    a, b = as_tensor(a), as_tensor(b)
    m, cols = a.data.shape
    if b.data.shape != (m, cols) or cols % heads != 0:
        raise NumericsError("rowwise_head_dot needs equal (m, heads*w) shapes")
    w = cols // heads
    av = a.data.reshape(m, heads, w)
    bv = b.data.reshape(m, heads, w)
    out = _result(np.einsum("mhw,mhw->mh", av, bv), "rowwise_head_dot")

    def backward():
        g = out.grad[:, :, None]
        a._accum((g * bv).reshape(m, cols))
        b._accum((g * av).reshape(m, cols))

    return _attach(out, (a, b), backward)


def slice_cols(a, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a 2-D tensor; backward pads with zeros."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise NumericsError("slice_cols expects a 2-D tensor")
    out = _result(a.data[:, lo:hi], "slice_cols")

    def backward():
        g = np.zeros_like(a.data)
        g[:, lo:hi] = out.grad
        a._accum(g)

    return _attach(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.maximum(a.data, 0.0), "relu")

    def backward():
        a._accum(out.grad * (a.data > 0.0))

    return _attach(out, (a,), backward)


def elu(a) -> Tensor:
    """Exponential linear unit with alpha = 1: x for x > 0, exp(x) - 1 below."""
    a = as_tensor(a)
    neg = np.exp(np.minimum(a.data, 0.0)) - 1.0
    out = _result(np.where(a.data > 0.0, a.data, neg), "elu")

    def backward():
        a._accum(out.grad * np.where(a.data > 0.0, 1.0, neg + 1.0))

    return _attach(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _result(_check_finite(np.exp(a.data), "exp"), "exp")

    def backward():
        a._accum(out.grad * out.data)

    return _attach(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericsError("log of non-positive value")
    out = _result(np.log(a.data), "log")

    def backward():
        a._accum(out.grad / a.data)

    return _attach(out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data * a.data, "square")

    def backward():
        a._accum(out.grad * 2.0 * a.data)

    return _attach(out, (a,), backward)


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, shifted by the row max for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s, "softmax_rows")

    def backward():
        g = out.grad
        dot = (g * s).sum(axis=-1, keepdims=True)
        a._accum(s * (g - dot))

    return _attach(out, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit variance, then
    scale by ``gain`` and shift by ``bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise NumericsError("layer_norm gain/bias must match the row width")
    mean = a.data.mean(axis=-1, keepdims=True)
    xhat = a.data - mean
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = _result(xhat * gain.data + bias.data, "layer_norm")

    def backward():
        g = out.grad
        gain._accum(_reduce_to_shape(g * xhat, gain.data.shape))
        bias._accum(_reduce_to_shape(g, bias.data.shape))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        a._accum(inv * (gx - m1 - xhat * m2))

    return _attach(out, (a, gain, bias), backward)


DROPOUT_MODES = ("train", "mc-infer", "off")


def dropout(a, ratio: float, rng: np.random.Generator | None,
            mode: str) -> Tensor:
    """Inverted dropout: zero entries with probability ``ratio`` and scale
    survivors by 1/(1-ratio).  ``mc-infer`` behaves exactly like ``train`` but
    is named separately so inference call sites state their intent."""
    if mode not in DROPOUT_MODES:
        raise NumericsError(f"unknown dropout mode {mode!r}")
    if not 0.0 <= ratio < 1.0:
        raise NumericsError("dropout ratio must be in [0, 1)")
    a = as_tensor(a)
    if mode == "off" or ratio == 0.0:
        return a
    if rng is None:
        raise NumericsError("dropout in train/mc-infer mode needs an rng")
    # float32 uniforms halve the rng cost; the comparison is exact either way
    keep = (rng.random(a.data.shape, dtype=np.float32) >= ratio) / (1.0 - ratio)
    out = _result(a.data * keep, "dropout")

    def backward():
        a._accum(out.grad * keep)

    return _attach(out, (a,), backward)


# ---------------------------------------------------------------------------
# parameters, gradients, optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered mapping of stable names to parameter tensors."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise NumericsError(f"duplicate parameter name {name!r}")
        t = as_tensor(value)
        self._params[name] = t
        return t

    def replace(self, name: str, value) -> Tensor:
        if name not in self._params:
            raise NumericsError(f"unknown parameter {name!r}")
        t = as_tensor(value)
        if t.data.shape != self._params[name].data.shape:
            raise NumericsError(f"shape change for parameter {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def copy_arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            self.replace(k, arr)


@dataclass
class GradResult:
    loss: float
    grads: Dict[str, np.ndarray]


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss through the recorded tape."""
    if loss.data.shape != ():
        raise NumericsError("backward requires a scalar loss")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    for node in topo:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def grad(loss: Tensor, params: ParamStore) -> GradResult:
    """Differentiate a scalar loss w.r.t. every parameter in the store.

    Parameters not reachable from the loss get zero gradients so the result
    always aligns with the store.
    """
    for _, t in params.items():
        t.grad = None
    backward(loss)
    grads: Dict[str, np.ndarray] = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return GradResult(loss=float(loss.data), grads=grads)


@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]


def adam_init(params: ParamStore) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update; replaces tensors in the store."""
    state.step += 1
    t = state.step
    for name, tensor in list(params.items()):
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise NumericsError(f"gradient shape mismatch for {name!r}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        params.replace(name, tensor.data - lr * mhat / (np.sqrt(vhat) + eps))
    return params, state


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"EASINGPK"
_VERSION = 1


def save_params(params: ParamStore, path) -> None:
    """Write the store as `magic, version, count, records...` where each
    record is `name_len, name, rank, dims..., little-endian f64 payload`."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(params)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr = tensor.data
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_params(path) -> ParamStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise CheckpointError("bad checkpoint magic")
    offset = 8
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    store = ParamStore()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f8", count=size,
                                    offset=offset).reshape(dims)
            offset += 8 * size
            store.add(name, payload.astype(np.float64))
    except (struct.error, ValueError) as err:
        raise CheckpointError(f"truncated or corrupt checkpoint: {err}") from err
    if offset != len(blob):
        raise CheckpointError("trailing bytes after final checkpoint record")
    return store
