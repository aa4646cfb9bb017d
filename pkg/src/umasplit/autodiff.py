"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every op builds a node on a dynamic
tape (the graph is rebuilt on each forward pass), so data-dependent shapes
such as the number of aggregated segments are no problem.

Broadcasting is deliberately limited: a binary op accepts equal shapes, a
scalar, or an operand whose shape is a suffix of the other's (leading-batch
broadcasting, e.g. a bias row added to a batch of frames). Anything else
raises :class:`ShapeError`.
"""

from __future__ import annotations

import os
import struct
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .io_util import FormatError, Reader, atomic_write_bytes

DEBUG = bool(os.environ.get("UMASPLIT_DEBUG"))

LAYER_NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class OpKind(str, Enum):
    MATMUL = "matmul"
    ADD = "add"
    MUL = "elementwise-mul"
    SCALE = "scalar-scale"
    SIGMOID = "sigmoid"
    SWISH = "swish"
    TANH = "tanh"
    EXP = "exp"
    LOG = "log"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log-softmax"
    LAYER_NORM = "layer-norm"
    CONCAT = "concat"
    SLICE = "slice"
    TRANSPOSE = "transpose"
    EMBEDDING = "embedding-gather"
    SEGMENT_MEAN = "segment-weighted-mean"
    MASKED_FILL = "masked-fill"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    # sugar; all routed through the primitive ops below
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Attach a result to the tape. ``backward(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or len(a) == 0 or len(b) == 0:
        return True
    if len(a) >= len(b):
        return a[len(a) - len(b):] == b
    return b[len(b) - len(a):] == a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:
        # size-1 operand broadcast against a full tensor
        g = g.sum(axis=tuple(i for i, s in enumerate(shape) if s == 1), keepdims=True)
    return g


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if not (_broadcast_ok(a.shape, b.shape) or a.data.size == 1 or b.data.size == 1):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if not _broadcast_ok(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading dims into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_node(out, (a, b), backward, OpKind.MATMUL.value)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, OpKind.MATMUL.value)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), backward, OpKind.ADD.value)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), backward, OpKind.MUL.value)


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: (g * c,), OpKind.SCALE.value)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),), OpKind.SIGMOID.value)


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + out * (1.0 - s)),)

    return make_node(out, (a,), backward, OpKind.SWISH.value)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_node(t, (a,), lambda g: (g * (1.0 - t * t),), OpKind.TANH.value)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,), OpKind.EXP.value)


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), OpKind.LOG.value)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (a,), backward, OpKind.SOFTMAX.value)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward, OpKind.LOG_SOFTMAX.value)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine params must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return make_node(out, (x, gain, bias), backward, OpKind.LAYER_NORM.value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return make_node(out, tensors, backward, OpKind.CONCAT.value)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints, slices with steps, Ellipsis."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_node(np.array(out), (a,), backward, OpKind.SLICE.value)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inverse),), OpKind.TRANSPOSE.value)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_node(out, (table,), backward, OpKind.EMBEDDING.value)


def segment_weighted_mean(frames: Tensor, weights: Tensor, membership: np.ndarray) -> Tensor:
    """Weighted mean of frames over each segment.

    frames (..., T, D), weights (..., T), membership (..., I, T) of 0/1 constants.
    Output (..., I, D) with ``out_i = sum_t m_it w_t x_t / sum_t m_it w_t``.
    Rows of ``membership`` that are entirely zero (padding) yield zeros.
    """
    m = np.asarray(membership, dtype=np.float64)
    if frames.shape[:-1] != weights.shape or m.shape[:-2] != weights.shape[:-1] \
            or m.shape[-1] != weights.shape[-1]:
        raise ShapeError(
            f"segment_weighted_mean: frames {frames.shape}, weights {weights.shape}, "
            f"membership {m.shape}")
    w = m * weights.data[..., None, :]
    z = w.sum(axis=-1)
    real = m.any(axis=-1)
    if np.any(z[real] < 1e-12):
        raise FloatingPointError("degenerate segment weight")
    z = np.where(real, z, 1.0)
    out = np.matmul(w, frames.data) / z[..., None]

    def backward(g):
        gz = g / z[..., None]
        gf = gw = None
        if frames.requires_grad:
            gf = np.matmul(np.swapaxes(w, -1, -2), gz)
        if weights.requires_grad:
            # d out_i / d w_t = m_it (x_t - out_i) / z_i
            proj = np.matmul(gz, np.swapaxes(frames.data, -1, -2))
            own = (gz * out).sum(axis=-1, keepdims=True)
            gw = (m * (proj - own)).sum(axis=-2)
        return gf, gw

    return make_node(out, (frames, weights), backward, OpKind.SEGMENT_MEAN.value)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        mask = np.broadcast_to(mask, a.shape)
    out = np.where(mask, value, a.data)
    return make_node(out, (a,), lambda g: (np.where(mask, 0.0, g),), OpKind.MASKED_FILL.value)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


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


def backward(output: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse pass from a scalar. Returns gradients keyed by leaf name.

    When ``params`` is given, every entry gets a gradient; leaves the output
    does not depend on receive zeros. The tape is released afterwards.
    """
    if output.data.size != 1:
        raise ShapeError("backward requires scalar")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[str, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_topo_order(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                if node.name is not None:
                    leaves[node.name] = node.grad
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()
            node._backward = None
    if params is not None:
        return {name: leaves.get(name, np.zeros_like(p.data)) for name, p in params.items()}
    return leaves


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                            eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True, name="x")
    out = f(leaf)
    analytic = backward(out).get("x", np.zeros_like(x0))
    worst = 0.0
    flat = x0.reshape(-1)
    for k in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            xp = flat.copy()
            xp[k] += sign * eps
            v = float(f(Tensor(xp.reshape(x0.shape))).data)
            if not np.isfinite(v):
                raise FloatingPointError(f"f is not finite at perturbed coordinate {k}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * eps)
        a = float(analytic.reshape(-1)[k])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# named-tensor container ("UMAW")
# ---------------------------------------------------------------------------

PARAM_MAGIC = b"UMAW"
PARAM_VERSION = 1


def dump_params(params: dict[str, np.ndarray | Tensor]) -> bytes:
    parts = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value,
                                   dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_params(blob: bytes) -> dict[str, np.ndarray]:
    reader = Reader(blob)
    if reader.take(4) != PARAM_MAGIC:
        raise FormatError("bad magic: not a UMAW parameter file")
    version, count = reader.unpack("<II")
    if version != PARAM_VERSION:
        raise FormatError(f"unsupported UMAW version {version}")
    out = {}
    for _ in range(count):
        (n,) = reader.unpack("<I")
        name = reader.take(n).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if reader.pos != len(blob):
        raise FormatError(f"trailing bytes at offset {reader.pos}")
    return out


def save_params(path, params) -> None:
    atomic_write_bytes(path, dump_params(params))


def read_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load_params(fh.read())


def parameters(names_values: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    """Wrap raw arrays as named trainable leaves."""
    return {name: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=name)
            for name, v in names_values}
