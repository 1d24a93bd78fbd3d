"""Small reverse-mode autodiff over dense float32 numpy arrays.

A :class:`Tape` records every op whose inputs are attached to it.  Parameters
are attached with :meth:`Tape.watch`; anything else is a constant.  When no
tape is involved the same op functions run as plain numpy, which is how
inference paths share code with training paths.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from foam.errors import DataError, NumericalError, ShapeError

DTYPE = np.float32
COSINE_EPS = 1e-12
CHECKPOINT_VERSION = 1
_MAGIC = b"FOAMCKPT"

OP_KINDS = (
    "matmul", "add", "sub", "mul", "tanh", "sigmoid", "relu", "softmax", "log",
    "embedding", "concat", "sum", "mean", "cross_entropy", "reshape", "slice",
    "straight_through",
)


@contextmanager
def precision(dtype):
    """Temporarily run every op in another float type (float64 for gradient checks)."""
    global DTYPE
    old, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


class Tensor:
    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: "Tape | None" = None, id: int = -1):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.id = id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.data.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "out", "backward")

    def __init__(self, kind, inputs, out, backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered op record for one forward pass.  Single-threaded; do not share."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: "OrderedDict[str, int]" = OrderedDict()
        self._next = 0
        self._shapes: dict[int, tuple] = {}

    def _new_id(self, shape) -> int:
        i = self._next
        self._next += 1
        self._shapes[i] = shape
        return i

    def watch(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already watched on this tape")
        t = Tensor(value)
        t.tape = self
        t.id = self._new_id(t.data.shape)
        self.params[name] = t.id
        return t

    def watch_all(self, params: "ParamSet") -> dict[str, Tensor]:
        return {name: self.watch(name, arr) for name, arr in params.items()}

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if x.__class__ is Tensor else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _check_finite(kind: str, out: np.ndarray) -> None:
    # any NaN/Inf element makes the sum NaN or Inf, and then s - s is NaN
    with np.errstate(invalid="ignore", over="ignore"):
        s = out.sum()
        bad = s - s != 0
    if bad:
        raise NumericalError(f"non-finite value produced by op {kind!r}")


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward: Callable[[np.ndarray], Sequence["np.ndarray | None"]]) -> Tensor:
    _check_finite(kind, out)
    tape = _tape_of(inputs)
    result = Tensor(out)
    if tape is None:
        return result
    result.tape = tape
    result.id = tape._new_id(out.shape)
    tape.nodes.append(_Node(kind, tuple(t.id for t in inputs), result.id, backward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(kind: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(kind, a.data.shape, b.data.shape) from None


# ---------------------------------------------------------------- ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError("matmul", A.shape, B.shape)
    return _record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record("add", (a, b), _binary("add", np.add, a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record("sub", (a, b), _binary("sub", np.subtract, a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    return _record("mul", (a, b), _binary("mul", np.multiply, a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(DTYPE)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _record("relu", (x,), np.where(on, x.data, 0).astype(DTYPE), lambda g: (g * on,))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    with np.errstate(divide="ignore"):
        y = np.log(X)
    return _record("log", (x,), y, lambda g: (g / X,))


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError("embedding", table.shape, ids.shape,
                         detail=f"ids outside [0, {V})")

    def backward(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record("embedding", (table,), table.data[ids], backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
                t.shape[d] != ts[0].shape[d] for d in range(t.data.ndim) if d != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _record("concat", ts, np.concatenate([t.data for t in ts], axis=ax), backward)


def sum(x, axis: "int | None" = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _record("sum", (x,), np.asarray(x.data.sum(axis=axis), dtype=DTYPE), backward)


def mean(x, axis: "int | None" = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(DTYPE),)

    return _record("mean", (x,), np.asarray(x.data.mean(axis=axis), dtype=DTYPE), backward)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record("reshape", (x,), y, lambda g: (g.reshape(old),))


def getitem(x, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[:, t]`` or ``x[..., a:b]``."""
    x = as_tensor(x)
    shape = x.shape
    try:
        y = x.data[key]
    except IndexError:
        raise ShapeError("slice", shape, (), detail=f"bad index {key!r}") from None

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[key] = g
        return (out,)

    return _record("slice", (x,), np.ascontiguousarray(y), backward)


def slice_last(x, start: int, stop: int) -> Tensor:
    return getitem(x, (Ellipsis, slice(start, stop)))


def cross_entropy(x, targets, weights=None, *, from_logits: bool = True) -> Tensor:
    """Weighted mean of ``-log p[target]`` over the leading axes.

    ``x`` has shape (..., C) and holds logits (default) or probabilities.
    ``weights`` (same shape as ``targets``) masks padding; the mean divides by
    the weight total.
    """
    x = as_tensor(x)
    targets = np.asarray(targets, dtype=np.int64)
    if x.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", x.shape, targets.shape)
    C = x.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise ShapeError("cross_entropy", x.shape, targets.shape,
                         detail=f"targets outside [0, {C})")
    w = np.ones(targets.shape, DTYPE) if weights is None else np.asarray(weights, DTYPE)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("cross_entropy needs a positive weight total")
    onehot = np.eye(C, dtype=DTYPE)[targets]
    if from_logits:
        logp = _log_softmax(x.data)
        picked = (logp * onehot).sum(axis=-1)
        loss = -(picked * w).sum() / total

        def backward(g):
            p = np.exp(logp)
            return ((g * (w / total))[..., None] * (p - onehot),)
    else:
        X = x.data
        with np.errstate(divide="ignore"):
            picked = np.log((X * onehot).sum(axis=-1))
        loss = -np.where(w > 0, picked * w, 0).sum() / total

        def backward(g):
            px = (X * onehot).sum(axis=-1, keepdims=True)
            safe = np.where(px > 0, px, 1)
            return (-(g * (w / total))[..., None] * onehot / safe,)

    return _record("cross_entropy", (x,), np.asarray(loss, dtype=DTYPE), backward)


def straight_through(probs, hard) -> Tensor:
    """Forward emits ``hard`` (a one-hot sample); backward hands the incoming
    gradient to ``probs`` unchanged, as if the sample had been ``probs``."""
    probs = as_tensor(probs)
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != probs.shape:
        raise ShapeError("straight_through", probs.shape, hard.shape)
    return _record("straight_through", (probs,), hard.copy(), lambda g: (g,))


_DISPATCH: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "tanh": tanh,
    "sigmoid": sigmoid, "relu": relu, "softmax": softmax, "log": log,
    "embedding": embedding, "concat": lambda *ts, **kw: concat(ts, **kw),
    "sum": sum, "mean": mean, "cross_entropy": cross_entropy,
    "reshape": reshape, "slice": getitem, "straight_through": straight_through,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> "OrderedDict[str, np.ndarray]":
    """Reverse pass from a scalar ``loss``; returns a gradient per watched parameter."""
    if loss.data.shape != () and loss.data.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be scalar")
    tape = loss.tape
    if tape is None or not tape.nodes:
        raise ValueError("loss is not recorded on a non-empty tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.data.shape, DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if inp < 0 or gi is None:
                continue
            gi = np.asarray(gi, dtype=DTYPE)
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    out = OrderedDict()
    for name, pid in tape.params.items():
        g = grads.get(pid)
        out[name] = g if g is not None else np.zeros(tape._shapes[pid], DTYPE)
    return out


# ---------------------------------------------------------------- parameters

class ParamSet(OrderedDict):
    """Named float32 arrays in a fixed canonical order (insertion order)."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    @property
    def size(self) -> int:
        return int(np.sum([v.size for v in self.values()], dtype=np.int64))

    def layout(self) -> list[tuple[str, tuple]]:
        return [(k, tuple(v.shape)) for k, v in self.items()]

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes, and values."""
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self)


class GradVector:
    """Flat concatenation of per-parameter gradients in a ParamSet's order."""

    def __init__(self, data, layout: Sequence[tuple[str, tuple]], tag=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.layout = [(n, tuple(s)) for n, s in layout]
        self.tag = tag

    def __len__(self) -> int:
        return self.data.size

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.data.astype(np.float64), self.data.astype(np.float64))))


def flatten_grads(grads: Mapping[str, np.ndarray], order: "ParamSet | Sequence[tuple[str, tuple]]",
                  tag=None) -> GradVector:
    layout = order.layout() if isinstance(order, ParamSet) else list(order)
    names = [n for n, _ in layout]
    missing = [n for n in names if n not in grads]
    extra = [n for n in grads if n not in set(names)]
    if missing or extra:
        raise KeyError(f"gradient names do not match parameter set: missing={missing} extra={extra}")
    parts = []
    for name, shape in layout:
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != tuple(shape):
            raise ShapeError("flatten_grads", g.shape, tuple(shape), detail=name)
        parts.append(g.reshape(-1))
    data = np.concatenate(parts) if parts else np.zeros(0, DTYPE)
    return GradVector(data, layout, tag)


def unflatten(vec: GradVector) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    pos = 0
    for name, shape in vec.layout:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = vec.data[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != vec.data.size:
        raise ValueError("vector length does not match its layout")
    return out


def cosine_similarity(u, v) -> float:
    a = np.asarray(u.data if isinstance(u, GradVector) else u, dtype=np.float64)
    b = np.asarray(v.data if isinstance(v, GradVector) else v, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: length mismatch {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))


def clip_grads(grads: Mapping[str, np.ndarray], max_norm: "float | None") -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict((k, np.asarray(g, DTYPE)) for k, g in grads.items())
    if max_norm is None or max_norm <= 0:
        return out
    norm = global_norm(out)
    if norm > max_norm:
        scale = DTYPE(max_norm / norm)
        out = OrderedDict((k, g * scale) for k, g in out.items())
    return out


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float,
             clip: "float | None" = None) -> ParamSet:
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}; step aborted")
    grads = clip_grads(grads, clip)
    out = ParamSet()
    lr32 = DTYPE(lr)
    for name, p in params.items():
        g = grads.get(name)
        out[name] = p.copy() if g is None or lr == 0 else (p - lr32 * g).astype(DTYPE)
    return out


def add_grads(*maps: Mapping[str, np.ndarray], scales: Iterable[float] = ()) -> "OrderedDict[str, np.ndarray]":
    scales = list(scales) or [1.0] * len(maps)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for m, s in zip(maps, scales):
        for k, g in m.items():
            term = (DTYPE(s) * g).astype(DTYPE)
            out[k] = out[k] + term if k in out else term
    return out


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ParamSet, meta: "dict | None" = None) -> None:
    header = json.dumps({"params": [[n, list(s)] for n, s in params.layout()],
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    params = ParamSet()
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 4 * n
    if pos != len(blob):
        raise DataError(f"{path}: trailing bytes after parameter data")
    return params, header.get("meta", {})
