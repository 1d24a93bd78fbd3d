"""Finite-difference oracles: float64 reference forwards written directly in numpy.

The analytic side runs the library op in float32 and back-propagates a random
cotangent ``c``; the oracle differentiates ``sum(c * f(x))`` in float64 with
central differences.  Relative error is ``max|analytic - fd| / max|fd|``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from foam import autodiff as ad

STEP = 1e-3


def fd_grad(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], i: int,
            step: float = STEP) -> np.ndarray:
    x = xs[i]
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        hi = f(xs)
        x[idx] = old - step
        lo = f(xs)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    scale = max(np.abs(n).max(initial=0.0), 1e-6)
    return float(np.abs(a - n).max(initial=0.0) / scale)


# ---------------------------------------------------------------- reference forwards (float64)

def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ce_logits(z, t, w):
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    return -(picked * w).sum() / w.sum()


def _ce_probs(p, t, w):
    picked = np.log(np.take_along_axis(p, t[..., None], axis=-1)[..., 0])
    return -(picked * w).sum() / w.sum()


@dataclass
class Case:
    """One random instance: differentiable inputs, library op, float64 reference."""
    inputs: list
    op: Callable
    ref: Callable


def _shape(rng, ndim_lo=1, ndim_hi=3, hi=4):
    return tuple(int(d) for d in rng.integers(1, hi + 1, size=rng.integers(ndim_lo, ndim_hi + 1)))


def _broadcast_pair(rng):
    shape = _shape(rng, 1, 3)
    kind = rng.integers(3)
    if kind == 0:
        other = shape
    elif kind == 1:
        other = shape[-rng.integers(1, len(shape) + 1):]
    else:
        other = tuple(1 if rng.random() < 0.5 else d for d in shape)
    if rng.random() < 0.5:
        return shape, other
    return other, shape


def make_case(kind: str, rng: np.random.Generator) -> Case:
    n = lambda *s: rng.normal(size=s)
    if kind == "matmul":
        m, k, p = rng.integers(1, 5, size=3)
        return Case([n(m, k), n(k, p)], ad.matmul, lambda a, b: a @ b)
    if kind in ("add", "sub", "mul"):
        sa, sb = _broadcast_pair(rng)
        op = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[kind]
        ref = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[kind]
        return Case([rng.normal(size=sa), rng.normal(size=sb)], op, ref)
    if kind == "tanh":
        return Case([n(*_shape(rng))], ad.tanh, np.tanh)
    if kind == "sigmoid":
        return Case([2 * n(*_shape(rng))], ad.sigmoid, lambda x: 1 / (1 + np.exp(-x)))
    if kind == "relu":
        x = n(*_shape(rng))
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)
        return Case([x], ad.relu, lambda v: np.maximum(v, 0))
    if kind == "softmax":
        return Case([2 * n(*_shape(rng))], ad.softmax, _softmax)
    if kind == "log":
        return Case([rng.uniform(0.5, 2.0, size=_shape(rng))], ad.log, np.log)
    if kind == "embedding":
        V, E = rng.integers(2, 6), rng.integers(1, 4)
        ids = rng.integers(V, size=_shape(rng, 1, 2))
        return Case([n(V, E)], lambda t: ad.embedding(t, ids), lambda t: t[ids])
    if kind == "concat":
        base = list(_shape(rng, 1, 3))
        axis = int(rng.integers(len(base)))
        parts = []
        for _ in range(rng.integers(2, 4)):
            s = list(base)
            s[axis] = int(rng.integers(1, 4))
            parts.append(rng.normal(size=s))
        return Case(parts, lambda *ts: ad.concat(ts, axis=axis),
                    lambda *ts: np.concatenate(ts, axis=axis))
    if kind in ("sum", "mean"):
        shape = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(len(shape)))
        op = ad.sum if kind == "sum" else ad.mean
        ref = np.sum if kind == "sum" else np.mean
        return Case([n(*shape)], lambda x: op(x, axis=axis), lambda x: ref(x, axis=axis))
    if kind == "cross_entropy":
        lead = _shape(rng, 1, 2)
        C = int(rng.integers(2, 6))
        t = rng.integers(C, size=lead)
        w = (rng.random(lead) < 0.8).astype(np.float64)
        w.flat[0] = 1.0
        if rng.random() < 0.5:
            return Case([2 * n(*lead, C)], lambda x: ad.cross_entropy(x, t, w),
                        lambda x: _ce_logits(x, t, w))
        p = rng.uniform(0.2, 1.0, size=lead + (C,))
        return Case([p], lambda x: ad.cross_entropy(x, t, w, from_logits=False),
                    lambda x: _ce_probs(x, t, w))
    if kind == "reshape":
        shape = _shape(rng)
        new = tuple(rng.permutation(shape)) + (1,)
        return Case([n(*shape)], lambda x: ad.reshape(x, new), lambda x: x.reshape(new))
    if kind == "slice":
        shape = _shape(rng)
        key = []
        for d in shape:
            lo = int(rng.integers(d))
            key.append(slice(lo, int(rng.integers(lo + 1, d + 1))))
        key = tuple(key)
        return Case([n(*shape)], lambda x: ad.getitem(x, key), lambda x: x[key])
    if kind == "straight_through":
        # backward is the identity onto probs: the oracle is the relaxed forward x -> x
        shape = _shape(rng)
        hard = (rng.random(shape) < 0.5).astype(np.float64)
        return Case([rng.random(shape)], lambda p: ad.straight_through(p, hard), lambda p: p)
    raise ValueError(kind)


def check_case(case: Case, rng: np.random.Generator) -> float:
    """Max relative error over all inputs of one case."""
    xs32 = [np.asarray(x, np.float32) for x in case.inputs]
    tape = ad.Tape()
    ts = [tape.watch(f"x{i}", x) for i, x in enumerate(xs32)]
    out = case.op(*ts)
    c = rng.normal(size=out.shape).astype(np.float32)
    grads = ad.backward(ad.sum(ad.mul(out, c)))
    c64 = c.astype(np.float64)
    xs64 = [x.astype(np.float64) for x in xs32]
    f = lambda xs: float(np.sum(c64 * case.ref(*xs)))
    return max(rel_err(grads[f"x{i}"], fd_grad(f, xs64, i)) for i in range(len(xs64)))


# ---------------------------------------------------------------- whole-model checks

def model_gradcheck(loss_fn: Callable, params, rng: np.random.Generator,
                    n_dirs: int = 4, n_coords: int = 40, step: float = STEP) -> float:
    """Relative error of the float32 analytic gradient of ``loss_fn(params, tape)``.

    The finite differences evaluate the same model code with every op in
    float64, along random directions and on random single coordinates.
    """
    tape = ad.Tape()
    grads = ad.backward(loss_fn(params, tape))
    flat = ad.flatten_grads(grads, params).data.astype(np.float64)
    base = {k: v.astype(np.float64) for k, v in params.items()}
    names = list(params)
    sizes = [params[k].size for k in names]

    def f(vec):
        shifted = ad.ParamSet()
        pos = 0
        for k, s in zip(names, sizes):
            shifted[k] = base[k] + vec[pos:pos + s].reshape(base[k].shape)
            pos += s
        with ad.precision(np.float64):
            return float(loss_fn(shifted, None).data)

    total = len(flat)
    errs = []
    for _ in range(n_dirs):
        v = rng.normal(size=total)
        v /= np.linalg.norm(v)
        fd = (f(step * v) - f(-step * v)) / (2 * step)
        errs.append(abs(fd - flat @ v) / max(np.linalg.norm(flat), 1e-6))
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    fd = np.zeros(len(coords))
    for j, ci in enumerate(coords):
        e = np.zeros(total)
        e[ci] = step
        fd[j] = (f(e) - f(-e)) / (2 * step)
    errs.append(float(np.abs(fd - flat[coords]).max() / max(np.abs(flat).max(), 1e-6)))
    return max(errs)
