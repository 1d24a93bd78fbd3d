"""Gated recurrent cell, dot-product attention, and parameter helpers shared by both models."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from foam import autodiff as ad
from foam.autodiff import ParamSet, Tape, Tensor

MASKED = -1e9       # additive logit mask; exp() underflows to exactly 0 in float32
ATTN_MASKED = -1e4


def uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(np.float32)


def add_gru(params: ParamSet, prefix: str, in_dim: int, hidden: int,
            rng: np.random.Generator, scale: float) -> None:
    params[f"{prefix}.w_x"] = uniform(rng, (in_dim, 3 * hidden), scale)
    params[f"{prefix}.b_x"] = uniform(rng, (3 * hidden,), scale)
    params[f"{prefix}.w_h"] = uniform(rng, (hidden, 3 * hidden), scale)
    params[f"{prefix}.b_h"] = uniform(rng, (3 * hidden,), scale)


def bind(params: Mapping[str, np.ndarray], tape: "Tape | None") -> dict[str, Tensor]:
    """Tensors for ``params``: watched on ``tape`` or plain constants."""
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return tape.watch_all(params)


def gru_input(P: Mapping[str, Tensor], prefix: str, x) -> Tensor:
    return ad.add(ad.matmul(x, P[f"{prefix}.w_x"]), P[f"{prefix}.b_x"])


def gru_step(P: Mapping[str, Tensor], prefix: str, xp: Tensor, h: Tensor) -> Tensor:
    """One GRU update; ``xp`` is the precomputed input projection (B, 3H)."""
    H = h.shape[-1]
    hp = ad.add(ad.matmul(h, P[f"{prefix}.w_h"]), P[f"{prefix}.b_h"])
    zr = ad.sigmoid(ad.slice_last(ad.add(xp, hp), 0, 2 * H))
    z, r = ad.slice_last(zr, 0, H), ad.slice_last(zr, H, 2 * H)
    n = ad.tanh(ad.add(ad.slice_last(xp, 2 * H, 3 * H), ad.mul(r, ad.slice_last(hp, 2 * H, 3 * H))))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def hold(h_new: Tensor, h_old: Tensor, active: np.ndarray) -> Tensor:
    """Keep ``h_old`` where ``active`` (B,) is 0."""
    if np.all(active):
        return h_new
    m = active.astype(np.float32)[:, None]
    return ad.add(ad.mul(h_new, m), ad.mul(h_old, 1.0 - m))


def stack_time(states: Sequence[Tensor]) -> Tensor:
    """List of (B, H) -> (B, T, H)."""
    B, H = states[0].shape
    return ad.concat([ad.reshape(s, (B, 1, H)) for s in states], axis=1)


def attend(h: Tensor, keys: Tensor, key_mask: np.ndarray) -> Tensor:
    """Dot-product attention of query ``h`` (B,H) over ``keys`` (B,T,H)."""
    B, T, H = keys.shape
    scores = ad.sum(ad.mul(keys, ad.reshape(h, (B, 1, H))), axis=-1)
    if not np.all(key_mask):
        scores = ad.add(scores, np.where(key_mask, 0.0, ATTN_MASKED).astype(np.float32))
    alpha = ad.softmax(scores)
    return ad.sum(ad.mul(keys, ad.reshape(alpha, (B, T, 1))), axis=1)


def onehot(idx, n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float32)[np.asarray(idx, dtype=np.int64)]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
