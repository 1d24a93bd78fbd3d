"""Speaker: encodes a route (observation + action per step) and decodes an instruction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from foam import autodiff as ad
from foam.autodiff import ParamSet, Tape, Tensor
from foam.errors import DataError, NumericalError
from foam.language import BOS, EOS, PAD, UNK
from foam.layers import (MASKED, add_gru, attend, bind, gru_input, gru_step, hold, log_softmax,
                         onehot, stack_time, uniform)
from foam.world import (N_ACTIONS, DropoutMask, EnvironmentGraph, Route, obs_dim, observe,
                        route_states)


@dataclass(frozen=True)
class SpeakerConfig:
    vocab_size: int
    feature_dim: int = 16
    embed_dim: int = 32
    hidden_dim: int = 64
    init_scale: float = 0.08
    max_len: int = 48
    bos: int = BOS
    eos: int = EOS
    banned: tuple = (PAD, BOS, UNK)


@dataclass
class RouteItem:
    env: EnvironmentGraph
    route: Route
    mask: "DropoutMask | None" = None


@dataclass
class SpeakerSample:
    route: Route
    instruction: tuple
    logprob: float
    token_logprobs: list = field(default_factory=list)
    mask: "DropoutMask | None" = None


def init_params(cfg: SpeakerConfig, rng: np.random.Generator) -> ParamSet:
    E, H, s = cfg.embed_dim, cfg.hidden_dim, cfg.init_scale
    P = ParamSet()
    P["speaker.route.w"] = uniform(rng, (obs_dim(cfg.feature_dim) + N_ACTIONS, E), s)
    P["speaker.route.b"] = uniform(rng, (E,), s)
    add_gru(P, "speaker.enc", E, H, rng, s)
    P["speaker.embed"] = uniform(rng, (cfg.vocab_size, E), s)
    add_gru(P, "speaker.dec", E, H, rng, s)
    P["speaker.att.w"] = uniform(rng, (2 * H, H), s)
    P["speaker.out.w"] = uniform(rng, (H, cfg.vocab_size), s)
    P["speaker.out.b"] = uniform(rng, (cfg.vocab_size,), s)
    return P


def _ban_mask(cfg: SpeakerConfig) -> np.ndarray:
    m = np.zeros(cfg.vocab_size, np.float32)
    for t in cfg.banned:
        if 0 <= t < cfg.vocab_size:
            m[t] = MASKED
    return m


def encode_routes(cfg: SpeakerConfig, P, items: Sequence[RouteItem]):
    plans = [list(zip(route_states(it.env, it.route), it.route.actions)) for it in items]
    lengths = np.array([len(p) for p in plans], dtype=np.int64)
    T = int(lengths.max())
    B = len(items)
    D = obs_dim(cfg.feature_dim) + N_ACTIONS
    h = Tensor(np.zeros((B, cfg.hidden_dim), np.float32))
    states = []
    for t in range(T):
        x = np.zeros((B, D), np.float32)
        for k, (it, plan) in enumerate(zip(items, plans)):
            if t < len(plan):
                (node, heading), a = plan[t]
                x[k, :D - N_ACTIONS] = observe(it.env, node, heading, it.mask)
                x[k, D - N_ACTIONS + a] = 1.0
        e = ad.tanh(ad.add(ad.matmul(x, P["speaker.route.w"]), P["speaker.route.b"]))
        h = hold(gru_step(P, "speaker.enc", gru_input(P, "speaker.enc", e), h), h, t < lengths)
        states.append(h)
    key_mask = np.arange(T)[None, :] < lengths[:, None]
    return stack_time(states), key_mask, h


def decode_step(cfg: SpeakerConfig, P, h: Tensor, prev: np.ndarray, keys: Tensor,
                key_mask: np.ndarray, ban: np.ndarray) -> tuple[Tensor, Tensor]:
    x = ad.embedding(P["speaker.embed"], prev)
    h = gru_step(P, "speaker.dec", gru_input(P, "speaker.dec", x), h)
    ctx = attend(h, keys, key_mask)
    o = ad.tanh(ad.matmul(ad.concat([h, ctx], axis=-1), P["speaker.att.w"]))
    logits = ad.add(ad.add(ad.matmul(o, P["speaker.out.w"]), P["speaker.out.b"]), ban)
    return h, logits


def _check_tokens(cfg: SpeakerConfig, instruction: Sequence[int]) -> None:
    if len(instruction) == 0:
        raise DataError("empty instruction")
    for i in instruction:
        if not (0 <= i < cfg.vocab_size):
            raise DataError(f"token id {i} outside vocabulary of size {cfg.vocab_size}")


def teacher_forced(cfg: SpeakerConfig, P, items: Sequence[RouteItem],
                   instructions: Sequence[Sequence[int]]):
    """Per-step logits (B, V) with targets and padding weights."""
    for ins in instructions:
        _check_tokens(cfg, ins)
    keys, kmask, h = encode_routes(cfg, P, items)
    B = len(items)
    T = max(len(i) for i in instructions)
    ban = _ban_mask(cfg)
    targets = np.full((T, B), cfg.eos, dtype=np.int64)
    weights = np.zeros((T, B), np.float32)
    for k, ins in enumerate(instructions):
        targets[:len(ins), k] = ins
        weights[:len(ins), k] = 1.0
    logits = []
    prev = np.full(B, cfg.bos)
    for t in range(T):
        h, lg = decode_step(cfg, P, h, prev, keys, kmask, ban)
        logits.append(lg)
        prev = targets[t]
    return logits, targets, weights


def speaker_loss(cfg: SpeakerConfig, params, items: Sequence[RouteItem],
                 instructions: Sequence[Sequence[int]], tape: "Tape | None" = None) -> Tensor:
    """Mean token cross-entropy of the gold instructions under teacher forcing."""
    if not items:
        raise ValueError("empty batch")
    P = bind(params, tape if tape is not None else Tape())
    logits, targets, weights = teacher_forced(cfg, P, items, instructions)
    loss = ad.cross_entropy(ad.concat(logits, axis=0), targets.reshape(-1), weights.reshape(-1))
    if not np.isfinite(loss.data):
        raise NumericalError("speaker loss is not finite")
    return loss


def mean_logprob(cfg: SpeakerConfig, P, items: Sequence[RouteItem],
                 instructions: Sequence[Sequence[int]]) -> Tensor:
    """Batch mean of log P(instruction | route) as a taped scalar."""
    logits, targets, weights = teacher_forced(cfg, P, items, instructions)
    ce = ad.cross_entropy(ad.concat(logits, axis=0), targets.reshape(-1), weights.reshape(-1))
    return ad.mul(ce, np.float32(-weights.sum() / len(items)))


def token_logprobs(cfg: SpeakerConfig, params, items: Sequence[RouteItem],
                   instructions: Sequence[Sequence[int]]) -> list[np.ndarray]:
    P = bind(params, None)
    logits, targets, weights = teacher_forced(cfg, P, items, instructions)
    out = []
    lps = [log_softmax(lg.data) for lg in logits]
    for k, ins in enumerate(instructions):
        out.append(np.array([lps[t][k, targets[t, k]] for t in range(len(ins))], np.float32))
    return out


def score(cfg: SpeakerConfig, params, env: EnvironmentGraph, route: Route,
          instruction: Sequence[int], mask: "DropoutMask | None" = None) -> float:
    """Exact teacher-forced log P(instruction | route), EOS included."""
    lp = token_logprobs(cfg, params, [RouteItem(env, route, mask)], [instruction])[0]
    return float(np.sum(lp, dtype=np.float64))


def score_batch(cfg: SpeakerConfig, params, items: Sequence[RouteItem],
                instructions: Sequence[Sequence[int]]) -> list[float]:
    return [float(np.sum(lp, dtype=np.float64))
            for lp in token_logprobs(cfg, params, items, instructions)]


def generate(cfg: SpeakerConfig, params, items: Sequence[RouteItem], mode: str = "greedy",
             rng: "np.random.Generator | None" = None, temperature: float = 1.0,
             max_len: "int | None" = None) -> list[SpeakerSample]:
    """Autoregressive decoding, greedy or sampled from the temperature-scaled softmax.

    Recorded log-probs come from the distribution each token was drawn from.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown generation mode {mode!r}")
    if mode == "sample" and (rng is None or temperature <= 0):
        raise ValueError("sampling needs an rng and a positive temperature")
    max_len = cfg.max_len if max_len is None else max_len
    P = bind(params, None)
    keys, kmask, h = encode_routes(cfg, P, items)
    B = len(items)
    ban = _ban_mask(cfg)
    prev = np.full(B, cfg.bos)
    tokens: list[list[int]] = [[] for _ in items]
    lps: list[list[float]] = [[] for _ in items]
    active = np.ones(B, dtype=bool)
    for t in range(max_len):
        h, lg = decode_step(cfg, P, h, prev, keys, kmask, ban)
        if mode == "greedy":
            lp = log_softmax(lg.data)
            choice = np.argmax(lp, axis=1)
        else:
            lp = log_softmax(lg.data / np.float32(temperature))
            p = np.exp(lp.astype(np.float64))
            cdf = np.cumsum(p, axis=1)
            u = rng.random(B) * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(axis=1), cfg.vocab_size - 1)
            bad = p[np.arange(B), choice] == 0
            choice[bad] = np.argmax(lp[bad], axis=1)
        for k in np.flatnonzero(active):
            tokens[k].append(int(choice[k]))
            lps[k].append(float(lp[k, choice[k]]))
        active &= choice != cfg.eos
        prev = choice
        if not active.any():
            break
    return [SpeakerSample(it.route, tuple(tok), float(np.sum(lp, dtype=np.float64)), lp, it.mask)
            for it, tok, lp in zip(items, tokens, lps)]


def onehot_tokens(instructions: Sequence[Sequence[int]], vocab_size: int, eos: int) -> np.ndarray:
    """(T, B, V) one-hots, EOS-padded."""
    T = max(len(i) for i in instructions)
    ids = np.full((T, len(instructions)), eos, dtype=np.int64)
    for k, ins in enumerate(instructions):
        ids[:len(ins), k] = ins
    return onehot(ids, vocab_size)
