"""Instruction follower: GRU instruction encoder, attentive GRU action decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from foam import autodiff as ad
from foam.autodiff import ParamSet, Tape, Tensor
from foam.errors import NumericalError
from foam.language import PAD
from foam.layers import (MASKED, add_gru, attend, bind, gru_input, gru_step, hold, log_softmax,
                         onehot, stack_time, uniform)
from foam.world import (N_ACTIONS, STOP, DropoutMask, EnvironmentGraph, Route, obs_dim, observe,
                        route_states, step, teacher_action, valid_actions)

START_ACTION = N_ACTIONS    # "previous action" input at t=0


@dataclass(frozen=True)
class FollowerConfig:
    vocab_size: int
    feature_dim: int = 16
    embed_dim: int = 32
    hidden_dim: int = 64
    init_scale: float = 0.08
    max_steps: int = 20


@dataclass
class Episode:
    env: EnvironmentGraph
    route: Route
    instruction: tuple
    mask: "DropoutMask | None" = None

    @property
    def start(self) -> tuple[int, int]:
        return self.route.start, self.route.start_heading


@dataclass
class Rollout:
    route: Route
    actions: list
    logprobs: list = field(default_factory=list)
    truncated: bool = False

    @property
    def logprob(self) -> float:
        return float(np.sum(self.logprobs, dtype=np.float64))


def init_params(cfg: FollowerConfig, rng: np.random.Generator) -> ParamSet:
    E, H, s = cfg.embed_dim, cfg.hidden_dim, cfg.init_scale
    P = ParamSet()
    P["follower.embed"] = uniform(rng, (cfg.vocab_size, E), s)
    add_gru(P, "follower.enc", E, H, rng, s)
    add_gru(P, "follower.dec", obs_dim(cfg.feature_dim) + N_ACTIONS + 1, H, rng, s)
    P["follower.att.w"] = uniform(rng, (2 * H, H), s)
    P["follower.act.w"] = uniform(rng, (H, N_ACTIONS), s)
    P["follower.act.b"] = uniform(rng, (N_ACTIONS,), s)
    return P


def pad_instructions(instructions: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(i) for i in instructions], dtype=np.int64)
    if np.any(lengths == 0):
        raise ValueError("empty instruction in batch")
    ids = np.full((len(instructions), int(lengths.max())), PAD, dtype=np.int64)
    for k, ins in enumerate(instructions):
        ids[k, :len(ins)] = ins
    return ids, lengths


def token_steps_from_ids(P, ids: np.ndarray) -> list[Tensor]:
    return [ad.embedding(P["follower.embed"], ids[:, t]) for t in range(ids.shape[1])]


def token_steps_from_onehots(P, onehots: Sequence[Tensor]) -> list[Tensor]:
    """Embeddings of (possibly straight-through) one-hot token tensors (B, V)."""
    return [ad.matmul(x, P["follower.embed"]) for x in onehots]


def encode(P, steps: Sequence[Tensor], lengths: np.ndarray, hidden: int):
    B = lengths.shape[0]
    h = Tensor(np.zeros((B, hidden), np.float32))
    states = []
    for t, x in enumerate(steps):
        h = hold(gru_step(P, "follower.enc", gru_input(P, "follower.enc", x), h), h, t < lengths)
        states.append(h)
    key_mask = np.arange(len(steps))[None, :] < lengths[:, None]
    return stack_time(states), key_mask, h


def decode_step(P, h: Tensor, obs: np.ndarray, prev: np.ndarray, keys: Tensor,
                key_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    x = np.concatenate([obs, onehot(prev, N_ACTIONS + 1)], axis=1)
    h = gru_step(P, "follower.dec", gru_input(P, "follower.dec", x), h)
    ctx = attend(h, keys, key_mask)
    o = ad.tanh(ad.matmul(ad.concat([h, ctx], axis=-1), P["follower.att.w"]))
    logits = ad.add(ad.matmul(o, P["follower.act.w"]), P["follower.act.b"])
    return h, logits


def _obs_batch(episodes, states, fdim) -> np.ndarray:
    out = np.zeros((len(episodes), obs_dim(fdim)), np.float32)
    for k, (ep, st) in enumerate(zip(episodes, states)):
        if st is not None:
            out[k] = observe(ep.env, st[0], st[1], ep.mask)
    return out


def follower_loss(cfg: FollowerConfig, params, episodes: Sequence[Episode],
                  teacher_forcing: bool = True, tape: "Tape | None" = None,
                  token_steps: "list[Tensor] | None" = None, P=None) -> Tensor:
    """Mean action cross-entropy over batch and time (padding excluded).

    Teacher forcing replays the reference actions; student forcing feeds back
    the follower's own masked argmax and supervises with the shortest-path
    action from wherever it ends up.
    """
    if not episodes:
        raise ValueError("empty batch")
    if P is None:
        P = bind(params, tape if tape is not None else Tape())
    if token_steps is None:
        ids, lengths = pad_instructions([ep.instruction for ep in episodes])
        token_steps = token_steps_from_ids(P, ids)
    else:
        lengths = np.array([len(ep.instruction) for ep in episodes], dtype=np.int64)
    keys, key_mask, h = encode(P, token_steps, lengths, cfg.hidden_dim)
    B = len(episodes)
    logits, targets, weights = [], [], []
    if teacher_forcing:
        plans = [route_states(ep.env, ep.route) for ep in episodes]
        T = max(len(ep.route.actions) for ep in episodes)
        prev = np.full(B, START_ACTION)
        for t in range(T):
            states = [p[t] if t < len(p) else None for p in plans]
            h, lg = decode_step(P, h, _obs_batch(episodes, states, cfg.feature_dim), prev, keys, key_mask)
            tgt = np.array([ep.route.actions[t] if t < len(ep.route.actions) else STOP
                            for ep in episodes])
            logits.append(lg)
            targets.append(tgt)
            weights.append(np.array([t < len(ep.route.actions) for ep in episodes], np.float32))
            prev = tgt
    else:
        states = [ep.start for ep in episodes]
        active = np.ones(B, dtype=bool)
        prev = np.full(B, START_ACTION)
        for t in range(cfg.max_steps):
            h, lg = decode_step(P, h, _obs_batch(episodes, states, cfg.feature_dim), prev, keys, key_mask)
            tgt = np.array([teacher_action(ep.env, s[0], s[1], ep.route.goal)
                            for ep, s in zip(episodes, states)])
            valid = np.stack([valid_actions(ep.env, *s) for ep, s in zip(episodes, states)])
            choice = np.argmax(np.where(valid, lg.data, MASKED), axis=1)
            logits.append(lg)
            targets.append(tgt)
            weights.append(active.astype(np.float32))
            new_states = []
            for k, (ep, s) in enumerate(zip(episodes, states)):
                if active[k] and choice[k] != STOP:
                    n, hd, _ = step(ep.env, s[0], s[1], int(choice[k]))
                    new_states.append((n, hd))
                else:
                    new_states.append(s)
            states = new_states
            active = active & (choice != STOP)
            prev = choice
            if not active.any():
                break
    loss = ad.cross_entropy(ad.concat(logits, axis=0), np.concatenate(targets),
                            np.concatenate(weights))
    if not np.isfinite(loss.data):
        raise NumericalError("follower loss is not finite")
    return loss


# ---------------------------------------------------------------- inference

def _masked_logp(episodes_env, states, logits: np.ndarray) -> np.ndarray:
    valid = np.stack([valid_actions(env, *s) for env, s in zip(episodes_env, states)])
    return log_softmax(np.where(valid, logits, MASKED))


def action_distribution(cfg: FollowerConfig, params, instruction, env, start, heading,
                        history: Sequence[int] = ()) -> np.ndarray:
    """Masked action probabilities after replaying ``history`` (test helper)."""
    P = bind(params, None)
    ids, lengths = pad_instructions([instruction])
    keys, key_mask, h = encode(P, token_steps_from_ids(P, ids), lengths, cfg.hidden_dim)
    node, hd, prev = start, heading, START_ACTION
    for a in list(history) + [None]:
        obs = observe(env, node, hd)[None]
        h, lg = decode_step(P, h, obs, np.array([prev]), keys, key_mask)
        if a is None:
            return np.exp(_masked_logp([env], [(node, hd)], lg.data))[0]
        node, hd, _ = step(env, node, hd, a)
        prev = a


def rollout(cfg: FollowerConfig, params, items: Sequence[tuple], mode: str = "greedy",
            rng: "np.random.Generator | None" = None, max_steps: "int | None" = None) -> list[Rollout]:
    """Decode routes for ``items`` = [(instruction, env, start, heading[, mask]), ...]."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    max_steps = cfg.max_steps if max_steps is None else max_steps
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    P = bind(params, None)
    B = len(items)
    envs = [it[1] for it in items]
    masks = [it[4] if len(it) > 4 else None for it in items]
    ids, lengths = pad_instructions([it[0] for it in items])
    keys, key_mask, h = encode(P, token_steps_from_ids(P, ids), lengths, cfg.hidden_dim)
    states = [(it[2], it[3]) for it in items]
    nodes = [[it[2]] for it in items]
    actions: list[list[int]] = [[] for _ in items]
    logps: list[list[float]] = [[] for _ in items]
    active = np.ones(B, dtype=bool)
    prev = np.full(B, START_ACTION)
    for t in range(max_steps):
        obs = np.stack([observe(e, s[0], s[1], m) for e, s, m in zip(envs, states, masks)])
        h, lg = decode_step(P, h, obs, prev, keys, key_mask)
        lp = _masked_logp(envs, states, lg.data)
        if mode == "greedy":
            choice = np.argmax(lp, axis=1)
        else:
            cdf = np.cumsum(np.exp(lp.astype(np.float64)), axis=1)
            u = rng.random(B) * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(axis=1), N_ACTIONS - 1)
            # never land on a masked action through rounding
            choice = np.where(lp[np.arange(B), choice] <= MASKED / 2, np.argmax(lp, axis=1), choice)
        for k in range(B):
            if not active[k]:
                continue
            a = int(choice[k])
            actions[k].append(a)
            logps[k].append(float(lp[k, a]))
            if a != STOP:
                n, hd, _ = step(envs[k], states[k][0], states[k][1], a)
                if n != states[k][0]:
                    nodes[k].append(n)
                states[k] = (n, hd)
        active &= choice != STOP
        prev = choice
        if not active.any():
            break
    out = []
    for k, it in enumerate(items):
        truncated = not actions[k] or actions[k][-1] != STOP
        acts = actions[k] + ([STOP] if truncated else [])
        out.append(Rollout(Route(envs[k].env_id, tuple(nodes[k]), tuple(acts), it[3]),
                           actions[k], logps[k], truncated))
    return out


def beam_candidates(cfg: FollowerConfig, params, instruction, env: EnvironmentGraph, start: int,
                    heading: int, width: int, max_steps: "int | None" = None) -> list[Rollout]:
    """Beam search over action sequences, best follower log-prob first.

    One slot always holds the greedy continuation, so the greedy route is
    among the candidates for every width.  Hypotheses that reach
    ``max_steps`` without stopping are kept as truncated candidates, matching
    what a greedy rollout would return.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    max_steps = cfg.max_steps if max_steps is None else max_steps
    P = bind(params, None)
    ids, lengths = pad_instructions([instruction])
    keys1, mask1, h1 = encode(P, token_steps_from_ids(P, ids), lengths, cfg.hidden_dim)
    # live hypothesis: (logp, node, heading, prev, h row, actions, nodes, logps, is_greedy)
    live = [(0.0, start, heading, START_ACTION, h1.data[0], [], [start], [], True)]
    finished: list[Rollout] = []
    for t in range(max_steps):
        n = len(live)
        keys = Tensor(np.repeat(keys1.data, n, axis=0))
        kmask = np.repeat(mask1, n, axis=0)
        h = Tensor(np.stack([b[4] for b in live]))
        obs = np.stack([observe(env, b[1], b[2]) for b in live])
        prev = np.array([b[3] for b in live])
        h, lg = decode_step(P, h, obs, prev, keys, kmask)
        lp = _masked_logp([env] * n, [(b[1], b[2]) for b in live], lg.data)
        exp = []
        greedy = None
        for bi, b in enumerate(live):
            if b[8]:
                greedy = (b[0] + float(lp[bi].max()), bi, int(np.argmax(lp[bi])))
            for a in range(N_ACTIONS):
                if lp[bi, a] <= MASKED / 2:
                    continue
                exp.append((b[0] + float(lp[bi, a]), bi, a))
        exp.sort(key=lambda e: (-e[0], e[1], e[2]))
        chosen = exp[:width - len(finished)]
        if greedy is not None and greedy not in chosen:
            chosen[-1] = greedy
        new_live = []
        for score, bi, a in chosen:
            b = live[bi]
            is_greedy = greedy is not None and (bi, a) == greedy[1:]
            acts, nds, lps = b[5] + [a], list(b[6]), b[7] + [float(lp[bi, a])]
            if a == STOP:
                finished.append(Rollout(Route(env.env_id, tuple(nds), tuple(acts), heading),
                                        acts, lps, False))
                continue
            node, hd, _ = step(env, b[1], b[2], a)
            if node != b[1]:
                nds.append(node)
            new_live.append((score, node, hd, a, h.data[bi], acts, nds, lps, is_greedy))
        live = new_live
        if not live or len(finished) >= width:
            live = []
            break
    for b in live:
        finished.append(Rollout(Route(env.env_id, tuple(b[6]), tuple(b[5]) + (STOP,), heading),
                                b[5], b[7], True))
    finished.sort(key=lambda r: -r.logprob)
    return finished[:width]
