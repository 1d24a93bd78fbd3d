import itertools

import numpy as np
import pytest

from foam import follower as fol
from foam.language import VOCAB, annotate
from foam.world import (EAST, FORWARD, N_ACTIONS, STOP, DropoutMask, Route, sample_route,
                        step, valid_actions)
from conftest import grid_env, line_env
from gradcheck import model_gradcheck

CFG = fol.FollowerConfig(vocab_size=len(VOCAB), feature_dim=4, embed_dim=6, hidden_dim=8,
                         max_steps=6)


def params(seed=0, cfg=CFG):
    return fol.init_params(cfg, np.random.default_rng(seed))


def episodes(env, n, seed=0, bounds=(2, 5)):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        r = sample_route(env, rng, bounds)
        out.append(fol.Episode(env, r, annotate(r, env, k % 3)))
    return out


def test_param_shapes_and_names():
    p = params()
    assert all(k.startswith("follower.") for k in p)
    assert p["follower.embed"].shape == (len(VOCAB), 6)
    assert p["follower.act.w"].shape == (8, N_ACTIONS)
    assert all(np.abs(v).max() <= 0.08 for v in p.values())


def test_initial_loss_near_ln4():
    env = grid_env(4)
    cfg = fol.FollowerConfig(vocab_size=len(VOCAB), feature_dim=4)
    eps = episodes(env, 32)
    losses = [fol.follower_loss(cfg, fol.init_params(cfg, np.random.default_rng(s)), eps).item()
              for s in range(5)]
    assert abs(np.mean(losses) - np.log(4)) < 0.05


def test_perfect_prediction_gives_zero_loss():
    env = line_env(2)
    r = Route("line", (0,), (STOP,), EAST)
    p = params()
    p["follower.act.w"][:] = 0
    p["follower.act.b"][:] = [0, 0, 0, 200]
    loss = fol.follower_loss(CFG, p, [fol.Episode(env, r, annotate(r, env))])
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("teacher", [True, False])
def test_duplicated_batch_keeps_mean(teacher):
    env = grid_env(3)
    eps = episodes(env, 5)
    p = params()
    a = fol.follower_loss(CFG, p, eps, teacher_forcing=teacher).item()
    b = fol.follower_loss(CFG, p, eps + eps, teacher_forcing=teacher).item()
    assert b == pytest.approx(a, rel=1e-5)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        fol.follower_loss(CFG, params(), [])


@pytest.mark.parametrize("teacher", [True, False])
def test_loss_gradient_two_node_world(teacher):
    env = line_env(2, tags=(None, "red"))
    eps = [fol.Episode(env, Route("line", (0, 1), (FORWARD, STOP), EAST),
                       annotate(Route("line", (0, 1), (FORWARD, STOP), EAST), env)),
           fol.Episode(env, Route("line", (1,), (STOP,), 0),
                       annotate(Route("line", (1,), (STOP,), 0), env, 1))]
    p = params(3)
    err = model_gradcheck(lambda q, tape: fol.follower_loss(CFG, q, eps, teacher, tape=tape),
                          p, np.random.default_rng(0))
    assert err < 1e-3


def test_loss_gradient_grid_world_with_masks():
    env = grid_env(3)
    eps = episodes(env, 3, seed=2)
    eps[0].mask = DropoutMask.sample(np.random.default_rng(1), 4, 0.5)
    err = model_gradcheck(lambda q, tape: fol.follower_loss(CFG, q, eps, True, tape=tape),
                          params(4), np.random.default_rng(1))
    assert err < 1e-3


# ---------------------------------------------------------------- inference

def test_action_masking_is_exact():
    env = line_env(3)
    p = params(1)
    p["follower.act.b"][FORWARD] = 5.0
    for node, heading in [(0, 0), (2, EAST), (1, 2)]:
        probs = fol.action_distribution(CFG, p, (5, 6, 2), env, node, heading)
        ok = valid_actions(env, node, heading)
        assert np.all(probs[~ok] == 0.0)
        assert abs(probs.sum() - 1.0) < 1e-5


def test_stop_forcing_params_give_single_node_route():
    env = grid_env(3)
    p = params()
    p["follower.act.b"][:] = [0, 0, 0, 100]
    out = fol.rollout(CFG, p, [((5, 2), env, 4, 0)])[0]
    assert out.route.nodes == (4,)
    assert out.actions == [STOP] and not out.truncated


def test_greedy_rollout_deterministic():
    env = grid_env(3)
    items = [(ep.instruction, env, *ep.start) for ep in episodes(env, 6)]
    a = fol.rollout(CFG, params(2), items)
    b = fol.rollout(CFG, params(2), items)
    assert [(x.route, x.logprobs) for x in a] == [(x.route, x.logprobs) for x in b]


def test_rollout_routes_replay_and_truncate():
    env = grid_env(3)
    items = [(ep.instruction, env, *ep.start) for ep in episodes(env, 8)]
    for r in fol.rollout(CFG, params(5), items, mode="sample", rng=np.random.default_rng(0),
                         max_steps=3):
        assert len(r.actions) <= 3
        assert r.route.actions[-1] == STOP
        assert r.truncated == (r.actions[-1] != STOP)


def test_sampled_action_frequencies_match_softmax():
    env = grid_env(3)
    p = params(7)
    p["follower.act.b"][:] = [0.3, -0.2, 0.5, 0.1]
    instr = (5, 9, 2)
    probs = fol.action_distribution(CFG, p, instr, env, 4, 0)
    n = 10_000
    out = fol.rollout(CFG, p, [(instr, env, 4, 0)] * n, mode="sample",
                      rng=np.random.default_rng(0), max_steps=1)
    freq = np.bincount([r.actions[0] for r in out], minlength=N_ACTIONS) / n
    assert np.abs(freq - probs).max() < 0.02


def test_rollout_argument_checks():
    env = line_env(2)
    with pytest.raises(ValueError):
        fol.rollout(CFG, params(), [((5, 2), env, 0, 0)], mode="sample")
    with pytest.raises(ValueError):
        fol.rollout(CFG, params(), [((5, 2), env, 0, 0)], max_steps=0)
    with pytest.raises(ValueError):
        fol.beam_candidates(CFG, params(), (5, 2), env, 0, 0, width=0)


def test_beam_width_one_is_greedy():
    env = grid_env(3)
    for ep in episodes(env, 6, seed=3):
        g = fol.rollout(CFG, params(6), [(ep.instruction, env, *ep.start)])[0]
        b = fol.beam_candidates(CFG, params(6), ep.instruction, env, *ep.start, width=1)
        assert len(b) == 1
        assert b[0].route == g.route
        assert b[0].logprob == pytest.approx(g.logprob, abs=1e-5)


def _enumerate(p, instr, env, start, heading, max_steps):
    """Every action sequence of positive probability with its exact log-prob."""
    out = []

    def walk(node, hd, hist, lp):
        probs = fol.action_distribution(CFG, p, instr, env, start, heading, hist)
        for a in range(N_ACTIONS):
            if probs[a] == 0:
                continue
            seq, total = hist + [a], lp + np.log(probs[a])
            if a == STOP or len(seq) == max_steps:
                out.append((tuple(seq), total))
            else:
                n, h, _ = step(env, node, hd, a)
                walk(n, h, seq, total)

    walk(start, heading, [], 0.0)
    return out


def test_exhaustive_beam_matches_enumeration():
    env = line_env(3, tags=(None, "red", "blue"))
    p = params(8)
    instr = (5, 6, 2)
    seqs = _enumerate(p, instr, env, 0, EAST, 3)
    ranked = sorted(seqs, key=lambda s: -s[1])
    beam = fol.beam_candidates(CFG, p, instr, env, 0, EAST, len(seqs), max_steps=3)
    assert [tuple(b.actions) for b in beam] == [s[0] for s in ranked]
    assert np.allclose([b.logprob for b in beam], [s[1] for s in ranked], atol=1e-4)
    for width in (1, 3, 10):
        beam = fol.beam_candidates(CFG, p, instr, env, 0, EAST, width, max_steps=3)
        assert len(beam) <= width
        scores = [b.logprob for b in beam]
        assert scores == sorted(scores, reverse=True)
    assert tuple(beam[0].actions) == ranked[0][0]


@pytest.mark.parametrize("width", [2, 3, 5])
def test_beam_contains_greedy(width):
    env = grid_env(3)
    for ep in episodes(env, 5, seed=4):
        g = fol.rollout(CFG, params(9), [(ep.instruction, env, *ep.start)])[0]
        routes = [b.route for b in fol.beam_candidates(CFG, params(9), ep.instruction, env,
                                                       *ep.start, width)]
        assert g.route in routes


def test_pad_instructions():
    ids, lengths = fol.pad_instructions([(5, 2), (7, 8, 9, 2)])
    assert ids.shape == (2, 4)
    assert lengths.tolist() == [2, 4]
    assert ids[0, 2:].tolist() == [0, 0]


def test_all_action_sequences_counted():
    env = line_env(3, tags=(None, "red", "blue"))
    seqs = _enumerate(params(8), (5, 2), env, 0, EAST, 2)
    # forward is valid at the start and after one forward; turns keep it masked only when blocked
    assert len(seqs) == len(set(seqs))
    assert all(s[0][-1] == STOP or len(s[0]) == 2 for s in seqs)
    assert len([s for s in seqs if len(s[0]) == 1]) == 1
    assert len(seqs) == 1 + sum(1 for a, b in itertools.product(range(3), range(4))
                                if not (a in (1, 2) and b == FORWARD))
