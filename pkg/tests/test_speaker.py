import numpy as np
import pytest

from foam import speaker as spk
from foam.errors import DataError
from foam.language import EOS, VOCAB, annotate
from foam.world import DropoutMask, sample_route
from conftest import grid_env, line_env
from checks import TOY_ROUTE, normalization_sums
from gradcheck import model_gradcheck

CFG = spk.SpeakerConfig(vocab_size=len(VOCAB), feature_dim=4, embed_dim=6, hidden_dim=8,
                        max_len=12)


def params(seed=0, cfg=CFG):
    return spk.init_params(cfg, np.random.default_rng(seed))


def items(env, n, seed=0, bounds=(2, 5)):
    rng = np.random.default_rng(seed)
    return [spk.RouteItem(env, sample_route(env, rng, bounds)) for _ in range(n)]


def test_param_shapes_and_names():
    p = params()
    assert all(k.startswith("speaker.") for k in p)
    assert p["speaker.route.w"].shape == (4 + 4 + 4, 6)
    assert p["speaker.out.w"].shape == (8, len(VOCAB))


def test_initial_loss_near_ln_vocab():
    cfg = spk.SpeakerConfig(vocab_size=40, feature_dim=4)
    env = grid_env(4)
    rng = np.random.default_rng(0)
    its = items(env, 16)
    ins = [tuple(rng.integers(4, 40, size=rng.integers(3, 10))) + (EOS,) for _ in its]
    losses = [spk.speaker_loss(cfg, spk.init_params(cfg, np.random.default_rng(s)), its, ins).item()
              for s in range(3)]
    assert abs(np.mean(losses) - np.log(40)) < 0.1


def test_perfect_prediction_gives_zero_loss():
    env = line_env(2)
    p = params()
    p["speaker.out.w"][:] = 0
    p["speaker.out.b"][:] = 0
    p["speaker.out.b"][EOS] = 200
    its = items(env, 2, bounds=(2, 2))
    assert spk.speaker_loss(CFG, p, its, [(EOS,), (EOS,)]).item() == pytest.approx(0, abs=1e-6)


def test_duplicated_batch_keeps_mean():
    env = grid_env(3)
    its = items(env, 4)
    ins = [annotate(it.route, env, k % 3) for k, it in enumerate(its)]
    a = spk.speaker_loss(CFG, params(), its, ins).item()
    b = spk.speaker_loss(CFG, params(), its + its, ins + ins).item()
    assert b == pytest.approx(a, rel=1e-5)


def test_loss_gradient():
    env = grid_env(3)
    its = items(env, 3, seed=1)
    its[1].mask = DropoutMask.sample(np.random.default_rng(2), 4, 0.6)
    ins = [annotate(it.route, env, k % 3) for k, it in enumerate(its)]
    err = model_gradcheck(lambda q, tape: spk.speaker_loss(CFG, q, its, ins, tape=tape),
                          params(5), np.random.default_rng(0))
    assert err < 1e-3


def test_greedy_is_deterministic_and_scores_consistently():
    env = grid_env(3)
    its = items(env, 5)
    p = params(1)
    a = spk.generate(CFG, p, its)
    b = spk.generate(CFG, p, its)
    assert [s.instruction for s in a] == [s.instruction for s in b]
    for s, it in zip(a, its):
        assert s.logprob == pytest.approx(float(np.sum(s.token_logprobs)), abs=1e-5)
        assert spk.score(CFG, p, env, it.route, s.instruction) == pytest.approx(s.logprob, abs=1e-5)
        assert s.instruction[-1] == EOS or len(s.instruction) == CFG.max_len


def test_low_temperature_sampling_equals_greedy():
    env = grid_env(3)
    its = items(env, 6)
    p = params(2)
    g = spk.generate(CFG, p, its)
    s = spk.generate(CFG, p, its, mode="sample", rng=np.random.default_rng(0), temperature=1e-4)
    assert [x.instruction for x in s] == [x.instruction for x in g]


def test_sampled_logprobs_rescore_exactly():
    env = grid_env(3)
    its = items(env, 20, seed=3)
    for k, it in enumerate(its):
        it.mask = DropoutMask.sample(np.random.default_rng(k), 4, 0.7)
    p = params(3)
    samples = spk.generate(CFG, p, its, mode="sample", rng=np.random.default_rng(1))
    rescored = spk.score_batch(CFG, p, its, [s.instruction for s in samples])
    assert np.allclose(rescored, [s.logprob for s in samples], atol=1e-5)


def test_uniform_single_step_sampling_frequencies():
    cfg = spk.SpeakerConfig(vocab_size=3, feature_dim=4, embed_dim=4, hidden_dim=5,
                            max_len=1, bos=0, eos=2, banned=())
    p = spk.init_params(cfg, np.random.default_rng(0))
    p["speaker.out.w"][:] = 0
    p["speaker.out.b"][:] = 1.0
    env = line_env(2)
    n = 10_000
    out = spk.generate(cfg, p, [spk.RouteItem(env, TOY_ROUTE)] * n, mode="sample",
                       rng=np.random.default_rng(0))
    freq = np.bincount([s.instruction[0] for s in out], minlength=3) / n
    assert np.abs(freq - 1 / 3).max() < 0.02


def test_scores_are_log_probabilities():
    env = grid_env(3)
    p = params(4)
    rng = np.random.default_rng(0)
    for it in items(env, 10):
        ins = tuple(rng.integers(4, len(VOCAB), size=5)) + (EOS,)
        assert spk.score(CFG, p, env, it.route, ins) <= 0.0


@pytest.mark.parametrize("vocab", [2, 3])
def test_distribution_normalizes(vocab):
    for seed in range(3):
        fixed, terminated = normalization_sums(vocab, seed)
        assert abs(fixed - 1.0) < 1e-4
        assert abs(terminated - 1.0) < 1e-4


def test_banned_tokens_never_generated():
    env = grid_env(3)
    its = items(env, 30)
    out = spk.generate(CFG, params(6), its, mode="sample", rng=np.random.default_rng(0))
    used = {t for s in out for t in s.instruction}
    assert not used & set(CFG.banned)


def test_bad_instructions_rejected():
    env = line_env(2)
    route = TOY_ROUTE
    with pytest.raises(DataError):
        spk.score(CFG, params(), env, route, ())
    with pytest.raises(DataError):
        spk.score(CFG, params(), env, route, (len(VOCAB),))
    with pytest.raises(ValueError):
        spk.speaker_loss(CFG, params(), [], [])
    with pytest.raises(ValueError):
        spk.generate(CFG, params(), [spk.RouteItem(env, route)], mode="sample")


def test_onehot_tokens_pads_with_eos():
    oh = spk.onehot_tokens([(5, 2), (7, 8, 2)], 10, eos=2)
    assert oh.shape == (3, 2, 10)
    assert oh[2, 0].argmax() == 2
    assert oh.sum() == 6
