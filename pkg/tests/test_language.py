import numpy as np
import pytest

from foam.errors import DataError
from foam.language import (BOS, EOS, N_STYLES, PAD, UNK, VOCAB, LabeledExample, Vocabulary,
                           annotate, annotate_words, oracle_parse, read_dataset, write_dataset)
from foam.world import EAST, FORWARD, STOP, Route, WorldConfig, generate_world, sample_route
from conftest import line_env


@pytest.fixture(scope="module")
def world():
    return generate_world(11, (4, 2, 2), WorldConfig())


def test_vocabulary_layout():
    assert VOCAB.tokens[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert len(set(VOCAB.tokens)) == len(VOCAB) == 35
    assert VOCAB.decode(VOCAB.encode(["go", "forward"]) + [EOS, 5]) == ["go", "forward"]
    assert VOCAB.encode(["zebra"]) == [UNK]
    with pytest.raises(DataError):
        Vocabulary(["a", "b"])


def test_vocabulary_file_round_trip(tmp_path):
    VOCAB.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json") == VOCAB


def test_forward_then_stop():
    env = line_env(2, tags=(None, "red"))
    r = Route("line", (0, 1), (FORWARD, STOP), EAST)
    assert annotate_words(r, env) == "go forward stop at the red".split()
    assert annotate(r, env) == tuple(VOCAB.encode("go forward stop at the red".split())) + (EOS,)


def test_landmark_phrase_and_untagged_goal():
    env = line_env(3, tags=(None, "lamp", None))
    r = Route("line", (0, 1, 2), (FORWARD, FORWARD, STOP), EAST)
    assert " ".join(annotate_words(r, env, 1)) == "walk ahead by the lamp walk ahead wait at the end"


def test_annotation_is_deterministic(world):
    r = sample_route(world[0], 0)
    assert annotate(r, world[0], 2) == annotate(r, world[0], 2)
    assert annotate(r, world[0], 5) == annotate(r, world[0], 2)


def test_round_trip_over_sampled_routes(world):
    rng = np.random.default_rng(0)
    checked = 0
    for i in range(1000):
        env = world[i % len(world)]
        r = sample_route(env, rng, bounds=(2, 8))
        outs = {annotate(r, env, s) for s in range(N_STYLES)}
        assert len(outs) == N_STYLES
        for ins in outs:
            assert UNK not in ins
            assert oracle_parse(ins, env, r.start, r.start_heading) == r
            checked += 1
    assert checked == 3000


def test_annotation_length_monotone_in_route_length():
    env = line_env(6, tags=("red",) * 6)
    lengths = []
    for k in range(1, 6):
        r = Route("line", tuple(range(k + 1)), (FORWARD,) * k + (STOP,), EAST)
        lengths.append(len(annotate(r, env)))
    assert lengths == sorted(lengths)


def test_parse_rejects_bad_input():
    env = line_env(2, tags=(None, "red"))
    with pytest.raises(DataError, match="empty"):
        oracle_parse([], env, 0, EAST)
    with pytest.raises(DataError):
        oracle_parse([EOS], env, 0, EAST)
    good = annotate(Route("line", (0, 1), (FORWARD, STOP), EAST), env)
    with pytest.raises(DataError):
        oracle_parse((UNK,) + good, env, 0, EAST)
    with pytest.raises(DataError, match="wall"):
        oracle_parse(good, env, 0, 0)
    with pytest.raises(DataError, match="stop"):
        oracle_parse(VOCAB.encode(["go", "forward"]), env, 0, EAST)
    with pytest.raises(DataError, match="mentions"):
        oracle_parse(VOCAB.encode("go forward stop at the blue".split()), env, 0, EAST)


def test_annotate_invalid_route():
    env = line_env(2)
    with pytest.raises(DataError):
        annotate(Route("line", (0, 1), (FORWARD,), EAST), env)


def test_dataset_round_trip(tmp_path, world):
    env = world[0]
    exs = [LabeledExample(r, annotate(r, env, s), s)
           for r in (sample_route(env, k) for k in range(5)) for s in range(3)]
    write_dataset(tmp_path / "d.jsonl", exs)
    assert read_dataset(tmp_path / "d.jsonl") == exs
    (tmp_path / "bad.jsonl").write_text('{"route": {}}\n')
    with pytest.raises(DataError):
        read_dataset(tmp_path / "bad.jsonl")
