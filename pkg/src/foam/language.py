"""Rule-based route annotator (the stand-in human), its inverse parser, and the vocabulary."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from foam.errors import DataError
from foam.world import (FORWARD, LEFT, RIGHT, STOP, TAG_NAMES, EnvironmentGraph, Route,
                        check_route, replay, step)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

N_STYLES = 3
TEMPLATES = {
    FORWARD: ("go forward", "walk ahead", "move straight"),
    LEFT: ("turn left", "go left", "rotate left"),
    RIGHT: ("turn right", "go right", "rotate right"),
    "landmark": ("past the {}", "by the {}", "near the {}"),
    STOP: ("stop at the {}", "wait at the {}", "halt at the {}"),
}
NO_TAG = "end"


def _words() -> list[str]:
    seen: list[str] = []
    for options in TEMPLATES.values():
        for t in options:
            for w in t.split():
                if w != "{}" and w not in seen:
                    seen.append(w)
    return seen + [NO_TAG] + list(TAG_NAMES)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(list(RESERVED) + _words())

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"tokens": list(self.tokens)}, fh, indent=1)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls(json.load(fh)["tokens"])


VOCAB = Vocabulary.default()


def _phrase(key, style: int, tag: "str | None" = None) -> list[str]:
    text = TEMPLATES[key][style % N_STYLES]
    return text.format(tag if tag is not None else NO_TAG).split()


def annotate_words(route: Route, env: EnvironmentGraph, style_seed: int = 0) -> list[str]:
    check_route(env, route)
    words: list[str] = []
    node, heading = route.start, route.start_heading
    for a in route.actions:
        if a == STOP:
            words += _phrase(STOP, style_seed, env.tags[node])
            break
        words += _phrase(a, style_seed)
        node, heading, _ = step(env, node, heading, a)
        if a == FORWARD and node != route.goal and env.tags[node] is not None:
            words += _phrase("landmark", style_seed, env.tags[node])
    return words


def annotate(route: Route, env: EnvironmentGraph, style_seed: int = 0,
             vocab: Vocabulary = VOCAB) -> tuple[int, ...]:
    """Token ids for ``route`` (EOS-terminated, no BOS)."""
    return tuple(vocab.encode(annotate_words(route, env, style_seed))) + (EOS,)


def _phrase_table() -> list[tuple[tuple[str, ...], object]]:
    table = []
    for key, options in TEMPLATES.items():
        for t in options:
            table.append((tuple(t.split()), key))
    # longest first so "go forward" is tried before any shorter prefix
    table.sort(key=lambda x: -len(x[0]))
    return table


_PHRASES = _phrase_table()


def oracle_parse(instruction: Sequence[int], env: EnvironmentGraph, start: int, heading: int,
                 vocab: Vocabulary = VOCAB) -> Route:
    """Invert :func:`annotate`; raises DataError on anything the grammar cannot produce."""
    ids = list(instruction)
    if ids and ids[-1] == EOS:
        ids = ids[:-1]
    if not ids:
        raise DataError("empty instruction")
    if any(i in (PAD, BOS, EOS, UNK) or not (0 <= i < len(vocab)) for i in ids):
        raise DataError("instruction contains reserved or out-of-range tokens")
    words = [vocab.tokens[i] for i in ids]
    env.check_node(start)
    node, h = start, heading
    actions: list[int] = []
    pos = 0
    while pos < len(words):
        for pattern, key in _PHRASES:
            n = len(pattern)
            chunk = words[pos:pos + n]
            if len(chunk) == n and all(p == "{}" or p == w for p, w in zip(pattern, chunk)):
                break
        else:
            raise DataError(f"unparseable tokens at position {pos}: {words[pos:pos + 3]}")
        if "{}" in pattern:
            tag = chunk[pattern.index("{}")]
            expected = env.tags[node] if env.tags[node] is not None else NO_TAG
            if tag != expected:
                raise DataError(f"instruction mentions {tag!r} but node {node} shows {expected!r}")
        pos += n
        if key == "landmark":
            continue
        actions.append(key)
        if key == STOP:
            if pos != len(words):
                raise DataError("tokens after the stop phrase")
            break
        node, h, ok = step(env, node, h, key)
        if not ok:
            raise DataError(f"instruction walks through a wall at node {node}")
    if not actions or actions[-1] != STOP:
        raise DataError("instruction has no stop phrase")
    nodes = replay(env, start, heading, actions)
    return Route(env.env_id, tuple(nodes), tuple(actions), heading)


@dataclass(frozen=True)
class LabeledExample:
    route: Route
    instruction: tuple
    style_seed: int

    def to_dict(self) -> dict:
        return {"env_id": self.route.env_id, "route": self.route.to_dict(),
                "instruction": list(self.instruction), "style_seed": self.style_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledExample":
        try:
            return cls(Route.from_dict(d["route"]), tuple(int(i) for i in d["instruction"]),
                       int(d["style_seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset record: {exc}") from None


def write_dataset(path, examples: Iterable[LabeledExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")


def read_dataset(path) -> list[LabeledExample]:
    with open(path) as fh:
        return [LabeledExample.from_dict(json.loads(line)) for line in fh if line.strip()]
