"""World directory layout: environments, vocabulary, and labeled datasets per split."""
from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from foam.errors import DataError
from foam.language import VOCAB, LabeledExample, Vocabulary, annotate, read_dataset, write_dataset
from foam.world import (SPLITS, EnvironmentGraph, WorldConfig, check_route, generate_world,
                        read_world, sample_route, write_routes, write_world)
from foam.rng import stream

WORLD_FILE = "world.jsonl"
VOCAB_FILE = "vocab.json"


def dataset_file(split: str) -> str:
    return f"dataset_{split}.jsonl"


def routes_file(split: str) -> str:
    return f"routes_{split}.jsonl"


@dataclass
class Corpus:
    envs: dict
    examples: dict
    vocab: Vocabulary = field(default_factory=Vocabulary.default)

    def split_envs(self, split: str) -> list[EnvironmentGraph]:
        return [e for e in self.envs.values() if e.split == split]

    @property
    def feature_dim(self) -> int:
        return next(iter(self.envs.values())).feature_dim

    def env(self, env_id: str) -> EnvironmentGraph:
        try:
            return self.envs[env_id]
        except KeyError:
            raise DataError(f"unknown environment {env_id!r}") from None


def _env_examples(job) -> list[LabeledExample]:
    seed, env, routes_per_env, bounds, n_styles = job
    rng = stream(seed, f"routes.gold.{env.env_id}")
    out = []
    for _ in range(routes_per_env):
        route = sample_route(env, rng, bounds)
        for style in range(n_styles):
            out.append(LabeledExample(route, annotate(route, env, style), style))
    return out


def build_corpus(seed: int, counts, routes_per_env: int, cfg: WorldConfig = WorldConfig(),
                 bounds: tuple[int, int] = (3, 8), n_styles: int = 3, jobs: int = 1) -> Corpus:
    """Environments plus gold routes, each annotated once per paraphrase style."""
    envs = generate_world(seed, counts, cfg)
    jobs_in = [(seed, env, routes_per_env, bounds, n_styles) for env in envs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            per_env = list(ex.map(_env_examples, jobs_in))
    else:
        per_env = [_env_examples(j) for j in jobs_in]
    examples: dict[str, list] = {s: [] for s in SPLITS}
    for env, exs in zip(envs, per_env):
        examples[env.split] += exs
    return Corpus({e.env_id: e for e in envs}, examples, VOCAB)


def write_corpus(out: Path, corpus: Corpus) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / WORLD_FILE, out / VOCAB_FILE]
    write_world(written[0], corpus.envs.values())
    corpus.vocab.save(written[1])
    for split in SPLITS:
        exs = corpus.examples[split]
        write_dataset(out / dataset_file(split), exs)
        seen, routes = set(), []
        for ex in exs:
            if ex.route not in seen:
                seen.add(ex.route)
                routes.append(ex.route)
        write_routes(out / routes_file(split), routes)
        written += [out / dataset_file(split), out / routes_file(split)]
    return written


def load_corpus(path) -> Corpus:
    path = Path(path)
    if not (path / WORLD_FILE).exists():
        raise DataError(f"{path}: no {WORLD_FILE}")
    envs = {e.env_id: e for e in read_world(path / WORLD_FILE)}
    vocab = Vocabulary.load(path / VOCAB_FILE) if (path / VOCAB_FILE).exists() else VOCAB
    examples = {}
    for split in SPLITS:
        f = path / dataset_file(split)
        examples[split] = read_dataset(f) if f.exists() else []
        for ex in examples[split]:
            if ex.route.env_id not in envs:
                raise DataError(f"{f}: route in unknown environment {ex.route.env_id}")
            check_route(envs[ex.route.env_id], ex.route)
    return Corpus(envs, examples, vocab)


def file_hashes(path, names=None) -> dict[str, str]:
    path = Path(path)
    names = names or sorted(p.name for p in path.iterdir() if p.is_file())
    return {n: hashlib.sha256((path / n).read_bytes()).hexdigest() for n in names}
