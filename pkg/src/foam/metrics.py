"""Navigation metrics (SR, NE, SPL, nDTW, sDTW) and instruction metrics (BLEU, length histogram)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from foam.errors import DataError
from foam.world import EnvironmentGraph, Route, shortest_distance

DEFAULT_THRESHOLD = 1


@dataclass(frozen=True)
class EpisodeMetrics:
    success: int
    ne: float
    spl: float
    ndtw: float
    sdtw: float
    path_length: int = 0


def dtw(a: Sequence, b: Sequence, cost: Callable) -> float:
    """Classic DTW with steps (1,0), (0,1), (1,1)."""
    n, m = len(a), len(b)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = cost(a[i - 1], b[j - 1]) + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def episode_metrics(env: EnvironmentGraph, predicted: Route, reference: Route,
                    threshold: float = DEFAULT_THRESHOLD) -> EpisodeMetrics:
    if threshold <= 0:
        raise ValueError("threshold must be positive; it also scales nDTW")
    if predicted.env_id != env.env_id or reference.env_id != env.env_id:
        raise DataError(f"routes from {predicted.env_id}/{reference.env_id} evaluated in {env.env_id}")
    ne = shortest_distance(env, predicted.nodes[-1], reference.goal)
    success = int(ne <= threshold)
    L = shortest_distance(env, reference.start, reference.goal)
    P = len(predicted.nodes) - 1
    spl = success * (L / max(P, L) if max(P, L) > 0 else 1.0)
    d = dtw(predicted.nodes, reference.nodes, lambda u, v: env.dist[u, v])
    ndtw = math.exp(-d / (len(reference.nodes) * threshold))
    return EpisodeMetrics(success, float(ne), float(spl), ndtw, success * ndtw, P)


@dataclass
class EvalResult:
    split: str
    episodes: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.episodes)

    def mean(self, name: str) -> float:
        if not self.episodes:
            return 0.0
        return math.fsum(getattr(e, name) for e in self.episodes) / len(self.episodes)

    def summary(self) -> dict:
        return {
            "split": self.split, "episodes": self.count,
            "sr": round(100 * self.mean("success"), 1),
            "spl": round(100 * self.mean("spl"), 1),
            "ne": round(self.mean("ne"), 2),
            "ndtw": round(100 * self.mean("ndtw"), 1),
            "sdtw": round(100 * self.mean("sdtw"), 1),
        }

    def to_dict(self, extra: "list[dict] | None" = None) -> dict:
        eps = [asdict(e) for e in self.episodes]
        if extra:
            for e, x in zip(eps, extra):
                e.update(x)
        return {"summary": self.summary(), "episodes": eps}


# ---------------------------------------------------------------- BLEU

def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(refs: Sequence[Sequence], c: int) -> int:
    return min((len(r) for r in refs), key=lambda r: (abs(r - c), r))


def bleu_stats(references: Sequence[Sequence[Sequence]], hypotheses: Sequence[Sequence],
               max_n: int = 4) -> dict:
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    if not hypotheses:
        raise ValueError("empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for refs, hyp in zip(references, hypotheses):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp = list(hyp)
        c_len += len(hyp)
        r_len += _closest_ref_len(refs, len(hyp))
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(list(r), n)
            matched[n - 1] += sum(min(cnt, best[g]) for g, cnt in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matched": matched, "total": total, "hyp_len": c_len, "ref_len": r_len}


def corpus_bleu(references: Sequence[Sequence[Sequence]], hypotheses: Sequence[Sequence],
                max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100], uniform n-gram weights, brevity penalty.

    Without smoothing any zero n-gram precision gives 0; ``smooth`` adds one to
    numerator and denominator for n > 1.
    """
    st = bleu_stats(references, hypotheses, max_n)
    c, r = st["hyp_len"], st["ref_len"]
    if c == 0:
        return 0.0
    logs = []
    for n, (m, t) in enumerate(zip(st["matched"], st["total"]), start=1):
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(math.fsum(logs) / max_n)


# ---------------------------------------------------------------- length histogram

@dataclass
class LengthHistogram:
    bucket_width: int
    counts: dict

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.counts.items())


def length_histogram(references: Sequence[Sequence], hypotheses: Sequence[Sequence],
                     bucket_width: int = 1) -> LengthHistogram:
    """Histogram of len(reference) - len(hypothesis), bucketed by floor division."""
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    if bucket_width < 1:
        raise ValueError("bucket width must be >= 1")
    counts: Counter = Counter()
    for ref, hyp in zip(references, hypotheses):
        diff = len(ref) - len(hyp)
        counts[(diff // bucket_width) * bucket_width] += 1
    return LengthHistogram(bucket_width, dict(sorted(counts.items())))
