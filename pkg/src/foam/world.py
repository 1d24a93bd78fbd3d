"""Procedural grid-graph environments, routes, observations, and feature dropout."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from foam.errors import DataError
from foam.rng import stream

SPLITS = ("train", "val_seen", "val_unseen")

# headings, clockwise
NORTH, EAST, SOUTH, WEST = range(4)
HEADING_NAMES = ("N", "E", "S", "W")
_DELTA = {NORTH: (-1, 0), EAST: (0, 1), SOUTH: (1, 0), WEST: (0, -1)}

FORWARD, LEFT, RIGHT, STOP = range(4)
ACTION_NAMES = ("forward", "turn-left", "turn-right", "stop")
N_ACTIONS = 4

TAG_NAMES = ("red", "blue", "green", "yellow", "sofa", "lamp",
             "table", "plant", "door", "stairs", "sink", "bed")


@dataclass(frozen=True)
class WorldConfig:
    grid: int = 5
    feature_dim: int = 16
    n_tags: int = 12
    n_unseen_tags: int = 4
    tags_per_env: int = 3
    landmark_prob: float = 0.4
    extra_edge_prob: float = 0.35
    noise: float = 0.1


@dataclass(frozen=True, eq=False)
class EnvironmentGraph:
    env_id: str
    split: str
    grid: int
    positions: tuple
    tags: tuple
    features: np.ndarray
    edges: tuple
    neighbors: dict = field(init=False, repr=False)
    dist: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nbrs: dict[int, dict[int, int]] = {i: {} for i in range(len(self.positions))}
        for a, b in self.edges:
            for u, v in ((a, b), (b, a)):
                dr = self.positions[v][0] - self.positions[u][0]
                dc = self.positions[v][1] - self.positions[u][1]
                h = {d: k for k, d in _DELTA.items()}.get((dr, dc))
                if h is None:
                    raise DataError(f"{self.env_id}: edge {a}-{b} is not a grid move")
                nbrs[u][h] = v
        object.__setattr__(self, "neighbors", nbrs)
        object.__setattr__(self, "dist", _all_pairs_bfs(nbrs))
        if np.any(self.dist < 0):
            raise DataError(f"{self.env_id}: graph is not connected")

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degree(self, node: int) -> int:
        return len(self.neighbors[node])

    def check_node(self, node: int) -> None:
        if not (0 <= node < self.n_nodes):
            raise DataError(f"{self.env_id}: no node {node}")


def _all_pairs_bfs(nbrs: dict) -> np.ndarray:
    n = len(nbrs)
    dist = -np.ones((n, n), dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in nbrs[u].values():
                if dist[s, v] < 0:
                    dist[s, v] = dist[s, u] + 1
                    q.append(v)
    return dist


@dataclass(frozen=True)
class Route:
    env_id: str
    nodes: tuple
    actions: tuple
    start_heading: int

    @property
    def goal(self) -> int:
        return self.nodes[-1]

    @property
    def start(self) -> int:
        return self.nodes[0]

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    def to_dict(self) -> dict:
        return {"env_id": self.env_id, "nodes": list(self.nodes),
                "actions": [ACTION_NAMES[a] for a in self.actions],
                "start_heading": HEADING_NAMES[self.start_heading]}

    @classmethod
    def from_dict(cls, d: dict) -> "Route":
        try:
            return cls(d["env_id"], tuple(int(n) for n in d["nodes"]),
                       tuple(ACTION_NAMES.index(a) for a in d["actions"]),
                       HEADING_NAMES.index(d["start_heading"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed route record: {exc}") from None


@dataclass(frozen=True, eq=False)
class DropoutMask:
    keep: np.ndarray          # bool over feature dims
    keep_prob: float

    @classmethod
    def sample(cls, rng: np.random.Generator, dim: int, keep_prob: float) -> "DropoutMask":
        return cls(rng.random(dim) < keep_prob, float(keep_prob))

    @classmethod
    def identity(cls, dim: int) -> "DropoutMask":
        return cls(np.ones(dim, dtype=bool), 1.0)

    @property
    def kept(self) -> frozenset:
        return frozenset(np.flatnonzero(self.keep).tolist())

    def zero(self, x: np.ndarray) -> np.ndarray:
        """Zero dropped dims (idempotent)."""
        return np.where(self.keep, x, 0).astype(x.dtype)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Inverted dropout: zero dropped dims, scale kept ones by 1/keep_prob."""
        return (self.zero(x) / np.float32(self.keep_prob)).astype(np.float32)


# ---------------------------------------------------------------- generation

def _tag_vectors(seed: int, n_tags: int, dim: int) -> np.ndarray:
    rng = stream(seed, "world.tags")
    v = rng.normal(size=(n_tags, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def tag_split(seed: int, cfg: WorldConfig) -> tuple[tuple, tuple]:
    """(seen tags, unseen tags), a seeded partition of the tag vocabulary."""
    if not (1 <= cfg.n_unseen_tags < cfg.n_tags <= len(TAG_NAMES)):
        raise DataError(f"cannot split {cfg.n_tags} tags with {cfg.n_unseen_tags} unseen")
    order = stream(seed, "world.tagsplit").permutation(cfg.n_tags)
    names = [TAG_NAMES[i] for i in order]
    return tuple(sorted(names[cfg.n_unseen_tags:])), tuple(sorted(names[:cfg.n_unseen_tags]))


def _random_edges(rng: np.random.Generator, n: int, extra_p: float) -> list[tuple[int, int]]:
    cells = [(r, c) for r in range(n) for c in range(n)]
    all_edges = []
    for r, c in cells:
        if c + 1 < n:
            all_edges.append((r * n + c, r * n + c + 1))
        if r + 1 < n:
            all_edges.append((r * n + c, (r + 1) * n + c))
    # random spanning tree (Kruskal on shuffled edges), then sprinkle extra edges
    parent = list(range(n * n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen = set()
    for idx in rng.permutation(len(all_edges)):
        a, b = all_edges[idx]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            chosen.add((a, b))
    for e in all_edges:
        if e not in chosen and rng.random() < extra_p:
            chosen.add(e)
    return sorted(chosen)


def _features(rng, tags, degrees, tag_vecs, tag_index, dim, noise) -> np.ndarray:
    deg_vec = np.zeros(dim)
    deg_vec[-1] = 1.0
    feats = np.zeros((len(tags), dim))
    for i, (tag, deg) in enumerate(zip(tags, degrees)):
        base = tag_vecs[tag_index[tag]] if tag is not None else np.zeros(dim)
        feats[i] = base + deg_vec * (deg / 4.0) + noise * rng.normal(size=dim)
    return feats.astype(np.float32)


def generate_world(seed: int, counts: "dict[str, int] | Sequence[int]", cfg: WorldConfig = WorldConfig()
                   ) -> list[EnvironmentGraph]:
    if not isinstance(counts, dict):
        counts = dict(zip(SPLITS, counts))
    if set(counts) != set(SPLITS) or any(counts[s] < 1 for s in SPLITS):
        raise DataError(f"need at least one environment per split, got {counts}")
    if cfg.grid < 3:
        raise DataError(f"grid must be at least 3x3, got {cfg.grid}")
    seen, unseen = tag_split(seed, cfg)
    pools = {"train": seen, "val_seen": seen, "val_unseen": unseen}
    for split in SPLITS:
        pool = pools[split]
        if cfg.tags_per_env > len(pool):
            raise DataError(f"{split}: {cfg.tags_per_env} tags per env but only {len(pool)} allowed")
        n_combos = len(list(combinations(pool, cfg.tags_per_env)))
        if counts[split] > n_combos:
            raise DataError(f"{split}: {counts[split]} environments requested but only "
                            f"{n_combos} distinct tag combinations exist")
    tag_vecs = _tag_vectors(seed, len(TAG_NAMES), cfg.feature_dim)
    tag_index = {t: i for i, t in enumerate(TAG_NAMES)}
    envs = []
    for split in SPLITS:
        rng = stream(seed, f"world.{split}")
        combos = list(combinations(pools[split], cfg.tags_per_env))
        picks = rng.choice(len(combos), size=counts[split], replace=False)
        for k, ci in enumerate(picks):
            combo = combos[ci]
            n = cfg.grid
            edges = _random_edges(rng, n, cfg.extra_edge_prob)
            deg = np.zeros(n * n, dtype=int)
            for a, b in edges:
                deg[a] += 1
                deg[b] += 1
            tags = tuple(combo[rng.integers(len(combo))] if rng.random() < cfg.landmark_prob else None
                         for _ in range(n * n))
            feats = _features(rng, tags, deg, tag_vecs, tag_index, cfg.feature_dim, cfg.noise)
            envs.append(EnvironmentGraph(
                env_id=f"{split}-{k:03d}", split=split, grid=n,
                positions=tuple((i // n, i % n) for i in range(n * n)),
                tags=tags, features=feats, edges=tuple(edges)))
    return envs


# ---------------------------------------------------------------- movement

def step(env: EnvironmentGraph, node: int, heading: int, action: int) -> tuple[int, int, bool]:
    """Apply one action; returns (node, heading, valid).  Invalid forward is a no-op."""
    if action == FORWARD:
        nxt = env.neighbors[node].get(heading)
        return (node, heading, False) if nxt is None else (nxt, heading, True)
    if action == LEFT:
        return node, (heading - 1) % 4, True
    if action == RIGHT:
        return node, (heading + 1) % 4, True
    return node, heading, True


def valid_actions(env: EnvironmentGraph, node: int, heading: int) -> np.ndarray:
    ok = np.ones(N_ACTIONS, dtype=bool)
    ok[FORWARD] = heading in env.neighbors[node]
    return ok


def replay(env: EnvironmentGraph, start: int, heading: int, actions: Iterable[int]) -> list[int]:
    """Node sequence visited by an action sequence; raises on an invalid forward."""
    nodes = [start]
    node = start
    for a in actions:
        node, heading, ok = step(env, node, heading, a)
        if not ok:
            raise DataError(f"{env.env_id}: invalid forward at node {node}")
        if a == FORWARD:
            nodes.append(node)
        if a == STOP:
            break
    return nodes


def next_hop(env: EnvironmentGraph, node: int, goal: int) -> int:
    d = env.dist[node, goal]
    return min(v for v in env.neighbors[node].values() if env.dist[v, goal] == d - 1)


def teacher_action(env: EnvironmentGraph, node: int, heading: int, goal: int) -> int:
    """Next action along the canonical shortest path to ``goal``."""
    if node == goal:
        return STOP
    v = next_hop(env, node, goal)
    want = next(h for h, u in env.neighbors[node].items() if u == v)
    diff = (want - heading) % 4
    return FORWARD if diff == 0 else LEFT if diff == 3 else RIGHT


def shortest_route(env: EnvironmentGraph, start: int, goal: int, heading: int) -> Route:
    actions, nodes = [], [start]
    node, h0 = start, heading
    for _ in range(4 * env.n_nodes + 4):
        a = teacher_action(env, node, heading, goal)
        actions.append(a)
        if a == STOP:
            break
        node, heading, _ = step(env, node, heading, a)
        if a == FORWARD:
            nodes.append(node)
    return Route(env.env_id, tuple(nodes), tuple(actions), h0)


def sample_route(env: EnvironmentGraph, rng: "np.random.Generator | int",
                 bounds: tuple[int, int] = (3, 8), attempts: int = 1000) -> Route:
    """Shortest route between two uniformly drawn distinct nodes.

    ``bounds`` limit the node count of the route (inclusive).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    lo, hi = bounds
    n = env.n_nodes
    for _ in range(attempts if n >= 2 else 0):
        a, b = rng.choice(n, size=2, replace=False)
        if lo <= env.dist[a, b] + 1 <= hi:
            heading = int(rng.integers(4))
            return shortest_route(env, int(a), int(b), heading)
    raise DataError(f"{env.env_id}: no node pair with route length in {bounds} "
                    f"after {attempts} attempts")


def shortest_distance(env: EnvironmentGraph, a: int, b: int) -> int:
    env.check_node(a)
    env.check_node(b)
    d = int(env.dist[a, b])
    if d < 0:
        raise DataError(f"{env.env_id}: nodes {a} and {b} are disconnected")
    return d


def check_route(env: EnvironmentGraph, route: Route, max_nodes: "int | None" = None) -> None:
    if route.env_id != env.env_id:
        raise DataError(f"route belongs to {route.env_id}, not {env.env_id}")
    for n in route.nodes:
        env.check_node(n)
    if not route.actions or route.actions[-1] != STOP or STOP in route.actions[:-1]:
        raise DataError("route action sequence must end with a single stop")
    if replay(env, route.start, route.start_heading, route.actions) != list(route.nodes):
        raise DataError("route actions do not replay to its node sequence")
    if max_nodes is not None and len(route.nodes) > max_nodes:
        raise DataError(f"route has {len(route.nodes)} nodes, limit {max_nodes}")


# ---------------------------------------------------------------- observations

def obs_dim(feature_dim: int) -> int:
    return feature_dim + 4


def observe(env: EnvironmentGraph, node: int, heading: int,
            mask: "DropoutMask | None" = None) -> np.ndarray:
    env.check_node(node)
    f = env.features[node]
    if mask is not None:
        f = mask.apply(f)
    out = np.zeros(env.feature_dim + 4, dtype=np.float32)
    out[:env.feature_dim] = f
    out[env.feature_dim + heading] = 1.0
    return out


def route_states(env: EnvironmentGraph, route: Route) -> list[tuple[int, int]]:
    """(node, heading) before each action of the route."""
    states = []
    node, heading = route.start, route.start_heading
    for a in route.actions:
        states.append((node, heading))
        node, heading, _ = step(env, node, heading, a)
    return states


# ---------------------------------------------------------------- files

def env_to_record(env: EnvironmentGraph) -> dict:
    return {
        "env_id": env.env_id, "split": env.split, "grid": env.grid,
        "nodes": [{"id": i, "pos": list(env.positions[i]), "tag": env.tags[i],
                   "features": [float(x) for x in env.features[i]]}
                  for i in range(env.n_nodes)],
        "edges": [list(e) for e in env.edges],
    }


def env_from_record(rec: dict) -> EnvironmentGraph:
    try:
        nodes = sorted(rec["nodes"], key=lambda n: n["id"])
        return EnvironmentGraph(
            env_id=rec["env_id"], split=rec["split"], grid=int(rec["grid"]),
            positions=tuple(tuple(n["pos"]) for n in nodes),
            tags=tuple(n["tag"] for n in nodes),
            features=np.asarray([n["features"] for n in nodes], dtype=np.float32),
            edges=tuple(tuple(e) for e in rec["edges"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed environment record: {exc}") from None


def write_world(path, envs: Iterable[EnvironmentGraph]) -> None:
    with open(path, "w") as fh:
        for env in envs:
            fh.write(json.dumps(env_to_record(env), sort_keys=True) + "\n")


def read_world(path) -> list[EnvironmentGraph]:
    with open(path) as fh:
        return [env_from_record(json.loads(line)) for line in fh if line.strip()]


def write_routes(path, routes: Iterable[Route]) -> None:
    with open(path, "w") as fh:
        for r in routes:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_routes(path) -> list[Route]:
    with open(path) as fh:
        return [Route.from_dict(json.loads(line)) for line in fh if line.strip()]
