"""Directed acyclic graphs: validation, random families, enumeration,
and conversion to equivalence-class (CPDAG) form.

Adjacency convention throughout the package: `G[i, j] == 1` means the
directed edge i -> j exists.  Matrices are square 0/1 integer arrays with a
zero diagonal.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, CycleError, DataError
from .fileio import atomic_write_json, read_json

ENUMERATION_CAP = 5
COUNT_CAP = 8


def check_adjacency(G: np.ndarray) -> np.ndarray:
    """Validate an adjacency matrix and return it as an int array."""
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise DataError(f"adjacency matrix must be square, got shape {G.shape}")
    if not np.isin(G, (0, 1)).all():
        raise DataError("adjacency entries must be 0 or 1")
    G = G.astype(np.int64)
    if np.trace(G) != 0:
        raise DataError("adjacency diagonal must be zero (no self-loops)")
    return G


def is_acyclic(G: np.ndarray) -> bool:
    """True iff the directed graph has no cycle (Kahn peeling)."""
    G = check_adjacency(G)
    indeg = G.sum(axis=0)
    alive = np.ones(len(G), dtype=bool)
    while True:
        sources = alive & (indeg == 0)
        if not sources.any():
            return not alive.any()
        indeg = indeg - G[sources].sum(axis=0)
        alive &= ~sources


def topological_order(G: np.ndarray) -> np.ndarray:
    """Return node indices in a topological order (sources first).

    Raises CycleError naming an edge on a cycle when the graph is cyclic.
    """
    G = check_adjacency(G)
    d = len(G)
    indeg = G.sum(axis=0).astype(np.int64)
    order: list[int] = []
    alive = np.ones(d, dtype=bool)
    while len(order) < d:
        sources = np.flatnonzero(alive & (indeg == 0))
        if len(sources) == 0:
            i, j = _find_cycle_edge(G, alive)
            raise CycleError(f"graph contains a cycle through edge {i}->{j}")
        for s in sources:
            order.append(int(s))
            alive[s] = False
            indeg -= G[s]
    return np.array(order, dtype=np.int64)


def _find_cycle_edge(G: np.ndarray, alive: np.ndarray) -> tuple[int, int]:
    # every remaining node has an in-edge, so walking predecessors must loop
    start = int(np.flatnonzero(alive)[0])
    seen: list[int] = [start]
    node = start
    while True:
        pred = int(np.flatnonzero(G[:, node] & alive)[0])
        if pred in seen:
            return pred, node
        seen.append(pred)
        node = pred


@dataclass(frozen=True)
class GraphFamily:
    """A random-graph family specification.

    kind: "er" (pairwise-independent edges) or "sf" (preferential attachment).
    expected_edges: target expected edge count; for "sf" it is converted to
    the per-arrival attachment count m = round(expected_edges / d).
    """

    kind: str
    d: int
    expected_edges: float

    def __post_init__(self):
        if self.kind not in ("er", "sf"):
            raise ConfigError(f"unknown graph family kind {self.kind!r}")
        if self.d < 1:
            raise ConfigError("graph family needs d >= 1")
        if self.expected_edges < 0:
            raise ConfigError("expected_edges must be nonnegative")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "er":
            return sample_er_dag(self.d, self.expected_edges, rng)
        m = int(round(self.expected_edges / self.d))
        return sample_sf_dag(self.d, m, rng)


def sample_er_dag(d: int, expected_edges: float, rng: np.random.Generator) -> np.ndarray:
    """Sample a DAG with each unordered pair present independently.

    Pair probability is expected_edges / (d(d-1)/2); each draw orients all
    edges by one uniformly random permutation, low rank -> high rank.
    """
    n_pairs = d * (d - 1) // 2
    if d == 1:
        return np.zeros((1, 1), dtype=np.int64)
    if expected_edges > n_pairs:
        raise ConfigError(
            f"expected_edges={expected_edges} exceeds the {n_pairs} pairs available at d={d}"
        )
    q = expected_edges / n_pairs
    rank = np.empty(d, dtype=np.int64)
    rank[rng.permutation(d)] = np.arange(d)
    iu, ju = np.triu_indices(d, k=1)
    keep = rng.random(len(iu)) < q
    G = np.zeros((d, d), dtype=np.int64)
    for i, j in zip(iu[keep], ju[keep]):
        if rank[i] < rank[j]:
            G[i, j] = 1
        else:
            G[j, i] = 1
    return G


def sample_sf_dag(d: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Sample a scale-free DAG by preferential attachment.

    Nodes arrive in a uniformly random order; the first two are joined by one
    edge, and each later arrival attaches to min(m, #existing) distinct
    existing nodes with probability proportional to degree.  Edges are
    oriented from the arriving node to the existing one, which is acyclic by
    construction.
    """
    if d == 1:
        return np.zeros((1, 1), dtype=np.int64)
    if m >= d:
        raise ConfigError(f"attachment count m={m} must be smaller than d={d}")
    if m < 1:
        raise ConfigError(f"attachment count m={m} must be at least 1")
    arrival = rng.permutation(d)
    G = np.zeros((d, d), dtype=np.int64)
    G[arrival[1], arrival[0]] = 1
    # one list entry per unit of degree, networkx-style repeated-nodes trick
    degree_pool: list[int] = [int(arrival[0]), int(arrival[1])]
    for k in range(2, d):
        new = int(arrival[k])
        targets: set[int] = set()
        want = min(m, k)
        while len(targets) < want:
            targets.add(degree_pool[rng.integers(len(degree_pool))])
        for t in targets:
            G[new, t] = 1
            degree_pool.append(t)
        degree_pool.extend([new] * len(targets))
    return G


@lru_cache(maxsize=None)
def count_dags(d: int) -> int:
    """Number of labeled DAGs on d nodes (Robinson's recurrence), d <= 8."""
    if d > COUNT_CAP:
        raise ConfigError(f"count_dags supports d <= {COUNT_CAP}, got {d}")
    if d < 0:
        raise ConfigError("d must be nonnegative")
    if d == 0:
        return 1
    total = 0
    for k in range(1, d + 1):
        total += (-1) ** (k + 1) * math.comb(d, k) * 2 ** (k * (d - k)) * count_dags(d - k)
    return total


def enumerate_dags(d: int) -> list[np.ndarray]:
    """Every labeled DAG on d nodes exactly once, d <= 5.

    Construction: each DAG appears under at least one node ordering as a
    subgraph of the complete earlier->later graph, so iterate orderings x
    edge subsets and deduplicate.
    """
    if d > ENUMERATION_CAP:
        raise ConfigError(f"enumerate_dags supports d <= {ENUMERATION_CAP}, got {d}")
    if d < 1:
        raise ConfigError("d must be at least 1")
    pairs = list(itertools.combinations(range(d), 2))
    seen: set[bytes] = set()
    out: list[np.ndarray] = []
    for ordering in itertools.permutations(range(d)):
        for bits in range(2 ** len(pairs)):
            G = np.zeros((d, d), dtype=np.int64)
            for b, (a, c) in enumerate(pairs):
                if bits >> b & 1:
                    G[ordering[a], ordering[c]] = 1
            key = G.tobytes()
            if key not in seen:
                seen.add(key)
                out.append(G)
    return out


@dataclass(frozen=True)
class CpdagAdjacency:
    """Completed partially directed graph: compelled edges in `directed`
    (one-sided), reversible edges in `undirected` (symmetric)."""

    directed: np.ndarray
    undirected: np.ndarray

    def __post_init__(self):
        dd = np.asarray(self.directed)
        uu = np.asarray(self.undirected)
        if dd.shape != uu.shape or dd.ndim != 2 or dd.shape[0] != dd.shape[1]:
            raise DataError("CPDAG parts must be square matrices of equal shape")
        if (dd & dd.T).any():
            raise DataError("directed part contains a two-cycle")
        if not (uu == uu.T).all():
            raise DataError("undirected part must be symmetric")
        if (dd & (uu | uu.T)).any():
            raise DataError("an edge cannot be both compelled and reversible")

    @property
    def d(self) -> int:
        return self.directed.shape[0]

    def skeleton(self) -> np.ndarray:
        return ((self.directed + self.directed.T + self.undirected) > 0).astype(np.int64)


def to_cpdag(G: np.ndarray) -> CpdagAdjacency:
    """Convert a DAG to its equivalence-class representative.

    Orients the collider edges, then closes under the standard orientation
    propagation rules; everything left is reversible within the class.
    """
    G = check_adjacency(G)
    if not is_acyclic(G):
        raise CycleError("to_cpdag requires an acyclic input")
    d = len(G)
    skel = ((G + G.T) > 0).astype(np.int64)
    directed = np.zeros_like(G)
    for k in range(d):
        parents = np.flatnonzero(G[:, k])
        for i, j in itertools.combinations(parents, 2):
            if not skel[i, j]:
                directed[i, k] = 1
                directed[j, k] = 1
    undirected = skel.copy()
    sel = (directed + directed.T) > 0
    undirected[sel] = 0

    def orient(x: int, y: int) -> None:
        directed[x, y] = 1
        undirected[x, y] = 0
        undirected[y, x] = 0

    changed = True
    while changed:
        changed = False
        for a in range(d):
            for b in range(d):
                if not undirected[a, b]:
                    continue
                # a->b forced when some c->a exists with c, b nonadjacent
                if any(directed[c, a] and not skel[c, b] for c in range(d) if c != b):
                    orient(a, b)
                    changed = True
                    continue
                # a->b forced when a directed path a->c->b would otherwise
                # close a cycle on reversal
                if any(directed[a, c] and directed[c, b] for c in range(d)):
                    orient(a, b)
                    changed = True
                    continue
                # a->b forced by two nonadjacent compelled parents of b that
                # are reversible neighbours of a
                fired = False
                for c1, c2 in itertools.combinations(range(d), 2):
                    if (
                        undirected[a, c1]
                        and undirected[a, c2]
                        and directed[c1, b]
                        and directed[c2, b]
                        and not skel[c1, c2]
                    ):
                        orient(a, b)
                        changed = True
                        fired = True
                        break
                if fired:
                    continue
    return CpdagAdjacency(directed=directed, undirected=undirected)


def graph_to_dict(G: np.ndarray) -> dict:
    G = check_adjacency(G)
    return {"d": int(len(G)), "adjacency": G.astype(int).tolist()}


def graph_from_dict(obj: dict) -> np.ndarray:
    try:
        d = int(obj["d"])
        adj = obj["adjacency"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"graph object missing field: {exc}") from exc
    G = check_adjacency(np.asarray(adj))
    if len(G) != d:
        raise DataError(f"declared d={d} does not match adjacency shape {G.shape}")
    return G


def save_graph(path: str | Path, G: np.ndarray) -> None:
    atomic_write_json(path, graph_to_dict(G))


def load_graph(path: str | Path) -> np.ndarray:
    return graph_from_dict(read_json(path))
