"""Communication graph, closed neighborhoods and conflict-free update sets.

Nodes are numbered ``0..n-1``. The update set of an iteration is formed by the
voting procedure: every node draws a uniform number, votes for the smallest
draw in its closed neighborhood, and becomes a leader when its whole closed
neighborhood voted for it. Leaders chosen this way never share a neighbor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Protocol

import networkx as nx
import numpy as np


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph stored as sorted adjacency lists."""

    n: int
    adjacency: tuple[tuple[int, ...], ...]
    _closed: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        """Validate symmetry and absence of self-loops.

        Raises:
            ValueError: If the adjacency lists are inconsistent.
        """
        if self.n < 1:
            raise ValueError(f"graph needs at least one vertex, got n={self.n}")
        if len(self.adjacency) != self.n:
            raise ValueError(f"adjacency has {len(self.adjacency)} rows for n={self.n}")

        adjacency = tuple(tuple(sorted(set(row))) for row in self.adjacency)
        for i, row in enumerate(adjacency):
            for j in row:
                if not 0 <= j < self.n:
                    raise ValueError(f"vertex {i} lists out-of-range neighbor {j}")
                if j == i:
                    raise ValueError(f"self-loop at vertex {i}")
                if i not in adjacency[j]:
                    raise ValueError(f"edge ({i}, {j}) is not symmetric")

        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(
            self, "_closed", tuple(tuple(sorted(row + (i,))) for i, row in enumerate(adjacency))
        )

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Iterable[int]]) -> "Graph":
        """Build a graph from an undirected edge list.

        Args:
            n: Vertex count.
            edges: Pairs ``(i, j)`` with ``0 <= i, j < n``.

        Returns:
            Graph instance.

        Raises:
            ValueError: On self-loops, out-of-range ids or malformed pairs.
        """
        rows: list[set[int]] = [set() for _ in range(n)]
        for edge in edges:
            pair = tuple(int(v) for v in edge)
            if len(pair) != 2:
                raise ValueError(f"edge must have two endpoints, got {pair}")
            i, j = pair
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            rows[i].add(j)
            rows[j].add(i)
        return cls(n=n, adjacency=tuple(tuple(row) for row in rows))

    @classmethod
    def path(cls, n: int) -> "Graph":
        """Path ``0 - 1 - ... - n-1``."""
        return cls.from_edges(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def complete(cls, n: int) -> "Graph":
        """Complete graph on ``n`` vertices."""
        return cls.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])

    @classmethod
    def star(cls, n: int) -> "Graph":
        """Star with center 0 and leaves ``1..n-1``."""
        return cls.from_edges(n, [(0, j) for j in range(1, n)])

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Edge list with ``i < j``, sorted."""
        return [(i, j) for i, row in enumerate(self.adjacency) for j in row if i < j]

    @property
    def num_edges(self) -> int:
        return sum(len(row) for row in self.adjacency) // 2

    def neighbors(self, i: int) -> tuple[int, ...]:
        self._check_vertex(i)
        return self.adjacency[i]

    def closed(self, i: int) -> tuple[int, ...]:
        self._check_vertex(i)
        return self._closed[i]

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(self.edges)
        return graph

    def to_dict(self) -> dict:
        """Convert to the JSON ``graph`` block."""
        return {"n": self.n, "edges": [list(edge) for edge in self.edges]}

    @classmethod
    def from_dict(cls, data: dict) -> "Graph":
        """Restore a graph from the JSON ``graph`` block.

        Raises:
            ValueError: If required fields are missing or malformed.
        """
        try:
            return cls.from_edges(int(data["n"]), data.get("edges", []))
        except KeyError as e:
            raise ValueError(f"Missing required field in graph: {e}") from e
        except TypeError as e:
            raise ValueError(f"Malformed graph block: {e}") from e

    def _check_vertex(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"node id {i} out of range for n={self.n}")


def closed_neighborhood(g: Graph, i: int) -> tuple[int, ...]:
    """Return ``N_i ∪ {i}`` sorted ascending.

    Raises:
        IndexError: If ``i`` is not a vertex of ``g``.
    """
    return g.closed(i)


def random_connected_graph(
    n: int,
    rng: np.random.Generator,
    extra_edges: Optional[int] = None,
) -> Graph:
    """Sample a sparse connected graph.

    A uniform spanning tree is drawn from a random Prüfer sequence, then
    ``extra_edges`` (default ``ceil(n/4)``) distinct non-tree edges are added.

    Args:
        n: Vertex count.
        rng: Seeded generator; the result depends only on its state.
        extra_edges: Number of additional edges.

    Returns:
        Connected Graph.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if n == 1:
        return Graph.from_edges(1, [])
    if n == 2:
        return Graph.from_edges(2, [(0, 1)])

    sequence = [int(v) for v in rng.integers(0, n, size=n - 2)]
    tree = nx.from_prufer_sequence(sequence)
    edges = {tuple(sorted(edge)) for edge in tree.edges()}

    wanted = math.ceil(n / 4) if extra_edges is None else extra_edges
    candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in edges]
    if wanted > 0 and candidates:
        picks = rng.choice(len(candidates), size=min(wanted, len(candidates)), replace=False)
        edges.update(candidates[int(p)] for p in sorted(picks))

    return Graph.from_edges(n, sorted(edges))


@dataclass(frozen=True)
class UpdateSet:
    """Leaders of one iteration."""

    leaders: frozenset[int] = frozenset()

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.leaders))

    def __len__(self) -> int:
        return len(self.leaders)

    def __contains__(self, i: object) -> bool:
        return i in self.leaders

    @classmethod
    def of(cls, *leaders: int) -> "UpdateSet":
        return cls(frozenset(leaders))


def votes_from_draws(g: Graph, draws: np.ndarray) -> np.ndarray:
    """Return the vote cast by every node for the given draws.

    Each node votes for the smallest draw in its closed neighborhood; ties go
    to the smaller node id.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.shape != (g.n,):
        raise ValueError(f"expected {g.n} draws, got shape {draws.shape}")
    votes = np.empty(g.n, dtype=int)
    for i in range(g.n):
        scope = g.closed(i)
        votes[i] = scope[int(np.argmin(draws[list(scope)]))]
    return votes


def leaders_from_draws(g: Graph, draws: np.ndarray) -> UpdateSet:
    """Apply the voting rule to fixed draws."""
    votes = votes_from_draws(g, draws)
    leaders = [i for i in range(g.n) if all(votes[j] == i for j in g.closed(i))]
    return UpdateSet(frozenset(leaders))


def voting_select(g: Graph, rng: np.random.Generator) -> UpdateSet:
    """Form a conflict-free update set by one round of voting.

    Draws are taken from ``rng`` in node order, so a fixed seed reproduces the
    same sequence of update sets. The node with the globally smallest draw always
    wins, hence the result is never empty.
    """
    return leaders_from_draws(g, rng.random(g.n))


def verify_nonconflict(g: Graph, u: UpdateSet) -> bool:
    """True iff the closed neighborhoods of all leaders are pairwise disjoint."""
    seen: set[int] = set()
    for i in u:
        scope = set(g.closed(i))
        if seen & scope:
            return False
        seen |= scope
    return True


def voting_message_count(g: Graph) -> int:
    """Transmissions spent on one voting round.

    Every node sends its draw and then its vote to each neighbor.
    """
    return 4 * g.num_edges


class UpdateSetProvider(Protocol):
    """Anything that hands the engine one conflict-free update set per iteration."""

    def select(self) -> UpdateSet:
        """Return the next update set."""
        ...


class VotingSelector:
    """Update-set provider backed by the voting procedure and one seeded RNG."""

    def __init__(self, graph: Graph, seed: int = 0):
        self.graph = graph
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def select(self) -> UpdateSet:
        return voting_select(self.graph, self.rng)
