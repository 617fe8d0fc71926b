"""Follower network generation.

Links point from follower to friend; content flows the other way. Humans
occupy node ids ``0..N-1`` and bots ``N..N+B-1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .table import atomic_write_text

SEED_CLIQUE = 4
MAX_RESAMPLE = 100


class InvalidParameter(ValueError):
    """Raised for out-of-range generator or wiring parameters."""


class RewiringInfeasible(RuntimeError):
    """Raised when no node has enough followers to donate one."""


class NodeKind(enum.IntEnum):
    HUMAN = 0
    BOT = 1


class Wiring(str, enum.Enum):
    RANDOM = "random"
    PREFERENTIAL = "preferential"


class Generator(str, enum.Enum):
    RANDOM_WALK = "rw"
    PREFERENTIAL_ATTACHMENT = "pa"
    UNDIRECTED_PA = "undirected-pa"


@dataclass(frozen=True)
class NetGenParams:
    n_humans: int = 10_000
    beta: float = 0.1
    k_out: int = 3
    p: float = 0.5
    gamma: float = 0.01
    wiring: Wiring = Wiring.RANDOM
    generator: Generator = Generator.RANDOM_WALK
    rewire_dead_ends: bool = False
    mean_degree: int = 20

    @property
    def n_bots(self) -> int:
        return int(round(self.beta * self.n_humans))


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable directed follower graph.

    ``out_adjacency[i]`` lists the friends of ``i`` in insertion order.
    """

    out_adjacency: tuple[tuple[int, ...], ...]
    kinds: np.ndarray = field(repr=False)
    n_humans: int = 0

    def __post_init__(self):
        self.kinds.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.out_adjacency)

    @property
    def n_bots(self) -> int:
        return self.n_nodes - self.n_humans

    @property
    def n_links(self) -> int:
        return sum(len(a) for a in self.out_adjacency)

    @cached_property
    def out_degree(self) -> np.ndarray:
        deg = np.fromiter((len(a) for a in self.out_adjacency), dtype=np.int64, count=self.n_nodes)
        deg.setflags(write=False)
        return deg

    @cached_property
    def in_degree(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for friends in self.out_adjacency:
            for j in friends:
                deg[j] += 1
        deg.setflags(write=False)
        return deg

    @cached_property
    def followers(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR arrays ``(indptr, indices)``; followers of ``j`` are sorted by id."""
        src, dst = self.edges()
        order = np.lexsort((src, dst))
        indices = src[order]
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=self.n_nodes), out=indptr[1:])
        indices.setflags(write=False)
        indptr.setflags(write=False)
        return indptr, indices

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(follower, friend)`` arrays in adjacency order."""
        src = np.repeat(np.arange(self.n_nodes, dtype=np.int64), self.out_degree)
        dst = np.fromiter(
            (j for friends in self.out_adjacency for j in friends), dtype=np.int64, count=len(src)
        )
        return src, dst

    def is_bot(self, node: int) -> bool:
        return bool(self.kinds[node] == NodeKind.BOT)

    def human_to_bot_links(self) -> int:
        n = self.n_humans
        return sum(1 for friends in self.out_adjacency[:n] for j in friends if j >= n)

    def validate(self) -> None:
        """Assert the structural invariants: no self-links, no duplicates."""
        for i, friends in enumerate(self.out_adjacency):
            if i in friends:
                raise AssertionError(f"self-link at node {i}")
            if len(set(friends)) != len(friends):
                raise AssertionError(f"duplicate link from node {i}")

    def write_edgelist(self, path: str | Path) -> None:
        lines = [f"# nodes={self.n_nodes} humans={self.n_humans} bots={self.n_bots}\n"]
        for i, friends in enumerate(self.out_adjacency):
            lines.extend(f"{i}\t{j}\n" for j in friends)
        atomic_write_text(path, "".join(lines))

    @classmethod
    def read_edgelist(cls, path: str | Path) -> "Network":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            fields = dict(tok.split("=") for tok in header.lstrip("#").split())
            total, humans = int(fields["nodes"]), int(fields["humans"])
            adj: list[list[int]] = [[] for _ in range(total)]
            for line in fh:
                a, b = line.split("\t")
                adj[int(a)].append(int(b))
        return from_lists(adj, n_humans=humans)


def from_lists(adj: Sequence[Sequence[int]], n_humans: int | None = None) -> Network:
    n = len(adj)
    if n_humans is None:
        n_humans = n
    kinds = np.full(n, NodeKind.HUMAN, dtype=np.int8)
    kinds[n_humans:] = NodeKind.BOT
    return Network(tuple(tuple(a) for a in adj), kinds, n_humans)


def _check_growth(n: int, k_out: int) -> None:
    if n < SEED_CLIQUE:
        raise InvalidParameter(f"need at least {SEED_CLIQUE} nodes, got n={n}")
    if not 1 <= k_out <= n - 1:
        raise InvalidParameter(f"k_out must lie in [1, n-1], got k_out={k_out}, n={n}")


def _seed_clique(k_out: int) -> list[list[int]]:
    # Larger k_out needs a larger clique so every later node can reach k_out friends.
    size = max(SEED_CLIQUE, k_out + 1)
    return [[j for j in range(size) if j != i] for i in range(size)]


def _uniform_new_target(i: int, chosen: set[int], rng: np.random.Generator) -> int:
    for _ in range(MAX_RESAMPLE):
        t = int(rng.integers(i))
        if t not in chosen:
            return t
    free = [t for t in range(i) if t not in chosen]
    return free[int(rng.integers(len(free)))]


def grow_rw_subnetwork(n: int, k_out: int, p: float, rng: np.random.Generator) -> Network:
    """Directed random-walk growth: follow a random node, then copy its friends.

    Each new node follows a uniformly random existing node ``j``; each of the
    remaining ``k_out - 1`` friends is, with probability ``p``, a random friend
    of ``j`` and otherwise a uniformly random existing node.
    """
    _check_growth(n, k_out)
    if not 0.0 <= p <= 1.0:
        raise InvalidParameter(f"p must lie in [0, 1], got {p}")
    adj = _seed_clique(k_out)
    for i in range(len(adj), n):
        j = int(rng.integers(i))
        friends = [j]
        chosen = {j}
        for _ in range(k_out - 1):
            if rng.random() < p:
                pool = [t for t in adj[j] if t not in chosen]
                t = pool[int(rng.integers(len(pool)))] if pool else _uniform_new_target(i, chosen, rng)
            else:
                t = _uniform_new_target(i, chosen, rng)
            friends.append(t)
            chosen.add(t)
        adj.append(friends)
    return from_lists(adj)


def grow_pa_subnetwork(n: int, k_out: int, rng: np.random.Generator) -> Network:
    """Directed preferential attachment; friends drawn with weight ``k_in + 1``."""
    _check_growth(n, k_out)
    adj = _seed_clique(k_out)
    # Each node appears once per follower plus once for the +1 smoothing.
    pool = list(range(len(adj)))
    for friends in adj:
        pool.extend(friends)
    for i in range(len(adj), n):
        chosen: list[int] = []
        for _ in range(k_out):
            for _ in range(MAX_RESAMPLE):
                t = pool[int(rng.integers(len(pool)))]
                if t not in chosen:
                    break
            else:
                t = _uniform_new_target(i, set(chosen), rng)
            chosen.append(t)
        adj.append(chosen)
        pool.extend(chosen)
        pool.append(i)
    return from_lists(adj)


def grow_undirected_pa(n: int, mean_degree: int, rng: np.random.Generator) -> Network:
    """Undirected Barabasi-Albert growth stored as reciprocal directed links.

    Starts from a clique on ``m + 1`` nodes with ``m = mean_degree / 2``; each
    new node attaches ``m`` edges with probability proportional to degree.
    """
    if mean_degree < 2 or mean_degree % 2:
        raise InvalidParameter(f"mean_degree must be even and >= 2, got {mean_degree}")
    m = mean_degree // 2
    if n <= m:
        raise InvalidParameter(f"need n > m = {m}, got n={n}")
    adj = [[j for j in range(m + 1) if j != i] for i in range(min(m + 1, n))]
    pool = [i for i, nbrs in enumerate(adj) for _ in nbrs]
    for i in range(len(adj), n):
        targets: list[int] = []
        while len(targets) < m:
            t = pool[int(rng.integers(len(pool)))]
            if t not in targets:
                targets.append(t)
        adj.append(list(targets))
        for t in targets:
            adj[t].append(i)
        pool.extend(targets)
        pool.extend([i] * m)
    return from_lists(adj)


def rewire_dead_ends(net: Network, rng: np.random.Generator) -> Network:
    """Give every follower-less node one follower taken from a popular node.

    For each node ``i`` with no followers, a node ``j`` with more than two
    followers is drawn at random and one of ``j``'s followers switches that
    link to ``i``. Degree sums are preserved.
    """
    n = net.n_nodes
    in_deg = net.in_degree.copy()
    if not (in_deg == 0).any():
        return net
    adj = [list(a) for a in net.out_adjacency]
    followers: list[list[int]] = [[] for _ in range(n)]
    for m, friends in enumerate(adj):
        for j in friends:
            followers[j].append(m)
    for i in range(n):
        if in_deg[i] > 0:
            continue
        donors = np.flatnonzero(in_deg > 2)
        if len(donors) == 0:
            raise RewiringInfeasible("no node with in-degree > 2 to rewire from")
        j = int(donors[rng.integers(len(donors))])
        pool = [m for m in followers[j] if m != i]
        m = pool[int(rng.integers(len(pool)))]
        adj[m][adj[m].index(j)] = i
        followers[j].remove(m)
        followers[i].append(m)
        in_deg[j] -= 1
        in_deg[i] += 1
    return from_lists(adj, n_humans=net.n_humans)


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise InvalidParameter(f"gamma must lie in [0, 1], got {gamma}")


def _with_cross_links(net: Network, targets: list[list[int]]) -> Network:
    adj = [list(a) for a in net.out_adjacency]
    for h, bots in enumerate(targets):
        adj[h].extend(sorted(bots))
    return Network(tuple(tuple(a) for a in adj), net.kinds.copy(), net.n_humans)


def infiltrate_random(net: Network, gamma: float, rng: np.random.Generator) -> Network:
    """Each human follows each bot independently with probability ``gamma``."""
    _check_gamma(gamma)
    n, b = net.n_humans, net.n_bots
    if b == 0 or gamma == 0.0:
        return net
    targets = [(np.flatnonzero(rng.random(b) < gamma) + n).tolist() for _ in range(n)]
    return _with_cross_links(net, targets)


def infiltrate_preferential(net: Network, gamma: float, rng: np.random.Generator) -> Network:
    """Each bot gains ``round(gamma*N)`` distinct human followers drawn by in-degree.

    Weights are the human in-degrees before any infiltration link is added.
    If no human has followers the draw falls back to uniform.
    """
    _check_gamma(gamma)
    n, b = net.n_humans, net.n_bots
    k = int(round(gamma * n))
    if k > n:
        raise InvalidParameter(f"round(gamma*N)={k} exceeds N={n}")
    if b == 0 or k == 0:
        return net
    weights = net.in_degree[:n].astype(np.float64)
    if k > np.count_nonzero(weights):
        # Not enough weighted humans for k distinct draws: everyone gets a floor weight.
        weights = weights + (1.0 if weights.sum() == 0 else 1e-9 * weights.sum())
    probs = weights / weights.sum()
    targets: list[list[int]] = [[] for _ in range(n)]
    for bot in range(n, n + b):
        picked = np.arange(n) if k == n else rng.choice(n, size=k, replace=False, p=probs)
        for h in picked:
            targets[int(h)].append(bot)
    return _with_cross_links(net, targets)


def _grow(generator: Generator, n: int, params: NetGenParams, rng: np.random.Generator) -> Network:
    if generator is Generator.RANDOM_WALK:
        return grow_rw_subnetwork(n, params.k_out, params.p, rng)
    if generator is Generator.PREFERENTIAL_ATTACHMENT:
        return grow_pa_subnetwork(n, params.k_out, rng)
    return grow_undirected_pa(n, params.mean_degree, rng)


def _small_subnetwork(n: int, params: NetGenParams, rng: np.random.Generator) -> Network:
    if params.generator is Generator.UNDIRECTED_PA:
        too_small = n <= params.mean_degree // 2
    else:
        too_small = n < max(SEED_CLIQUE, params.k_out + 1)
    if too_small:
        return from_lists([[j for j in range(n) if j != i] for i in range(n)])
    return _grow(params.generator, n, params, rng)


def build_network(params: NetGenParams, seed: np.random.SeedSequence | int) -> Network:
    """Generate human and bot subnetworks and wire infiltration.

    The seed is split into independent streams for the human subnetwork, the
    bot subnetwork and the infiltration links, so changing ``beta`` or the
    wiring strategy leaves the human subnetwork untouched.
    """
    if params.n_humans < 1:
        raise InvalidParameter("n_humans must be positive")
    if params.beta < 0:
        raise InvalidParameter("beta must be non-negative")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    human_ss, bot_ss, wire_ss = seed.spawn(3)
    human_rng = np.random.default_rng(human_ss)
    humans = _grow(params.generator, params.n_humans, params, human_rng)
    if params.rewire_dead_ends:
        humans = rewire_dead_ends(humans, human_rng)
    adj = [list(a) for a in humans.out_adjacency]
    b = params.n_bots
    if b:
        bot_rng = np.random.default_rng(bot_ss)
        bots = _small_subnetwork(b, params, bot_rng)
        if params.rewire_dead_ends and (bots.in_degree > 2).any():
            bots = rewire_dead_ends(bots, bot_rng)
        off = params.n_humans
        adj.extend([j + off for j in friends] for friends in bots.out_adjacency)
    net = from_lists(adj, n_humans=params.n_humans)
    wire_rng = np.random.default_rng(wire_ss)
    if params.wiring is Wiring.PREFERENTIAL:
        return infiltrate_preferential(net, params.gamma, wire_rng)
    return infiltrate_random(net, params.gamma, wire_rng)
