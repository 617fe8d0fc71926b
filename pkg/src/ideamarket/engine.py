"""Meme diffusion on a follower network with bounded reverse-chronological feeds."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import _kernel
from .netgen import InvalidParameter, NetGenParams, Network, NodeKind
from .table import write_csv

UNIFORMS_PER_STEP = 4

_standalone_ids = itertools.count()


def _check_phi(phi: float) -> None:
    if not phi >= 1.0:
        raise InvalidParameter(f"deception phi must be >= 1, got {phi}")


def sample_human_fitness(phi: float, rng: np.random.Generator, size=None):
    """Draw from density ``(1 + phi)(1 - f)^phi`` by inverse CDF."""
    _check_phi(phi)
    u = rng.random(size)
    return 1.0 - (1.0 - u) ** (1.0 / (phi + 1.0))


def sample_bot_fitness(phi: float, rng: np.random.Generator, size=None):
    """Draw from density ``(1 + 1/phi)(1 - f)^(1/phi)`` by inverse CDF."""
    _check_phi(phi)
    u = rng.random(size)
    return 1.0 - (1.0 - u) ** (phi / (phi + 1.0))


@dataclass(frozen=True)
class Meme:
    id: int
    quality: float
    fitness: float
    origin: NodeKind


@dataclass(frozen=True)
class Message:
    meme: Meme
    poster: int


class EmptyFeed(LookupError):
    pass


class Feed:
    """FIFO of at most ``capacity`` messages; pushing onto a full feed drops the oldest."""

    def __init__(self, capacity: int, entries=()):
        if capacity < 1:
            raise InvalidParameter("feed capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[Message] = deque(entries, maxlen=capacity)

    def push(self, message: Message) -> Message | None:
        evicted = self.entries[0] if len(self.entries) == self.capacity else None
        self.entries.append(message)
        return evicted

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Message]:
        return iter(self.entries)


def select_from_feed(feed: Feed, rng: np.random.Generator) -> Message:
    if not len(feed):
        raise EmptyFeed("cannot select from an empty feed")
    weights = np.array([m.meme.fitness for m in feed.entries])
    return feed.entries[_kernel.select_index(weights, rng.random())]


@dataclass(frozen=True)
class SteadyConfig:
    """Convergence test on window means; ``None`` sizes scale with node count.

    The alive-meme count is compared by relative change; average quality
    already lives on the unit interval and is compared by absolute change.
    """

    window: int | None = None
    rel_tol: float = 0.05
    consecutive: int = 3
    max_steps: int | None = None

    window_factor = 10
    max_steps_factor = 500

    def resolve(self, n_nodes: int) -> "SteadyConfig":
        window = self.window if self.window is not None else self.window_factor * n_nodes
        max_steps = self.max_steps if self.max_steps is not None else self.max_steps_factor * n_nodes
        if window < 1 or not 0 < self.rel_tol < 1 or self.consecutive < 1:
            raise InvalidParameter(f"invalid steady-state config {self}")
        return SteadyConfig(window, self.rel_tol, self.consecutive, max_steps)


@dataclass(frozen=True)
class SimParams:
    net: NetGenParams = field(default_factory=NetGenParams)
    mu: float = 0.75
    alpha: int = 15
    phi: float = 1.0
    steady: SteadyConfig = field(default_factory=SteadyConfig)
    measure_steps: int | None = None
    seed: int = 0

    measure_factor = 50

    def validate(self) -> None:
        if not 0.0 <= self.mu <= 1.0:
            raise InvalidParameter(f"mu must lie in [0, 1], got {self.mu}")
        if self.alpha < 1:
            raise InvalidParameter(f"alpha must be >= 1, got {self.alpha}")
        _check_phi(self.phi)

    def resolved_measure_steps(self, n_nodes: int) -> int:
        if self.measure_steps is not None:
            return self.measure_steps
        return self.measure_factor * n_nodes


@dataclass(frozen=True)
class StepEvent:
    agent: int
    meme: int
    created: bool
    n_followers: int


class SimState:
    """Feeds, meme registry and post counters for one run.

    Meme ids are dense indices into the registry arrays.
    """

    def __init__(self, network: Network, alpha: int):
        if alpha < 1:
            raise InvalidParameter(f"alpha must be >= 1, got {alpha}")
        self.network = network
        self.alpha = alpha
        n = network.n_nodes
        self.is_bot = np.ascontiguousarray(network.kinds, dtype=np.uint8)
        self.f_ptr, self.f_idx = network.followers
        self.feed_meme = np.zeros((n, alpha), dtype=np.int64)
        self.feed_poster = np.zeros((n, alpha), dtype=np.int64)
        self.feed_head = np.zeros(n, dtype=np.int64)
        self.feed_len = np.zeros(n, dtype=np.int64)
        self.counters = np.zeros(4, dtype=np.int64)
        self.hq_sum = np.zeros(1)
        self._alloc(1024)

    def _alloc(self, cap: int) -> None:
        self.meme_q = np.zeros(cap)
        self.meme_f = np.zeros(cap)
        self.meme_bot = np.zeros(cap, dtype=np.uint8)
        self.human_posts = np.zeros(cap, dtype=np.int64)
        self.bot_posts = np.zeros(cap, dtype=np.int64)
        self.feed_occ = np.zeros(cap, dtype=np.int64)
        self.human_feed_occ = np.zeros(cap, dtype=np.int64)
        self.human_exposures = np.zeros(cap, dtype=np.int64)

    _meme_arrays = (
        "meme_q", "meme_f", "meme_bot", "human_posts", "bot_posts",
        "feed_occ", "human_feed_occ", "human_exposures",
    )

    def reserve(self, extra: int) -> None:
        need = self.n_memes + extra
        cap = len(self.meme_q)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in self._meme_arrays:
            old = getattr(self, name)
            grown = np.zeros(new_cap, dtype=old.dtype)
            grown[:cap] = old
            setattr(self, name, grown)

    @property
    def n_memes(self) -> int:
        return int(self.counters[_kernel.N_MEMES])

    @property
    def step(self) -> int:
        return int(self.counters[_kernel.STEP])

    @property
    def alive_memes(self) -> int:
        return int(self.counters[_kernel.ALIVE])

    def meme(self, meme_id: int) -> Meme:
        if not 0 <= meme_id < self.n_memes:
            raise KeyError(meme_id)
        origin = NodeKind.BOT if self.meme_bot[meme_id] else NodeKind.HUMAN
        return Meme(meme_id, float(self.meme_q[meme_id]), float(self.meme_f[meme_id]), origin)

    def feed_ids(self, node: int) -> np.ndarray:
        """Meme ids in ``node``'s feed, oldest first."""
        cols = (self.feed_head[node] + np.arange(self.feed_len[node])) % self.alpha
        return self.feed_meme[node, cols]

    def feed(self, node: int) -> Feed:
        cols = (self.feed_head[node] + np.arange(self.feed_len[node])) % self.alpha
        msgs = [Message(self.meme(int(self.feed_meme[node, c])), int(self.feed_poster[node, c])) for c in cols]
        return Feed(self.alpha, msgs)

    def human_feed_entries(self) -> list[np.ndarray]:
        return [self.feed_ids(i) for i in range(self.network.n_humans)]

    def instantaneous_quality(self) -> float:
        entries = self.counters[_kernel.HUMAN_ENTRIES]
        return float(self.hq_sum[0] / entries) if entries else float("nan")

    def resync(self) -> None:
        """Recompute the running human-quality sum to shed float drift."""
        n = self.network.n_humans
        mask = np.arange(self.alpha)[None, :] < self.feed_len[:n, None]
        self.hq_sum[0] = float(self.meme_q[self.feed_meme[:n][mask]].sum())

    def run(self, uniforms: np.ndarray, mu: float, phi: float) -> tuple[np.ndarray, np.ndarray]:
        """Advance one step per row of ``uniforms``; returns (events, window stats)."""
        uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
        self.reserve(len(uniforms))
        events = np.zeros((len(uniforms), 3), dtype=np.int64)
        stats = np.zeros(3)
        _kernel.advance(
            uniforms, float(mu), float(phi), self.is_bot, self.f_ptr, self.f_idx,
            self.feed_meme, self.feed_poster, self.feed_head, self.feed_len,
            self.meme_q, self.meme_f, self.meme_bot, self.human_posts, self.bot_posts,
            self.feed_occ, self.human_feed_occ, self.human_exposures,
            self.counters, self.hq_sum, events, stats,
        )
        return events, stats


def make_meme(origin: NodeKind, phi: float, rng: np.random.Generator, state: SimState | None = None) -> Meme:
    """Create a meme; registered in ``state`` when given, else with a process-unique id."""
    if origin == NodeKind.BOT:
        f = float(sample_bot_fitness(phi, rng))
        q = 0.0
    else:
        f = float(sample_human_fitness(phi, rng))
        q = f
    if state is None:
        return Meme(next(_standalone_ids), q, f, NodeKind(origin))
    state.reserve(1)
    m = state.n_memes
    state.meme_q[m], state.meme_f[m] = q, f
    state.meme_bot[m] = origin == NodeKind.BOT
    state.counters[_kernel.N_MEMES] = m + 1
    return state.meme(m)


def step(state: SimState, mu: float, phi: float, rng: np.random.Generator) -> StepEvent:
    """Activate one uniformly random agent: post a new meme or repost from its feed."""
    events, _ = state.run(rng.random((1, UNIFORMS_PER_STEP)), mu, phi)
    agent, meme, created = (int(x) for x in events[0])
    n_followers = int(state.f_ptr[agent + 1] - state.f_ptr[agent])
    return StepEvent(agent, meme, bool(created), n_followers)


@dataclass(frozen=True)
class MemeLedger:
    """Per-meme record of memes observed in the human subnetwork.

    Post and exposure counts cover the measurement window only;
    ``feed_occurrences`` is the number of human-feed entries at the end.
    """

    meme_id: np.ndarray
    is_bot: np.ndarray
    quality: np.ndarray
    fitness: np.ndarray
    human_posts: np.ndarray
    bot_posts: np.ndarray
    feed_occurrences: np.ndarray
    human_exposures: np.ndarray

    def __len__(self) -> int:
        return len(self.meme_id)

    def select(self, mask: np.ndarray) -> "MemeLedger":
        return MemeLedger(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))

    def human_origin(self) -> "MemeLedger":
        return self.select(~self.is_bot)

    def equals(self, other: "MemeLedger") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.__dataclass_fields__)

    def write_csv(self, path: str | Path) -> Path:
        header = ["meme_id", "origin", "quality", "fitness", "human_posts", "bot_posts", "feed_occurrences_at_end"]
        rows = zip(
            self.meme_id.tolist(), ("bot" if b else "human" for b in self.is_bot.tolist()),
            self.quality.tolist(), self.fitness.tolist(), self.human_posts.tolist(),
            self.bot_posts.tolist(), self.feed_occurrences.tolist(),
        )
        return write_csv(path, header, rows)


@dataclass
class SimResult:
    state: SimState
    ledger: MemeLedger
    converged: bool
    steady_steps: int
    window_means: list[tuple[float, float]]


def _settled(a: tuple[float, float], b: tuple[float, float], tol: float) -> bool:
    alive_ok = abs(a[0] - b[0]) <= tol * max(abs(a[0]), abs(b[0]))
    return alive_ok and abs(a[1] - b[1]) <= tol


def run_to_steady_state(params: SimParams, network: Network, rng: np.random.Generator) -> SimResult:
    """Run until window means of alive-meme count and quality settle, then measure.

    Convergence requires ``consecutive`` successive window-to-window changes
    within ``rel_tol`` for both quantities; hitting ``max_steps`` ends the
    warm-up with ``converged=False``.
    """
    params.validate()
    cfg = params.steady.resolve(network.n_nodes)
    state = SimState(network, params.alpha)
    means: list[tuple[float, float]] = []
    converged = False
    while state.step < cfg.max_steps:
        n = min(cfg.window, cfg.max_steps - state.step)
        _, stats = state.run(rng.random((n, UNIFORMS_PER_STEP)), params.mu, params.phi)
        state.resync()
        q_mean = stats[_kernel.SUM_Q] / stats[_kernel.N_Q] if stats[_kernel.N_Q] else 0.0
        means.append((stats[_kernel.SUM_ALIVE] / n, q_mean))
        if len(means) > cfg.consecutive:
            recent = means[-cfg.consecutive - 1:]
            if all(_settled(a, b, cfg.rel_tol) for a, b in zip(recent, recent[1:])):
                converged = True
                break
    steady_steps = state.step

    before = {name: getattr(state, name)[: state.n_memes].copy() for name in _WINDOWED}
    remaining = params.resolved_measure_steps(network.n_nodes)
    while remaining > 0:
        n = min(cfg.window, remaining)
        state.run(rng.random((n, UNIFORMS_PER_STEP)), params.mu, params.phi)
        remaining -= n
    state.resync()
    return SimResult(state, _build_ledger(state, before), converged, steady_steps, means)


_WINDOWED = ("human_posts", "bot_posts", "human_exposures")


def _build_ledger(state: SimState, before: dict[str, np.ndarray]) -> MemeLedger:
    n = state.n_memes
    window = {}
    for name in _WINDOWED:
        counts = getattr(state, name)[:n].copy()
        counts[: len(before[name])] -= before[name]
        window[name] = counts
    occ = state.human_feed_occ[:n]
    observed = (window["human_posts"] > 0) | (window["human_exposures"] > 0) | (occ > 0)
    ids = np.flatnonzero(observed)
    is_bot = state.meme_bot[ids].astype(bool)
    quality = state.meme_q[ids]
    fitness = state.meme_f[ids].copy()
    if np.any(quality[is_bot] != 0.0) or np.any(quality[~is_bot] != fitness[~is_bot]):
        raise AssertionError("meme quality/fitness invariant violated")
    return MemeLedger(
        ids, is_bot, quality, fitness,
        window["human_posts"][ids], window["bot_posts"][ids], occ[ids].copy(),
        window["human_exposures"][ids],
    )
