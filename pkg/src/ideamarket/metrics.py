"""Ecosystem health metrics and popularity/amplification statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import _kernel
from .engine import MemeLedger, SimResult

NAN = float("nan")
BINS_PER_DECADE = 10
# Fixed integer bin edges 1, 2, ..., shared by every run so histograms can be pooled.
POPULARITY_EDGES = np.unique(np.floor(10 ** (np.arange(0, 8 * BINS_PER_DECADE + 1) / BINS_PER_DECADE))).astype(np.int64)


def average_quality(feed_qualities: Iterable[Sequence[float]]) -> float:
    """Mean quality over every entry of every human feed.

    At steady state each feed holds ``alpha`` entries and this is the sum over
    feeds divided by ``alpha * N``; partially filled feeds are normalized by
    their actual entry count.
    """
    total = 0.0
    count = 0
    for q in feed_qualities:
        q = np.asarray(q, dtype=np.float64)
        total += float(q.sum())
        count += q.size
    return total / count if count else NAN


def diversity(feed_memes: Iterable[Sequence[int]]) -> float:
    """Shannon entropy (nats) of the meme distribution over all feed entries."""
    arrays = [np.asarray(f, dtype=np.int64) for f in feed_memes]
    entries = np.concatenate(arrays) if arrays else np.empty(0, dtype=np.int64)
    if entries.size == 0:
        return NAN
    _, counts = np.unique(entries, return_counts=True)
    p = counts / entries.size
    return float(max(0.0, -(p * np.log(p)).sum()))


def _tie_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau_b(quality: Sequence[float], popularity: Sequence[float]) -> float:
    """Kendall tau-b between two paired samples, in O(n log n).

    Pairs tied in both variables count toward neither tie term. Returns NaN
    when fewer than two items or when either variable is constant.
    """
    x = np.asarray(quality, dtype=np.float64)
    y = np.asarray(popularity, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("quality and popularity must have equal length")
    n = x.size
    if n < 2:
        return NAN
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    total = n * (n - 1) // 2
    ties_x = _tie_pairs(x)
    ties_y = _tie_pairs(y)
    _, joint_counts = np.unique(np.stack([x, y], axis=1), axis=0, return_counts=True)
    joint = int((joint_counts * (joint_counts - 1) // 2).sum())
    # y is sorted within each x-tie group, so inversions are exactly the discordant pairs.
    _, y_rank = np.unique(y, return_inverse=True)
    discordant = int(_kernel.count_inversions(y_rank.astype(np.int64)))
    concordant = total - ties_x - ties_y + joint - discordant
    return _tau_from_counts(concordant, discordant, ties_x - joint, ties_y - joint)


def _tau_from_counts(nc: int, nd: int, nt_q: int, nt_p: int) -> float:
    denom = (nc + nd + nt_q) * (nc + nd + nt_p)
    if denom == 0:
        return NAN
    return (nc - nd) / math.sqrt(denom)


def gini_hub_concentration(in_degree: Sequence[int], low_quality_counts: Sequence[float]) -> float:
    """Concentration of low-quality feed entries among high in-degree nodes.

    Nodes are ordered by in-degree (ties by position) and the cumulative share
    of low-quality entries is traced against the cumulative share of nodes;
    the result is ``1 - 2 * area`` under that curve. Zero means an even
    spread; positive values mean the entries pile up on the hubs.
    """
    deg = np.asarray(in_degree)
    counts = np.asarray(low_quality_counts, dtype=np.float64)
    n = deg.size
    if n < 2:
        raise ValueError("need at least two nodes")
    total = counts.sum()
    if total <= 0:
        return NAN
    order = np.lexsort((np.arange(n), deg))
    curve = np.concatenate(([0.0], np.cumsum(counts[order]) / total))
    area = float(((curve[:-1] + curve[1:]) / 2).sum() / n)
    return 1.0 - 2.0 * area


@dataclass(frozen=True)
class PopularityCCDF:
    """CCDFs of post counts on log bins for q=0 and q>0 memes.

    ``ccdf_*[k]`` is the fraction of memes with popularity >= ``edges[k]``.
    """

    edges: np.ndarray
    ccdf_low: np.ndarray
    ccdf_high: np.ndarray
    low: np.ndarray = field(repr=False)
    high: np.ndarray = field(repr=False)

    @property
    def low_empty(self) -> bool:
        return self.low.size == 0

    @property
    def high_empty(self) -> bool:
        return self.high.size == 0


def histogram(popularity: np.ndarray) -> np.ndarray:
    """Counts per fixed log bin ``[edge_k, edge_{k+1})``."""
    idx = np.searchsorted(POPULARITY_EDGES, popularity, side="right") - 1
    return np.bincount(idx[idx >= 0], minlength=len(POPULARITY_EDGES))


def ccdf_from_histogram(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return np.zeros(0)
    tail = np.cumsum(counts[::-1])[::-1] / total
    last = np.flatnonzero(counts)[-1]
    return tail[: last + 1]


def popularity_samples(ledger: MemeLedger) -> tuple[np.ndarray, np.ndarray]:
    """Post counts (humans and bots) of memes that reached a human feed, split q=0 / q>0."""
    spreading = ledger.human_exposures >= 1
    posts = ledger.human_posts + ledger.bot_posts
    low = posts[spreading & (ledger.quality == 0)]
    high = posts[spreading & (ledger.quality > 0)]
    return low, high


def popularity_distribution(ledger: MemeLedger) -> PopularityCCDF:
    if len(ledger) == 0:
        raise ValueError("empty ledger")
    low, high = popularity_samples(ledger)
    c_low = ccdf_from_histogram(histogram(low))
    c_high = ccdf_from_histogram(histogram(high))
    k = max(len(c_low), len(c_high))
    return PopularityCCDF(
        POPULARITY_EDGES[:k],
        np.pad(c_low, (0, k - len(c_low))),
        np.pad(c_high, (0, k - len(c_high))),
        low,
        high,
    )


def top_fraction_mean(values: np.ndarray, fraction: float = 0.1) -> float:
    if values.size == 0:
        return NAN
    k = max(1, int(math.ceil(fraction * values.size)))
    return float(np.sort(values)[-k:].mean())


@dataclass(frozen=True)
class AmplificationFit:
    """Per-bin and aggregate exponents of ``V_h = V_b ** eta``.

    A bin's bot volume is the mean ``V_b`` of its memes, so a ledger with
    ``V_h == V_b`` gives exactly 1 everywhere.
    """

    bin_index: np.ndarray
    bin_count: np.ndarray
    bin_sum_vb: np.ndarray
    bin_sum_vh: np.ndarray
    eta_hat: float

    @property
    def bin_vb(self) -> np.ndarray:
        return self.bin_sum_vb / self.bin_count

    @property
    def bin_vh(self) -> np.ndarray:
        return self.bin_sum_vh / self.bin_count

    @property
    def eta_bins(self) -> np.ndarray:
        return np.log(self.bin_vh) / np.log(self.bin_vb)


def amplification_bins(vb: np.ndarray, vh: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Log bins of bot volume: (bin index, count, sum V_b, sum V_h)."""
    if vb.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    idx = np.floor(BINS_PER_DECADE * np.log10(vb)).astype(np.int64)
    uniq, inv = np.unique(idx, return_inverse=True)
    count = np.bincount(inv).astype(np.int64)
    return uniq, count, np.bincount(inv, weights=vb), np.bincount(inv, weights=vh)


def amplification_exponent(ledger: MemeLedger) -> AmplificationFit:
    """Fit human volume against bot volume for low-quality memes.

    Uses memes with ``V_b >= 2`` and ``V_h >= 1``. The aggregate exponent is
    the least-squares slope of ``log V_h`` on ``log V_b`` through the origin,
    since the power law carries no prefactor. Fewer than two occupied bins
    leave it NaN.
    """
    usable = (ledger.quality == 0) & (ledger.bot_posts >= 2) & (ledger.human_posts >= 1)
    vb = ledger.bot_posts[usable].astype(np.float64)
    vh = ledger.human_posts[usable].astype(np.float64)
    bins = amplification_bins(vb, vh)
    eta_hat = NAN
    if len(bins[0]) >= 2:
        lb, lh = np.log(vb), np.log(vh)
        eta_hat = float((lb * lh).sum() / (lb * lb).sum())
    return AmplificationFit(*bins, eta_hat)


@dataclass
class MetricsReport:
    Q: float
    D: float
    tau: float
    gini_hub: float
    eta: float
    n_memes: int
    converged: bool = True
    # per-run inputs for pooled popularity and amplification tables
    ks_popularity: float = NAN
    top_decile_low: float = NAN
    top_decile_high: float = NAN
    hist_low: list[int] = field(default_factory=list)
    hist_high: list[int] = field(default_factory=list)
    amp_bins: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _trim(counts: np.ndarray) -> list[int]:
    nz = np.flatnonzero(counts)
    return counts[: nz[-1] + 1].tolist() if nz.size else []


def evaluate(result: SimResult) -> MetricsReport:
    """Compute every per-run metric from the end-of-measurement snapshot."""
    state, ledger = result.state, result.ledger
    feeds = state.human_feed_entries()
    q = state.meme_q
    n_humans = state.network.n_humans
    human = ledger.human_origin()
    low_counts = np.array([int((q[f] == 0).sum()) for f in feeds])
    gini = gini_hub_concentration(state.network.in_degree[:n_humans], low_counts) if n_humans >= 2 else NAN
    amp = amplification_exponent(ledger)
    low, high = popularity_samples(ledger)
    ks = float(stats.ks_2samp(low, high).statistic) if low.size and high.size else NAN
    return MetricsReport(
        Q=average_quality(q[f] for f in feeds),
        D=diversity(feeds),
        tau=kendall_tau_b(human.quality, human.human_posts),
        gini_hub=gini,
        eta=amp.eta_hat,
        n_memes=len(ledger),
        converged=result.converged,
        ks_popularity=ks,
        top_decile_low=top_fraction_mean(low),
        top_decile_high=top_fraction_mean(high),
        hist_low=_trim(histogram(low)),
        hist_high=_trim(histogram(high)),
        amp_bins=[
            [int(i), int(c), float(b), float(h)]
            for i, c, b, h in zip(amp.bin_index, amp.bin_count, amp.bin_sum_vb, amp.bin_sum_vh)
        ],
    )
