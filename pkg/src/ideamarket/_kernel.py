"""Compiled inner loop of the diffusion dynamics.

Feeds are ring buffers stored row-wise in ``feed_meme``: entry ``k`` (0 is the
oldest) of node ``i`` lives at column ``(feed_head[i] + k) % alpha``.
Each step consumes one row of four uniforms: agent, post-or-repost, new-meme
fitness, feed selection.
"""

import numpy as np
from numba import njit

# counters layout
N_MEMES, ALIVE, HUMAN_ENTRIES, STEP = 0, 1, 2, 3
# stats layout
SUM_ALIVE, SUM_Q, N_Q = 0, 1, 2


@njit(cache=True)
def human_fitness(u, phi):
    return 1.0 - (1.0 - u) ** (1.0 / (phi + 1.0))


@njit(cache=True)
def bot_fitness(u, phi):
    return 1.0 - (1.0 - u) ** (phi / (phi + 1.0))


@njit(cache=True)
def select_index(weights, u):
    """Index drawn with probability proportional to ``weights``; uniform if all zero."""
    n = weights.shape[0]
    total = 0.0
    for k in range(n):
        total += weights[k]
    if total <= 0.0:
        return min(int(u * n), n - 1)
    target = u * total
    acc = 0.0
    for k in range(n):
        acc += weights[k]
        if target < acc:
            return k
    for k in range(n - 1, -1, -1):
        if weights[k] > 0.0:
            return k
    return n - 1


@njit(cache=True)
def advance(
    uniforms,
    mu,
    phi,
    is_bot,
    f_ptr,
    f_idx,
    feed_meme,
    feed_poster,
    feed_head,
    feed_len,
    meme_q,
    meme_f,
    meme_bot,
    human_posts,
    bot_posts,
    feed_occ,
    human_feed_occ,
    human_exposures,
    counters,
    hq_sum,
    events,
    stats,
):
    n_nodes = is_bot.shape[0]
    alpha = feed_meme.shape[1]
    weights = np.empty(alpha)
    for s in range(uniforms.shape[0]):
        agent = min(int(uniforms[s, 0] * n_nodes), n_nodes - 1)
        length = feed_len[agent]
        head = feed_head[agent]
        created = 0
        if length == 0 or uniforms[s, 1] < mu:
            m = counters[N_MEMES]
            counters[N_MEMES] = m + 1
            if is_bot[agent]:
                meme_f[m] = bot_fitness(uniforms[s, 2], phi)
                meme_q[m] = 0.0
                meme_bot[m] = 1
            else:
                meme_f[m] = human_fitness(uniforms[s, 2], phi)
                meme_q[m] = meme_f[m]
                meme_bot[m] = 0
            created = 1
        else:
            for k in range(length):
                weights[k] = meme_f[feed_meme[agent, (head + k) % alpha]]
            k = select_index(weights[:length], uniforms[s, 3])
            m = feed_meme[agent, (head + k) % alpha]

        if is_bot[agent]:
            bot_posts[m] += 1
        else:
            human_posts[m] += 1

        q = meme_q[m]
        for e in range(f_ptr[agent], f_ptr[agent + 1]):
            v = f_idx[e]
            human = is_bot[v] == 0
            if feed_len[v] < alpha:
                slot = (feed_head[v] + feed_len[v]) % alpha
                feed_len[v] += 1
            else:
                slot = feed_head[v]
                old = feed_meme[v, slot]
                feed_occ[old] -= 1
                if feed_occ[old] == 0:
                    counters[ALIVE] -= 1
                if human:
                    human_feed_occ[old] -= 1
                    hq_sum[0] -= meme_q[old]
                    counters[HUMAN_ENTRIES] -= 1
                feed_head[v] = (slot + 1) % alpha
            feed_meme[v, slot] = m
            feed_poster[v, slot] = agent
            feed_occ[m] += 1
            if feed_occ[m] == 1:
                counters[ALIVE] += 1
            if human:
                human_feed_occ[m] += 1
                hq_sum[0] += q
                counters[HUMAN_ENTRIES] += 1
                human_exposures[m] += 1

        events[s, 0] = agent
        events[s, 1] = m
        events[s, 2] = created
        counters[STEP] += 1
        stats[SUM_ALIVE] += counters[ALIVE]
        if counters[HUMAN_ENTRIES] > 0:
            stats[SUM_Q] += hq_sum[0] / counters[HUMAN_ENTRIES]
            stats[N_Q] += 1.0


@njit(cache=True)
def count_inversions(values):
    """Number of pairs ``i < j`` with ``values[i] > values[j]`` (merge sort)."""
    n = values.shape[0]
    a = values.copy()
    buf = np.empty_like(a)
    inv = 0
    width = 1
    while width < n:
        lo = 0
        while lo < n - width:
            mid = lo + width
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[i] <= a[j]:
                    buf[k] = a[i]
                    i += 1
                else:
                    buf[k] = a[j]
                    inv += mid - i
                    j += 1
                k += 1
            while i < mid:
                buf[k] = a[i]
                i += 1
                k += 1
            while j < hi:
                buf[k] = a[j]
                j += 1
                k += 1
            a[lo:hi] = buf[lo:hi]
            lo += 2 * width
        width *= 2
    return inv
