import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ideamarket.engine import (
    UNIFORMS_PER_STEP,
    EmptyFeed,
    Feed,
    Meme,
    Message,
    SimParams,
    SimState,
    SteadyConfig,
    make_meme,
    run_to_steady_state,
    sample_bot_fitness,
    sample_human_fitness,
    select_from_feed,
    step,
)
from ideamarket.netgen import InvalidParameter, NetGenParams, NodeKind, build_network, from_lists


def rng(seed=0):
    return np.random.default_rng(seed)


# --- fitness samplers ---------------------------------------------------


@pytest.mark.parametrize("phi", [1.0, 3.0, 9.0, 10.0])
def test_sampler_means(phi):
    n = 10**6
    h = sample_human_fitness(phi, rng(1), n)
    b = sample_bot_fitness(phi, rng(2), n)
    for draws, mean in ((h, 1 / (phi + 2)), (b, phi / (2 * phi + 1))):
        se = draws.std() / np.sqrt(n)
        assert abs(draws.mean() - mean) <= 3 * se
        assert abs(draws.mean() - mean) <= 0.001


def test_human_density_at_phi_one():
    # Density 2(1-f): CDF 1-(1-f)^2.
    draws = sample_human_fitness(1.0, rng(3), 200_000)
    res = stats.kstest(draws, lambda f: 1 - (1 - f) ** 2)
    assert res.pvalue > 0.01


def test_samplers_agree_at_phi_one():
    res = stats.ks_2samp(sample_human_fitness(1.0, rng(4), 100_000), sample_bot_fitness(1.0, rng(5), 100_000))
    assert res.pvalue > 0.01


class _Zero:
    def random(self, size=None):
        return 0.0 if size is None else np.zeros(size)


def test_samplers_zero_uniform_gives_zero():
    assert sample_human_fitness(2.0, _Zero()) == 0.0
    assert sample_bot_fitness(2.0, _Zero()) == 0.0


def test_samplers_reject_phi_below_one():
    with pytest.raises(InvalidParameter):
        sample_human_fitness(0.5, rng())
    with pytest.raises(InvalidParameter):
        sample_bot_fitness(0.0, rng())


@given(phi=st.floats(1, 50), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_samplers_in_unit_interval(phi, seed):
    for f in (sample_human_fitness(phi, rng(seed), 100), sample_bot_fitness(phi, rng(seed), 100)):
        assert ((f >= 0) & (f <= 1)).all()


# --- memes and feeds ----------------------------------------------------


def test_make_meme_quality_rules():
    r = rng(6)
    for _ in range(100):
        assert make_meme(NodeKind.BOT, 3.0, r).quality == 0.0
        m = make_meme(NodeKind.HUMAN, 3.0, r)
        assert m.quality == m.fitness
    assert make_meme(NodeKind.HUMAN, 1.0, r).id != make_meme(NodeKind.HUMAN, 1.0, r).id


def test_make_meme_registers_in_state():
    state = SimState(from_lists([[1], [0]]), 3)
    a = make_meme(NodeKind.HUMAN, 1.0, rng(), state)
    b = make_meme(NodeKind.BOT, 1.0, rng(), state)
    assert (a.id, b.id) == (0, 1)
    assert state.meme(1) == b


def _msg(i, f):
    return Message(Meme(i, f, f, NodeKind.HUMAN), poster=0)


def test_feed_evicts_oldest():
    feed = Feed(15, [_msg(i, 0.5) for i in range(15)])
    evicted = feed.push(_msg(99, 0.5))
    assert evicted.meme.id == 0
    assert len(feed) == 15
    assert [m.meme.id for m in feed] == list(range(1, 15)) + [99]


def test_select_single_entry():
    feed = Feed(3, [_msg(7, 0.3)])
    assert select_from_feed(feed, rng()).meme.id == 7


def test_select_empty_feed_raises():
    with pytest.raises(EmptyFeed):
        select_from_feed(Feed(3), rng())


@pytest.mark.parametrize("fits, expected", [((0.2, 0.6), (0.25, 0.75)), ((0.0, 0.0), (0.5, 0.5))])
def test_select_frequencies(fits, expected):
    feed = Feed(2, [_msg(i, f) for i, f in enumerate(fits)])
    r = rng(7)
    picks = np.array([select_from_feed(feed, r).meme.id for _ in range(100_000)])
    freq = np.bincount(picks, minlength=2) / len(picks)
    assert np.allclose(freq, expected, atol=0.01)


# --- reference dynamics -------------------------------------------------


def reference_run(net, alpha, uniforms, mu, phi):
    """Step-by-step replay with plain Python feeds, consuming the same uniforms."""
    n = net.n_nodes
    followers = [[] for _ in range(n)]
    for i, friends in enumerate(net.out_adjacency):
        for j in friends:
            followers[j].append(i)
    feeds = [Feed(alpha) for _ in range(n)]
    memes: list[Meme] = []
    human_posts, bot_posts, exposures = {}, {}, {}
    for u_agent, u_post, u_fit, u_sel in uniforms:
        agent = min(int(u_agent * n), n - 1)
        bot = net.is_bot(agent)
        if len(feeds[agent]) == 0 or u_post < mu:
            if bot:
                f = 1 - (1 - u_fit) ** (phi / (phi + 1))
                meme = Meme(len(memes), 0.0, f, NodeKind.BOT)
            else:
                f = 1 - (1 - u_fit) ** (1 / (phi + 1))
                meme = Meme(len(memes), f, f, NodeKind.HUMAN)
            memes.append(meme)
        else:
            entries = list(feeds[agent])
            w = np.array([m.meme.fitness for m in entries])
            if w.sum() > 0:
                k = int(np.searchsorted(np.cumsum(w), u_sel * w.sum(), side="right"))
            else:
                k = int(u_sel * len(entries))
            meme = entries[min(k, len(entries) - 1)].meme
        counter = bot_posts if bot else human_posts
        counter[meme.id] = counter.get(meme.id, 0) + 1
        for v in sorted(followers[agent]):
            feeds[v].push(Message(meme, agent))
            if not net.is_bot(v):
                exposures[meme.id] = exposures.get(meme.id, 0) + 1
    return feeds, memes, human_posts, bot_posts, exposures


@pytest.mark.parametrize("seed, mu, phi, alpha", [(0, 0.75, 1.0, 15), (1, 0.25, 5.0, 3), (2, 0.9, 10.0, 1), (3, 0.5, 2.0, 6)])
def test_kernel_matches_reference(seed, mu, phi, alpha):
    net = build_network(NetGenParams(n_humans=60, beta=0.2, gamma=0.2), seed)
    u = rng(seed).random((3000, UNIFORMS_PER_STEP))
    state = SimState(net, alpha)
    state.run(u[:1700], mu, phi)
    state.run(u[1700:], mu, phi)
    feeds, memes, hp, bp, ex = reference_run(net, alpha, u, mu, phi)
    assert state.n_memes == len(memes)
    assert np.allclose(state.meme_f[: len(memes)], [m.fitness for m in memes], rtol=0, atol=1e-15)
    for i in range(net.n_nodes):
        assert state.feed_ids(i).tolist() == [m.meme.id for m in feeds[i]]
        assert [m.poster for m in state.feed(i)] == [m.poster for m in feeds[i]]
    for counts, ref in ((state.human_posts, hp), (state.bot_posts, bp), (state.human_exposures, ex)):
        assert {i: int(c) for i, c in enumerate(counts[: len(memes)]) if c} == ref
    alive = {m.meme.id for f in feeds for m in f}
    assert state.alive_memes == len(alive)
    q = np.concatenate([state.meme_q[state.feed_ids(i)] for i in range(net.n_humans)])
    assert state.instantaneous_quality() == pytest.approx(q.mean(), abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1), alpha=st.integers(1, 20), mu=st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_feeds_bounded_and_occupancy_consistent(seed, alpha, mu):
    net = build_network(NetGenParams(n_humans=40, beta=0.1, gamma=0.3), seed)
    state = SimState(net, alpha)
    for _ in range(5):
        state.run(rng(seed).random((200, UNIFORMS_PER_STEP)), mu, 2.0)
        assert (state.feed_len <= alpha).all()
    occ = np.bincount(np.concatenate([state.feed_ids(i) for i in range(net.n_nodes)]), minlength=state.n_memes)
    assert np.array_equal(occ, state.feed_occ[: state.n_memes])
    assert state.alive_memes == int((occ > 0).sum())


def test_step_without_followers_changes_only_counters():
    net = from_lists([[1], []])  # node 1 has follower 0; node 0 has none
    state = SimState(net, 3)

    class Fixed:
        def random(self, size):
            return np.array([[0.0, 0.0, 0.5, 0.5]])

    ev = step(state, 0.75, 1.0, Fixed())
    assert ev.agent == 0 and ev.n_followers == 0 and ev.created
    assert state.feed_len.tolist() == [0, 0]
    assert state.human_posts[0] == 1


def test_full_feed_drops_oldest_in_state():
    net = from_lists([[1], []])
    state = SimState(net, 15)
    u = np.tile([0.9, 0.0, 0.5, 0.5], (16, 1))  # node 1 posts new memes 16 times
    state.run(u, 1.0, 1.0)
    assert state.feed_ids(0).tolist() == list(range(1, 16))


def test_mu_one_creates_every_step():
    net = build_network(NetGenParams(n_humans=100, gamma=0.05), 0)
    state = SimState(net, 15)
    events, _ = state.run(rng().random((500, UNIFORMS_PER_STEP)), 1.0, 1.0)
    assert events[:, 2].all()
    assert state.n_memes == 500


# --- steady state and ledger --------------------------------------------


def small_params(**kw):
    net_kw = {k: kw.pop(k) for k in list(kw) if k in NetGenParams.__dataclass_fields__}
    return SimParams(net=NetGenParams(n_humans=kw.pop("n", 300), **net_kw), **kw)


def test_no_infiltration_ledger_is_human_only():
    params = small_params(gamma=0.0, beta=0.1, phi=5.0)
    net = build_network(params.net, 1)
    result = run_to_steady_state(params, net, rng(1))
    assert len(result.ledger) > 0
    assert not result.ledger.is_bot.any()


def test_ledger_quality_invariant_and_window_counts():
    params = small_params(gamma=0.2)
    net = build_network(params.net, 2)
    result = run_to_steady_state(params, net, rng(2))
    led = result.ledger
    assert (led.quality[led.is_bot] == 0).all()
    assert (led.quality[~led.is_bot] == led.fitness[~led.is_bot]).all()
    steps = params.resolved_measure_steps(net.n_nodes)
    assert led.human_posts.sum() + led.bot_posts.sum() <= steps
    assert (led.human_posts >= 0).all() and (led.bot_posts >= 0).all()


def test_same_seed_same_ledger():
    params = small_params(gamma=0.05)
    net = build_network(params.net, 3)
    a = run_to_steady_state(params, net, rng(9)).ledger
    b = run_to_steady_state(params, net, rng(9)).ledger
    c = run_to_steady_state(params, net, rng(10)).ledger
    assert a.equals(b)
    assert not a.equals(c)


def test_alive_count_stabilizes_at_desk_scale():
    params = SimParams(
        net=NetGenParams(n_humans=1000, gamma=0.01),
        steady=SteadyConfig(window=100 * 1100, rel_tol=0.01, consecutive=3),
        measure_steps=1100,
    )
    net = build_network(params.net, 4)
    result = run_to_steady_state(params, net, rng(4))
    assert result.converged
    last = [a for a, _ in result.window_means[-4:]]
    assert all(abs(x - y) <= 0.01 * max(x, y) for x, y in zip(last, last[1:]))


def test_max_steps_flags_nonconvergence():
    params = small_params(steady=SteadyConfig(window=100, rel_tol=1e-9, max_steps=1000), measure_steps=50)
    result = run_to_steady_state(params, build_network(params.net, 0), rng())
    assert not result.converged
    assert result.steady_steps == 1000


def test_alive_count_nondecreasing_in_load():
    net_params = NetGenParams(n_humans=300, gamma=0.0)
    means = []
    for mu in (0.2, 0.5, 0.9):
        alive = []
        for s in range(20):
            params = SimParams(net=net_params, mu=mu)
            res = run_to_steady_state(params, build_network(net_params, s), rng(s))
            alive.append(np.mean([a for a, _ in res.window_means[-3:]]))
        means.append(np.mean(alive))
    assert means[0] <= means[1] <= means[2]


def test_ledger_csv(tmp_path):
    params = small_params(gamma=0.2, n=100)
    result = run_to_steady_state(params, build_network(params.net, 0), rng())
    path = result.ledger.write_csv(tmp_path / "ledger.csv")
    lines = path.read_bytes().split(b"\n")
    assert lines[0] == b"meme_id,origin,quality,fitness,human_posts,bot_posts,feed_occurrences_at_end"
    assert len(lines) == len(result.ledger) + 2 and lines[-1] == b""
    assert b"\r" not in path.read_bytes()


@pytest.mark.parametrize("kw", [dict(mu=1.5), dict(alpha=0), dict(phi=0.5)])
def test_params_validation(kw):
    with pytest.raises(InvalidParameter):
        SimParams(**kw).validate()


def test_steady_config_validation():
    with pytest.raises(InvalidParameter):
        SteadyConfig(rel_tol=0).resolve(10)
    assert SteadyConfig().resolve(100).window == 1000
