import math
import warnings

import numpy as np
import pytest

from mipp import point_process as pp
from mipp.errors import ExplosionError


def _replay(network, config, trial_index):
    # straightforward per-step reimplementation driven by the trial's own stream
    rng = pp.trial_rng(config.seed, trial_index)
    L = network.log_weights
    n = network.n_units
    rates = network.base_rates.copy()
    if config.warm_up is not None:
        inputs = network.input_units
        rates[inputs] = config.warm_up.input_rates
        for u in rng.random((int(round(config.warm_up.duration / config.dt)), n)):
            fired = [a for a in range(n) if u[a] < -math.expm1(-rates[a] * config.dt)]
            for a in range(n):
                rates[a] *= math.exp(sum(L[a, f] for f in fired))
        rates[inputs] = network.base_rates[inputs]
    events = [[] for _ in range(n)]
    samples = []
    for k, u in enumerate(rng.random((config.n_steps, n))):
        if k % config.rate_sample_stride == 0:
            samples.append(rates.copy())
        fired = [a for a in range(n) if u[a] < -math.expm1(-rates[a] * config.dt)]
        for a in fired:
            events[a].append(k * config.dt)
        for a in range(n):
            rates[a] *= math.exp(sum(L[a, f] for f in fired))
    return events, np.array(samples), rates


@pytest.fixture
def small_net():
    L = np.array([[0.0, 0.0, 0.0],
                  [math.log(1.3), -0.5, -0.2],
                  [0.1, 0.4, -0.8]])
    return pp.Network(L, [80.0, 5.0, 3.0])


def test_event_probability_values():
    assert pp.event_probability(50.0, 1e-4) == pytest.approx(0.00498752080731769, rel=1e-12)
    assert pp.event_probability(0.0, 1e-4) == 0.0
    assert np.allclose(pp.event_probability([1.0, 1e4], 1e-4), [9.9995e-5, 0.6321205588285577])
    with pytest.raises(ValueError):
        pp.event_probability(-1.0, 1e-4)
    with pytest.raises(ValueError):
        pp.event_probability(1.0, 0.0)


class _FixedUniforms:
    def __init__(self, u):
        self.u = np.asarray(u, dtype=float)

    def random(self, shape):
        return np.broadcast_to(self.u, shape).copy()


def test_step_applies_all_events_of_a_step_together():
    net = pp.Network.spi(50.0, 1.2, 0.01, 2.0)
    state = [50.0, 2.0]
    ev, nxt = pp.step(net, state, _FixedUniforms([0.0, 0.999]))
    assert ev.tolist() == [True, False]
    assert nxt == pytest.approx([50.0, 2.4])
    ev, nxt = pp.step(net, state, _FixedUniforms([0.0, 0.0]))
    assert ev.tolist() == [True, True]
    assert nxt == pytest.approx([50.0, 2.0 * 1.2 * 0.01])
    ev, nxt = pp.step(net, state, _FixedUniforms([0.999, 0.999]))
    assert not ev.any() and nxt.tolist() == state


def test_step_broadcasts_over_batches():
    net = pp.Network.spi()
    state = np.tile([50.0, 1.0], (4, 3, 1))
    ev, nxt = pp.step(net, state, np.random.default_rng(0))
    assert ev.shape == nxt.shape == (4, 3, 2)
    with pytest.raises(ValueError):
        pp.step(net, [-1.0, 1.0], np.random.default_rng(0))


@pytest.mark.filterwarnings("ignore:dt \\* max rate")
def test_kernel_matches_reference_replay(small_net):
    cfg = pp.SimConfig(dt=1e-3, t_end=2.0, seed=11, rate_sample_stride=7)
    rec = pp.simulate_trial(small_net, cfg, trial_index=3)
    events, samples, final = _replay(small_net, cfg, 3)
    for a in range(3):
        assert np.allclose(rec.events[a], events[a], rtol=0, atol=1e-12)
    assert np.allclose(rec.rates[: len(samples)], samples, rtol=1e-12)
    assert np.allclose(rec.final_rates, final, rtol=1e-12)


@pytest.mark.filterwarnings("ignore:dt \\* max rate")
def test_kernel_matches_replay_with_warm_up(small_net):
    cfg = pp.SimConfig(dt=1e-3, t_end=0.5, seed=5, rate_sample_stride=10,
                       warm_up=pp.WarmUp(0.3, (20.0,)))
    rec = pp.simulate_trial(small_net, cfg, trial_index=0)
    events, samples, final = _replay(small_net, cfg, 0)
    for a in range(3):
        assert np.allclose(rec.events[a], events[a], atol=1e-12)
    assert np.allclose(rec.rates[: len(samples)], samples, rtol=1e-12)
    # the input is back at its configured rate and warm-up events are dropped
    assert rec.rates[0, 0] == 80.0
    assert all(np.all(e >= 0) for e in rec.events)
    assert not np.allclose(rec.rates[0, 1:], small_net.base_rates[1:])


def test_rates_follow_recorded_events(small_net):
    cfg = pp.SimConfig(dt=1e-4, t_end=0.5, seed=2, rate_sample_stride=1)
    rec = pp.simulate_trial(small_net, cfg)
    K = cfg.n_steps
    X = np.zeros((K, 3))
    for a, t in enumerate(rec.events):
        X[np.rint(t / cfg.dt).astype(int), a] = 1
    logr = np.log(small_net.base_rates) + np.vstack([np.zeros(3), np.cumsum(X, 0)]) @ small_net.log_weights.T
    assert np.allclose(np.log(rec.rates), logr, atol=1e-9)
    assert np.allclose(np.log(rec.final_rates), logr[-1], atol=1e-9)


def test_determinism_and_batch_independence(small_net):
    cfg = pp.SimConfig(dt=1e-4, t_end=0.3, seed=42, n_trials=9, rate_sample_stride=50)
    a = pp.simulate_ensemble(small_net, cfg, workers=1, batch_size=4)
    b = pp.simulate_ensemble(small_net, cfg, workers=3, batch_size=2)
    c = [pp.simulate_trial(small_net, cfg, k) for k in range(9)]
    for x, y, z in zip(a, b, c):
        assert x.trial_index == y.trial_index == z.trial_index
        for u in range(3):
            assert np.array_equal(x.events[u], y.events[u])
            assert np.array_equal(x.events[u], z.events[u])
        assert np.array_equal(x.rates, y.rates) and np.array_equal(x.rates, z.rates)
    other = pp.simulate_ensemble(small_net, pp.SimConfig(dt=1e-4, t_end=0.3, seed=43,
                                                         n_trials=9, rate_sample_stride=50))
    assert any(len(x.events[1]) != len(y.events[1]) for x, y in zip(a, other))


def test_trial_streams_are_distinct():
    u0 = pp.trial_rng(7, 0).random(5)
    u1 = pp.trial_rng(7, 1).random(5)
    assert not np.allclose(u0, u1)
    assert np.array_equal(u0, pp.trial_rng(7, 0).random(5))


def test_pure_input_counts_are_poisson():
    # 400 trials of a rate-50 input over 1 s: count mean 50, variance ~ 50
    net = pp.Network(np.zeros((1, 1)), [50.0])
    recs = pp.simulate_ensemble(net, pp.SimConfig(t_end=1.0, seed=3, n_trials=400))
    counts = np.array([r.counts()[0] for r in recs], float)
    p = pp.event_probability(50.0, 1e-4)
    mean, var = 1e4 * p, 1e4 * p * (1 - p)
    assert abs(counts.mean() - mean) < 4 * math.sqrt(var / 400)
    assert 0.7 * var < counts.var(ddof=1) < 1.3 * var


def test_spi_record_layout():
    cfg = pp.SimConfig(dt=1e-4, t_end=0.1, seed=0, rate_sample_stride=100)
    rec = pp.simulate_trial(pp.Network.spi(), cfg)
    assert rec.rates.shape == (11, 2)
    assert np.allclose(rec.rate_times, np.arange(11) * 0.01)
    assert rec.rates[0].tolist() == [50.0, 1.0]
    assert rec.t_end == pytest.approx(0.1)
    assert rec.seed_used == 0 and rec.dt == 1e-4
    for ev in rec.events:
        assert np.all(np.diff(ev) > 0)
        assert np.allclose(ev / 1e-4, np.rint(ev / 1e-4))


def test_count_process():
    rec = pp.SpikeRecord([np.array([0.0, 0.1, 0.25])], np.zeros(1), np.zeros((1, 1)),
                         np.zeros(1), 0, 0, 0.05, 0.3)
    assert [pp.count_process(rec, 0, t) for t in (0.0, 0.05, 0.1, 0.3)] == [1, 1, 2, 3]
    with pytest.raises(ValueError):
        pp.count_process(rec, 0, 0.5)
    with pytest.raises(IndexError):
        pp.count_process(rec, 1, 0.1)


@pytest.mark.filterwarnings("ignore:dt \\* max rate")
def test_explosion_is_reported_with_trial():
    net = pp.Network([[math.log(3.0)]], [2000.0])
    cfg = pp.SimConfig(dt=1e-5, t_end=1.0, seed=0, n_trials=2)
    with pytest.raises(ExplosionError) as info:
        pp.simulate_ensemble(net, cfg)
    assert info.value.trial_index == 0
    assert 0 < info.value.time < 1.0


def test_population_tags():
    L = np.array([[0.0, 0.0, 0.0, 0.0],
                  [0.0, -0.3, 0.0, 0.0],
                  [0.2, 0.0, -0.1, 0.0],
                  [0.0, 0.0, 0.5, 0.0]])
    assert pp.population_tags(L) == (pp.PURE_POISSON_INPUT, pp.TRANSIENT_INPUT,
                                     pp.RECURRENT, pp.RECURRENT)
    assert pp.Network(L, np.ones(4)).input_units == [0]


@pytest.mark.parametrize("kwargs", [dict(dt=0.0), dict(t_end=0.0), dict(n_trials=0),
                                    dict(seed=-1), dict(seed=2**64), dict(rate_sample_stride=0)])
def test_bad_sim_config(kwargs):
    with pytest.raises(ValueError):
        pp.SimConfig(**kwargs)


def test_bad_networks():
    with pytest.raises(ValueError):
        pp.Network(np.zeros((2, 3)), [1, 1])
    with pytest.raises(ValueError):
        pp.Network(np.zeros((2, 2)), [1, -1])
    with pytest.raises(ValueError):
        pp.Network(np.zeros((2, 2)), [1])
    with pytest.raises(ValueError):
        pp.Network([[np.inf]], [1])
    with pytest.raises(ValueError):
        pp.Network.from_weights([[0.0]], [1])
    assert np.allclose(pp.Network.from_weights([[2.0]], [1]).log_weights, math.log(2))


def test_warm_up_validation():
    with pytest.raises(ValueError):
        pp.WarmUp(0.0, (1.0,))
    with pytest.raises(ValueError):
        pp.WarmUp(1.0, (-1.0,))
    cfg = pp.SimConfig(warm_up=pp.WarmUp(1.0, (1.0, 2.0)))
    with pytest.raises(ValueError, match="pure Poisson inputs"):
        pp.simulate_trial(pp.Network.spi(), cfg)


def test_coarse_grid_warns():
    with pytest.warns(RuntimeWarning, match="coarse"):
        pp.SimConfig(dt=1e-3, t_end=0.01).validate_for(pp.Network.spi(lam=50.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pp.SimConfig().validate_for(pp.Network.spi())


def test_csv_round_trip(tmp_path, small_net):
    cfg = pp.SimConfig(dt=1e-4, t_end=0.2, seed=1, n_trials=3, rate_sample_stride=500)
    recs = pp.simulate_ensemble(small_net, cfg)
    ev_path, rate_path = tmp_path / "ev.csv", tmp_path / "rates.csv"
    pp.write_events_csv(recs, ev_path)
    pp.write_rates_csv(recs, rate_path)
    lines = ev_path.read_text().splitlines()
    assert lines[0] == "trial,unit,time"
    assert len(lines[1].split(",")[2].split(".")[1]) == 9
    back = pp.read_events_csv(ev_path, n_units=3)
    for rec in recs:
        for a in range(3):
            assert np.allclose(back[rec.trial_index][a], rec.events[a], atol=1e-12)
    assert rate_path.read_text().splitlines()[0] == "trial,time,unit,rate"
    rates = pp.read_rates_csv(rate_path)
    times, vals = rates[1]
    assert np.allclose(times, recs[1].rate_times)
    assert np.array_equal(vals, recs[1].rates)
