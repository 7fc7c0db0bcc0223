import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from gatsac.agent import GATSACController, TrainingError
from gatsac.graph import N_FEATURES
from gatsac.neural import ParamStore, adam_update, soft_update
from gatsac.sac import (
    ACTION_DIM,
    N_PHASES,
    Batch,
    ControlAction,
    ReplayBuffer,
    SACAgent,
    SACConfig,
    actor_loss,
    critic_loss,
    critic_target,
    decode_action,
    decode_greens,
    log_prob_of_action,
    squashed_gaussian,
    squashed_gaussian_backward,
    temperature_grad,
)
from gatsac.sim import SimConfig
from gatsac.sim.geometry import N_LANES
from gatsac.sim.simulator import SIGNAL_CONTEXT_DIM, SignalBounds

from gradcheck import max_rel_error, sample_coords

SMALL = dict(hidden_dim=16, gat_hidden=6, gat_dropout=0.3)


def _batch(rng, B=5, action_dim=ACTION_DIM, done=None):
    return Batch(X=rng.random((B, N_LANES, N_FEATURES)), ctx=rng.random((B, SIGNAL_CONTEXT_DIM)),
                 phase=rng.integers(0, N_PHASES, B), action=rng.uniform(-1, 1, (B, action_dim)),
                 reward=rng.normal(size=B), X2=rng.random((B, N_LANES, N_FEATURES)),
                 ctx2=rng.random((B, SIGNAL_CONTEXT_DIM)), phase2=rng.integers(0, N_PHASES, B),
                 done=np.zeros(B) if done is None else done)


# ----------------------------------------------------------------- action decode

def test_decode_midpoint_and_saturation():
    b = SignalBounds(t_max=1000.0)
    assert np.allclose(decode_greens(np.zeros(4), b), (b.g_min + b.g_max) / 2)
    # with the default 120 s cycle cap the four midpoints (142 s cycle) shrink equally
    g = decode_greens(np.zeros(4), SignalBounds())
    assert np.allclose(g, g[0]) and g.sum() + 12.0 == pytest.approx(120.0)
    g = decode_greens(np.full(4, 1 - 1e-9), SignalBounds(t_max=1000.0))
    assert np.all(g <= b.g_max) and np.allclose(g, b.g_max)


def test_decode_grid_scan_stays_in_bounds():
    b = SignalBounds()
    grid = np.linspace(-1.0, 1.0, 9)
    for combo in itertools.product(grid, repeat=4):
        g = decode_greens(np.array(combo), b)
        assert np.all(g >= b.g_min - 1e-12) and np.all(g <= b.g_max + 1e-12)
        cycle = g.sum() + 4 * b.c_min
        assert b.t_min - 1e-9 <= cycle <= b.t_max + 1e-9


def test_decode_action_fields():
    a = np.zeros(ACTION_DIM)
    a[N_LANES + N_PHASES] = 0.4
    cmd = decode_action(a, SignalBounds())
    assert cmd.switch is True
    assert decode_action(-np.ones(ACTION_DIM), SignalBounds()).switch is False
    act = ControlAction.from_vector(np.arange(ACTION_DIM, dtype=float))
    assert np.array_equal(act.to_vector(), np.arange(ACTION_DIM))


# ----------------------------------------------------------------- replay buffer

@settings(max_examples=40)
@given(capacity=st.integers(1, 20), n=st.integers(0, 60))
def test_replay_fifo_eviction(capacity, n):
    buf = ReplayBuffer(capacity)
    X = np.zeros((N_LANES, N_FEATURES))
    ctx = np.zeros(SIGNAL_CONTEXT_DIM)
    for i in range(n):
        buf.push(X, ctx, 0, np.zeros(ACTION_DIM), float(i), X, ctx, 0, 0.0)
    assert len(buf) == min(n, capacity)
    expected = list(range(max(0, n - capacity), n))
    assert buf.reward[buf.order()].tolist() == expected


def test_replay_sampling_without_replacement():
    buf = ReplayBuffer(50)
    X = np.zeros((N_LANES, N_FEATURES))
    ctx = np.zeros(SIGNAL_CONTEXT_DIM)
    for i in range(30):
        buf.push(X, ctx, 0, np.zeros(ACTION_DIM), float(i), X, ctx, 0, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = buf.sample(30, rng).reward
        assert len(set(r.tolist())) == 30
    with pytest.raises(ValueError):
        buf.sample(31, rng)
    with pytest.raises(ValueError):
        buf.push(X, ctx, 0, np.zeros(ACTION_DIM), np.nan, X, ctx, 0, 0.0)


# ----------------------------------------------------------------- squashed Gaussian

def test_squash_degenerate_cases():
    mu = np.array([[0.7, -0.2]])
    a, _, _ = squashed_gaussian(mu, np.full_like(mu, -20.0), np.ones_like(mu))
    assert np.allclose(a, np.tanh(mu), atol=1e-8)
    a0, _, _ = squashed_gaussian(np.zeros((1, 3)), np.full((1, 3), -20.0), np.zeros((1, 3)))
    assert np.all(a0 == 0.0)


def test_log_prob_matches_histogram_density():
    rng = np.random.default_rng(0)
    mu, ls = np.array([[0.3]]), np.array([[np.log(0.6)]])
    n = 200_000
    a, logp, _ = squashed_gaussian(np.repeat(mu, n, 0), np.repeat(ls, n, 0), rng.standard_normal((n, 1)))
    assert np.allclose(logp, log_prob_of_action(a, mu, ls), atol=1e-6)
    edges = np.linspace(-0.95, 0.95, 20)
    counts, _ = np.histogram(a[:, 0], edges)

    def density(x):
        return float(np.exp(log_prob_of_action(np.array([[x]]), mu, ls))[0])

    for k in range(len(counts)):
        p, _ = integrate.quad(density, edges[k], edges[k + 1])
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts[k] - n * p) < 5 * sigma + 1, k


def test_squash_backward_vs_finite_differences():
    rng = np.random.default_rng(1)
    mu = rng.normal(size=(3, 4))
    ls = rng.normal(scale=0.5, size=(3, 4))
    eps = rng.standard_normal((3, 4))
    ga = rng.normal(size=(3, 4))
    gl = rng.normal(size=3)

    def f():
        a, logp, _ = squashed_gaussian(mu, ls, eps)
        return float(np.sum(a * ga) + np.sum(logp * gl))

    _, _, cache = squashed_gaussian(mu, ls, eps)
    dmu, dls = squashed_gaussian_backward(cache, ga, gl)
    assert max_rel_error(dmu, mu, f) < 1e-4
    assert max_rel_error(dls, ls, f) < 1e-4


# ----------------------------------------------------------------- losses

def test_critic_target_examples():
    one = np.array([1.0])
    assert critic_target(np.array([3.0]), one, one * 7, one * 9, one, 0.2, 0.95)[0] == 3.0
    assert critic_target(np.array([3.0]), one * 0, one * 7, one * 9, one, 0.2, 0.0)[0] == 3.0
    y = critic_target(one, one * 0, np.array([2.0]), np.array([5.0]), one * 0.4, 0.0, 0.95)
    assert y[0] == pytest.approx(2.9, abs=1e-12)


def test_critic_loss_examples_and_scalar_oracle():
    y = np.array([1.0, -2.0, 0.5])
    assert critic_loss(y, y, y)[0] == 0.0
    assert critic_loss(y + 1, y + 1, y)[0] == pytest.approx(2.0)
    rng = np.random.default_rng(2)
    q1, q2, y = rng.normal(size=(3, 7))
    loss, dq1, dq2 = critic_loss(q1, q2, y)
    manual = sum((q1[i] - y[i]) ** 2 for i in range(7)) / 7 + sum((q2[i] - y[i]) ** 2 for i in range(7)) / 7
    assert loss == pytest.approx(manual, rel=1e-12)
    assert max_rel_error(dq1, q1, lambda: critic_loss(q1, q2, y)[0]) < 1e-6


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 2.0))
def test_twin_min_symmetry(seed, alpha):
    rng = np.random.default_rng(seed)
    q1, q2, logp, r = rng.normal(size=(4, 6))
    d = (rng.random(6) < 0.3).astype(float)
    assert np.array_equal(critic_target(r, d, q1, q2, logp, alpha, 0.9), critic_target(r, d, q2, q1, logp, alpha, 0.9))
    assert actor_loss(logp, q1, q2, alpha)[0] == actor_loss(logp, q2, q1, alpha)[0]
    assert actor_loss(logp, q1, q1, alpha)[0] == pytest.approx(float(np.mean(alpha * logp - q1)))


def test_actor_loss_with_constant_critic_and_alpha_scan():
    logp = np.array([0.5, 1.5])
    q = np.full(2, 4.0)
    assert actor_loss(logp, q, q, 0.0)[0] == -4.0
    losses = [actor_loss(logp, q, q, a)[0] for a in np.linspace(0, 1, 11)]
    assert np.all(np.diff(losses) > 0)


@settings(max_examples=50)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=30), st.floats(-10, 10), st.floats(-5, 2))
def test_temperature_fixed_point(logp, target, log_alpha):
    logp = np.array(logp)
    shifted = logp - logp.mean() - target  # mean log pi == -H_target
    _, g = temperature_grad(log_alpha, shifted, target)
    assert abs(g) < 1e-9 * np.exp(log_alpha) * (1 + np.abs(logp).max() + abs(target))


def test_temperature_moves_toward_target():
    # target entropy -4: log pi above 4 means too little entropy, so alpha must rise
    for mean_logp, direction in ((6.0, 1.0), (-10.0, -1.0)):
        store = ParamStore()
        store.add("log_alpha", np.array([np.log(0.2)]))
        _, g = temperature_grad(store["log_alpha"][0], np.full(8, mean_logp), -4.0)
        store.accumulate({"log_alpha": np.array([g])})
        before = store["log_alpha"][0]
        adam_update(store, 1e-2)
        assert np.sign(store["log_alpha"][0] - before) == direction


# ----------------------------------------------------------------- agent gradients

@pytest.mark.parametrize("action_dim", [2, ACTION_DIM])
def test_actor_gradients_vs_finite_differences(action_dim):
    agent = SACAgent(SACConfig(**SMALL), seed=3, action_dim=action_dim)
    rng = np.random.default_rng(4)
    b = _batch(rng, action_dim=action_dim)
    obs, _ = agent.observe(b.X, b.ctx, b.phase)
    eps = rng.standard_normal((obs.shape[0], action_dim))
    _, grads, _ = agent.actor_grads(obs, eps)

    def f():
        return agent.actor_grads(obs, eps)[0]

    for name, grad in grads.items():
        idx = sample_coords(grad.size, 40, rng)
        assert max_rel_error(grad, agent.actor.params[name], f, idx=idx) < 1e-4, name


def test_critic_and_encoder_gradients_vs_finite_differences():
    agent = SACAgent(SACConfig(**SMALL), seed=5)
    rng = np.random.default_rng(6)
    b = _batch(rng)
    y = rng.normal(size=5)
    _, gq, genc, _ = agent.critic_grads(b, y, np.random.default_rng(9))

    def f():
        return agent.critic_grads(b, y, np.random.default_rng(9))[0]

    for store, grads in ((agent.critic_store, gq), (agent.encoder.params, genc)):
        for name, grad in grads.items():
            idx = sample_coords(grad.size, 30, rng)
            assert max_rel_error(grad, store[name], f, idx=idx) < 1e-4, name


def test_full_size_gradients_sampled():
    agent = SACAgent(SACConfig(), seed=7)
    rng = np.random.default_rng(8)
    b = _batch(rng, B=4)
    y = rng.normal(size=4)
    _, gq, genc, obs = agent.critic_grads(b, y, np.random.default_rng(1))

    def fq():
        return agent.critic_grads(b, y, np.random.default_rng(1))[0]

    eps = rng.standard_normal((4, ACTION_DIM))
    _, gpi, _ = agent.actor_grads(obs, eps)

    def fpi():
        return agent.actor_grads(obs, eps)[0]

    for store, grads, f in ((agent.critic_store, gq, fq), (agent.encoder.params, genc, fq),
                            (agent.actor.params, gpi, fpi)):
        for name, grad in grads.items():
            idx = sample_coords(grad.size, 8, rng)
            assert max_rel_error(grad, store[name], f, idx=idx, floor=1e-5) < 1e-4, name


# ----------------------------------------------------------------- update mechanics

def test_update_moves_target_by_soft_average_only():
    agent = SACAgent(SACConfig(**SMALL, tau=0.1), seed=0)
    rng = np.random.default_rng(0)
    before = agent.target_store.copy()
    out = agent.update(_batch(rng, B=8), rng)
    assert out is not None and agent.updates == 1
    for k in agent.target_store:
        expected = 0.9 * before[k] + 0.1 * agent.critic_store[k]
        assert np.allclose(agent.target_store[k], expected, atol=1e-15)


def test_non_finite_update_is_skipped():
    agent = SACAgent(SACConfig(**SMALL), seed=0)
    rng = np.random.default_rng(0)
    b = _batch(rng)
    b.reward[0] = np.inf
    sums = {name: s.checksum() for name, s in agent.stores().items()}
    assert agent.update(b, rng) is None
    assert {name: s.checksum() for name, s in agent.stores().items()} == sums


def test_three_consecutive_skips_abort(monkeypatch):
    est = GATSACController(warmup=2, batch_size=2, random_state=0, **SMALL)
    est._init_agent()
    monkeypatch.setattr(est.agent_, "update", lambda batch, rng: None)
    with pytest.raises(TrainingError, match="consecutive"):
        est.fit(SimConfig(demand=600.0, control_interval=5.0), episodes=1, horizon=60.0)


def test_warmup_gate_blocks_updates():
    est = GATSACController(warmup=1000, batch_size=4, random_state=0, **SMALL)
    est.fit(SimConfig(demand=600.0, control_interval=5.0), episodes=1, horizon=100.0)
    assert est.history_[0]["updates"] == 0
    assert est.agent_.updates == 0


def test_training_is_deterministic(tmp_path):
    paths = []
    for run in range(2):
        est = GATSACController(warmup=5, batch_size=4, random_state=3, **SMALL)
        p = tmp_path / f"m{run}.csv"
        est.fit(SimConfig(demand=900.0, control_interval=5.0), episodes=2, horizon=60.0, metrics_path=p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert est.agent_.updates > 0


def test_checkpoint_round_trip(tmp_path):
    est = GATSACController(warmup=3, batch_size=2, random_state=1, **SMALL)
    est.fit(SimConfig(demand=900.0, control_interval=5.0), episodes=1, horizon=30.0)
    path = tmp_path / "agent.npz"
    est.save(path)
    back = GATSACController.load(path)
    assert back.get_params() == est.get_params()
    rng = np.random.default_rng(0)
    X = rng.random((3, N_LANES, N_FEATURES))
    ctx = rng.random((3, SIGNAL_CONTEXT_DIM))
    assert np.array_equal(back.predict(X, ctx, [0, 1, 2]), est.predict(X, ctx, [0, 1, 2]))


def test_config_validation():
    with pytest.raises(ValueError, match="tau"):
        SACConfig(tau=0.0)
    with pytest.raises(ValueError, match="gamma"):
        SACConfig(gamma=1.0)
    assert SACConfig.from_dict(SACConfig(batch_size=32).to_dict()) == SACConfig(batch_size=32)
