"""Soft actor-critic over graph-attention embeddings.

The actor is a squashed Gaussian policy, the critics are a twin pair with
Polyak-averaged targets, and the temperature is tuned automatically towards a
target entropy. The encoder is trained through the critic loss; the actor
sees its output as a fixed input.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .gat import GATNetwork
from .graph import N_FEATURES, READOUT_ROWS, adjacency_mask, readout_matrix
from .neural import MLP, ParamStore, adam_update, soft_update
from .sim.geometry import N_CONFLICTS, N_LANES, N_PHASES
from .sim.simulator import SIGNAL_CONTEXT_DIM, SignalBounds, SignalCommand

logger = logging.getLogger(__name__)

N_LANE_ACT = N_LANES
N_SIGNAL_ACT = N_PHASES + 1
N_CONFLICT_ACT = N_CONFLICTS
ACTION_DIM = N_LANE_ACT + N_SIGNAL_ACT + N_CONFLICT_ACT

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------


@dataclass
class ControlAction:
    lane: np.ndarray        # (12,)   lane preference per lane
    signal: np.ndarray      # (P+1,)  per-phase green targets, then the switch logit
    conflict: np.ndarray    # (16,)   priority score per crossing-conflict pair

    @classmethod
    def from_vector(cls, a):
        a = np.asarray(a, dtype=float).reshape(-1)
        if a.size != ACTION_DIM:
            raise ValueError(f"action vector must have {ACTION_DIM} entries, got {a.size}")
        i, j = N_LANE_ACT, N_LANE_ACT + N_SIGNAL_ACT
        return cls(a[:i].copy(), a[i:j].copy(), a[j:].copy())

    def to_vector(self):
        return np.concatenate([self.lane, self.signal, self.conflict])


def decode_greens(a_green, bounds: SignalBounds, clearances=None):
    """Map raw values in [-1, 1] to green times in [g_min, g_max].

    If the implied cycle exceeds ``t_max`` (or falls short of ``t_min``) the
    greens are rescaled about ``g_min`` until it fits, never leaving the
    per-phase bounds.
    """
    a = np.clip(np.asarray(a_green, dtype=float), -1.0, 1.0)
    g = bounds.g_min + (a + 1.0) / 2.0 * (bounds.g_max - bounds.g_min)
    clear = np.full(g.size, bounds.c_min) if clearances is None else np.asarray(clearances, dtype=float)
    slack = g - bounds.g_min
    base = float(np.sum(clear)) + bounds.g_min * g.size
    cycle = base + float(np.sum(slack))
    if cycle > bounds.t_max and slack.sum() > 0:
        g = bounds.g_min + slack * max(0.0, bounds.t_max - base) / slack.sum()
    elif cycle < bounds.t_min:
        room = bounds.g_max - g
        if room.sum() > 0:
            g = g + room * min(1.0, (bounds.t_min - cycle) / room.sum())
    return np.clip(g, bounds.g_min, bounds.g_max)


def decode_action(a, bounds: SignalBounds, clearances=None):
    """Raw action vector -> SignalCommand.

    The switch flag is raised when its logit is positive; the signal itself
    ignores the request until the minimum green has elapsed. Conflict scores
    are passed through as box-admission priorities and lane components as
    routing weights.
    """
    act = a if isinstance(a, ControlAction) else ControlAction.from_vector(a)
    greens = decode_greens(act.signal[:N_PHASES], bounds, clearances)
    return SignalCommand(greens=greens, switch=bool(act.signal[N_PHASES] > 0.0),
                         lane_weights=act.lane.copy(), conflict_priority=act.conflict.copy())


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions.

    Observations are stored as raw graph inputs (node features, signal
    context, phase index) so the encoder can be re-run on them as it learns.
    """

    def __init__(self, capacity, action_dim=ACTION_DIM, n_nodes=N_LANES, n_features=N_FEATURES,
                 ctx_dim=SIGNAL_CONTEXT_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.X = np.zeros((capacity, n_nodes, n_features))
        self.ctx = np.zeros((capacity, ctx_dim))
        self.phase = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.X2 = np.zeros((capacity, n_nodes, n_features))
        self.ctx2 = np.zeros((capacity, ctx_dim))
        self.phase2 = np.zeros(capacity, dtype=np.int64)
        self.done = np.zeros(capacity)
        self.ptr = 0
        self.size = 0
        self.pushed = 0

    def __len__(self):
        return self.size

    def push(self, X, ctx, phase, action, reward, X2, ctx2, phase2, done):
        vals = (X, ctx, action, X2, ctx2)
        if not all(np.all(np.isfinite(v)) for v in vals) or not np.isfinite(reward):
            raise ValueError("transition contains non-finite values")
        i = self.ptr
        self.X[i] = X
        self.ctx[i] = ctx
        self.phase[i] = phase
        self.action[i] = action
        self.reward[i] = reward
        self.X2[i] = X2
        self.ctx2[i] = ctx2
        self.phase2[i] = phase2
        self.done[i] = float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def order(self):
        """Storage indices from oldest to newest."""
        start = self.ptr if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, batch_size, rng):
        """Uniform batch of distinct transitions."""
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.batch(idx)

    def batch(self, idx):
        return Batch(self.X[idx], self.ctx[idx], self.phase[idx], self.action[idx], self.reward[idx],
                     self.X2[idx], self.ctx2[idx], self.phase2[idx], self.done[idx])


@dataclass
class Batch:
    X: np.ndarray
    ctx: np.ndarray
    phase: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    X2: np.ndarray
    ctx2: np.ndarray
    phase2: np.ndarray
    done: np.ndarray


# ---------------------------------------------------------------------------
# squashed Gaussian
# ---------------------------------------------------------------------------


def squashed_gaussian(mu, log_std_raw, eps):
    """a = tanh(mu + std * eps) with its log-density.

    ``log_std_raw`` is clamped to [LOG_STD_MIN, LOG_STD_MAX]. The tanh
    correction uses ``log(1 - a^2 + 1e-6)`` with ``|a|`` capped at 1 - 1e-6.
    """
    log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mu + std * eps
    a = np.tanh(u)
    ac = np.clip(a, -1.0 + TANH_EPS, 1.0 - TANH_EPS)
    one_m = 1.0 - ac * ac + TANH_EPS
    logp = np.sum(-0.5 * eps * eps - log_std - 0.5 * _LOG_2PI - np.log(one_m), axis=-1)
    cache = (log_std_raw, std, eps, a, ac, one_m)
    return a, logp, cache


def squashed_gaussian_backward(cache, da, dlogp):
    """Gradients w.r.t. (mu, log_std_raw) given upstream da (B, A) and dlogp (B,)."""
    log_std_raw, std, eps, a, ac, one_m = cache
    inside = (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)
    sech2 = 1.0 - a * a
    capped = np.abs(a) < 1.0 - TANH_EPS
    # d/du of -log(1 - a^2 + eps) = 2 a (1 - a^2) / (1 - a^2 + eps)
    dcorr = np.where(capped, 2.0 * ac * sech2 / one_m, 0.0)
    dlogp = np.asarray(dlogp, dtype=float)[..., None]
    du = da * sech2 + dlogp * dcorr
    dmu = du
    dls = (du * std * eps - dlogp) * inside
    return dmu, dls


def log_prob_of_action(a, mu, log_std_raw):
    """Log-density of a given squashed action under the policy (inverse tanh)."""
    log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
    ac = np.clip(a, -1.0 + TANH_EPS, 1.0 - TANH_EPS)
    u = np.arctanh(ac)
    eps = (u - mu) / np.exp(log_std)
    return np.sum(-0.5 * eps * eps - log_std - 0.5 * _LOG_2PI - np.log(1.0 - ac * ac + TANH_EPS), axis=-1)


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------


def critic_target(reward, done, q1_next, q2_next, logp_next, alpha, gamma):
    """y = r + gamma (1 - d) (min(Q1', Q2') - alpha log pi(a'|s'))."""
    soft = np.minimum(q1_next, q2_next) - alpha * logp_next
    return reward + gamma * (1.0 - done) * soft


def critic_loss(q1, q2, y):
    """Sum over both critics of the mean squared Bellman residual, plus output gradients."""
    r1 = q1 - y
    r2 = q2 - y
    n = y.shape[0]
    loss = float(np.mean(r1 * r1) + np.mean(r2 * r2))
    return loss, 2.0 * r1 / n, 2.0 * r2 / n


def actor_loss(logp, q1, q2, alpha):
    """mean(alpha log pi - min(Q1, Q2)); also returns which critic was the minimum."""
    first = q1 <= q2
    qmin = np.where(first, q1, q2)
    return float(np.mean(alpha * logp - qmin)), first


def temperature_grad(log_alpha, logp, target_entropy):
    """Loss -mean(alpha (log pi + H_target)) and its derivative w.r.t. log alpha."""
    alpha = math.exp(log_alpha)
    m = float(np.mean(logp + target_entropy))
    return -alpha * m, -alpha * m


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


_READOUT = np.stack([readout_matrix(k) for k in range(N_PHASES)])


def observation(Z, ctx, phase):
    """Pooled embeddings (mean, current-phase, next-phase) concatenated with signal context."""
    B, N, D = Z.shape
    R = _READOUT[np.asarray(phase, dtype=np.int64)]
    pooled = (R @ Z).reshape(B, READOUT_ROWS * D)
    return np.concatenate([pooled, ctx], axis=1)


def observation_backward(dobs, phase, D):
    B = dobs.shape[0]
    R = _READOUT[np.asarray(phase, dtype=np.int64)]
    dpooled = dobs[:, :READOUT_ROWS * D].reshape(B, READOUT_ROWS, D)
    return R.transpose(0, 2, 1) @ dpooled


@dataclass
class SACConfig:
    lr: float = 3e-5
    tau: float = 0.005
    gamma: float = 0.95
    batch_size: int = 64
    target_entropy: float = -4.0
    entropy_multiplier: float = 1.0
    init_alpha: float = 0.2
    alpha_lr: float = 3e-4
    warmup: int = 1000
    buffer_size: int = 100_000
    grad_clip: float = 1.0
    hidden_dim: int = 128
    gat_hidden: int = 128
    gat_dropout: float = 0.3
    reward_scale: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("lr", "alpha_lr", "init_alpha", "reward_scale", "entropy_multiplier"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "buffer_size", "hidden_dim", "gat_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not 0.0 <= self.gat_dropout < 1.0:
            raise ValueError("gat_dropout must lie in [0, 1)")

    @property
    def effective_target_entropy(self):
        return self.entropy_multiplier * self.target_entropy

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k in known:
                out[k] = int(v) if known[k] == "int" else float(v)
        return cls(**out)


class SACAgent:
    """Encoder, actor, twin critics, their targets and the temperature."""

    def __init__(self, config: SACConfig | None = None, seed=0, action_dim=ACTION_DIM):
        self.config = config or SACConfig()
        c = self.config
        rng = np.random.default_rng(seed)
        self.action_dim = action_dim
        self.encoder = GATNetwork(N_FEATURES, c.gat_hidden, (4, 1), 0.2, c.gat_dropout, rng=rng)
        self.emb_dim = self.encoder.out_dim
        self.obs_dim = READOUT_ROWS * self.emb_dim + SIGNAL_CONTEXT_DIM
        h = c.hidden_dim
        self.actor = MLP([self.obs_dim, h, h, 2 * action_dim], "elu", rng, "pi", out_scale=0.1)
        self.critic_store = ParamStore()
        self.q1 = MLP([self.obs_dim + action_dim, h, h, 1], "elu", rng, "q1", store=self.critic_store)
        self.q2 = MLP([self.obs_dim + action_dim, h, h, 1], "elu", rng, "q2", store=self.critic_store)
        self.target_store = self.critic_store.copy()
        self.temperature = ParamStore()
        self.temperature.add("log_alpha", np.array([math.log(c.init_alpha)]))
        self.mask = adjacency_mask()
        self.updates = 0

    # -------------------------------------------------------------- helpers
    @property
    def alpha(self):
        return float(math.exp(self.temperature["log_alpha"][0]))

    def stores(self):
        return {"encoder": self.encoder.params, "actor": self.actor.params, "critic": self.critic_store,
                "target": self.target_store, "temperature": self.temperature}

    def observe(self, X, ctx, phase):
        """Deterministic (dropout-free) observation vectors for a batch of graphs."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2
        if single:
            X, ctx, phase = X[None], np.asarray(ctx)[None], np.atleast_1d(phase)
        Z, _ = self.encoder.forward(X, self.mask)
        obs = observation(Z, np.asarray(ctx, dtype=float), phase)
        return (obs[0], Z[0]) if single else (obs, Z)

    def policy(self, obs):
        out, cache = self.actor.forward(obs)
        return out[..., :self.action_dim], out[..., self.action_dim:], cache

    def q_values(self, obs, a, params=None):
        inp = np.concatenate([obs, a], axis=-1)
        q1, c1 = self.q1.forward(inp, params)
        q2, c2 = self.q2.forward(inp, params)
        return q1[:, 0], q2[:, 0], (c1, c2)

    def act(self, X, ctx, phase, rng=None, deterministic=False):
        """Squashed action for one observation."""
        obs, _ = self.observe(X, ctx, phase)
        mu, ls, _ = self.policy(obs[None])
        if deterministic:
            return np.tanh(mu[0])
        rng = np.random.default_rng() if rng is None else rng
        a, _, _ = squashed_gaussian(mu, ls, rng.standard_normal(mu.shape))
        return a[0]

    # --------------------------------------------------------------- losses
    def target_values(self, batch: Batch, rng):
        """Soft Bellman targets from the target critics at freshly sampled next actions."""
        c = self.config
        obs2, _ = self.observe(batch.X2, batch.ctx2, batch.phase2)
        mu2, ls2, _ = self.policy(obs2)
        a2, logp2, _ = squashed_gaussian(mu2, ls2, rng.standard_normal(mu2.shape))
        tq1, tq2, _ = self.q_values(obs2, a2, self.target_store.values)
        return critic_target(c.reward_scale * batch.reward, batch.done, tq1, tq2, logp2, self.alpha, c.gamma)

    def critic_grads(self, batch: Batch, y, rng=None, train=True):
        """Critic loss with gradients for both critics and the encoder.

        Returns ``(loss, critic_grads, encoder_grads, obs)`` where ``obs`` is
        the observation batch produced by this (possibly dropout) pass.
        """
        Z, gcache = self.encoder.forward(batch.X, self.mask, train=train, rng=rng)
        obs = observation(Z, batch.ctx, batch.phase)
        q1, q2, (c1, c2) = self.q_values(obs, batch.action)
        lq, dq1, dq2 = critic_loss(q1, q2, y)
        din1, g1 = self.q1.backward(c1, dq1[:, None])
        din2, g2 = self.q2.backward(c2, dq2[:, None])
        dobs = (din1 + din2)[:, :self.obs_dim]
        genc = self.encoder.backward(gcache, observation_backward(dobs, batch.phase, self.emb_dim))
        grads = dict(g1)
        grads.update(g2)
        return lq, grads, genc, obs

    def actor_grads(self, obs, eps, alpha=None):
        """Actor loss mean(alpha log pi - min Q) at reparameterised actions; critics held fixed."""
        alpha = self.alpha if alpha is None else alpha
        B = obs.shape[0]
        mu, ls, acache = self.policy(obs)
        a_new, logp, scache = squashed_gaussian(mu, ls, eps)
        q1, q2, (n1, n2) = self.q_values(obs, a_new)
        loss, first = actor_loss(logp, q1, q2, alpha)
        dq = -1.0 / B
        d1, _ = self.q1.backward(n1, np.where(first, dq, 0.0)[:, None], need_param_grads=False)
        d2, _ = self.q2.backward(n2, np.where(first, 0.0, dq)[:, None], need_param_grads=False)
        da = (d1 + d2)[:, self.obs_dim:]
        dmu, dls = squashed_gaussian_backward(scache, da, np.full(B, alpha / B))
        _, grads = self.actor.backward(acache, np.concatenate([dmu, dls], axis=1))
        return loss, grads, logp

    # --------------------------------------------------------------- update
    def update(self, batch: Batch, rng):
        """One critic, actor, temperature and target update. Returns the losses.

        Returns None (and changes nothing) when a loss is non-finite.
        """
        c = self.config
        # non-finite values are detected below, numpy need not warn about them
        with np.errstate(invalid="ignore", over="ignore"):
            y = self.target_values(batch, rng)
            lq, gq, genc, obs = self.critic_grads(batch, y, rng)
            # the actor works on the observation as a fixed input, before the critic step
            lpi, gpi, logp = self.actor_grads(obs, rng.standard_normal((obs.shape[0], self.action_dim)))
        if not (np.isfinite(lq) and np.isfinite(lpi)):
            logger.warning("non-finite loss (critic %r, actor %r); update skipped", lq, lpi)
            return None
        self.critic_store.accumulate(gq)
        self.encoder.params.accumulate(genc)
        self.actor.params.accumulate(gpi)
        adam_update(self.critic_store, c.lr, grad_clip=c.grad_clip)
        adam_update(self.encoder.params, c.lr, grad_clip=c.grad_clip)
        adam_update(self.actor.params, c.lr, grad_clip=c.grad_clip)

        la = float(self.temperature["log_alpha"][0])
        lalpha, g_la = temperature_grad(la, logp, c.effective_target_entropy)
        self.temperature.accumulate({"log_alpha": np.array([g_la])})
        adam_update(self.temperature, c.alpha_lr)

        soft_update(self.critic_store, self.target_store, c.tau)
        self.updates += 1
        return {"critic_loss": lq, "actor_loss": lpi, "alpha_loss": lalpha, "alpha": self.alpha,
                "entropy": float(-np.mean(logp))}
