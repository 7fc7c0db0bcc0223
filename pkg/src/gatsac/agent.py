"""GAT-SAC signal controller: training loop, evaluation policy and checkpoints."""

from __future__ import annotations

import csv
import logging
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import EpisodeMetrics, TrafficEnv
from .gat import assign_lane_types
from .neural import CheckpointError, load_checkpoint, save_checkpoint
from .objectives import CostWeights
from .sac import ACTION_DIM, N_LANE_ACT, ReplayBuffer, SACAgent, SACConfig, decode_action
from .sim.config import SimConfig, dump_config, parse_config_text

logger = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "reward", "normalized_reward", "reference_reward", "throughput", "delay",
                  "delay_cav", "delay_hdv", "violations", "critic_loss", "actor_loss", "alpha", "entropy",
                  "updates")
# objective weights used to compare runs trained with different weights
REFERENCE_WEIGHTS = CostWeights()
MAX_CONSECUTIVE_SKIPS = 3


class TrainingError(RuntimeError):
    """Training aborted after repeated non-finite losses."""


def episode_seed(base, episode):
    """Independent per-episode simulator seed derived from the run seed."""
    return int(np.random.SeedSequence([int(base), int(episode)]).generate_state(1)[0])


class GATSACController(BaseEstimator):
    """Signal controller trained with soft actor-critic on graph-attention embeddings.

    Hyperparameters are constructor arguments (so ``get_params`` /
    ``set_params`` work). ``fit`` trains on a scenario, the fitted object then
    acts as an evaluation controller with the deterministic policy.

    Args:
        lr: Adam learning rate for encoder, actor and critics.
        tau: target-network averaging rate.
        gamma: discount factor.
        batch_size: minibatch size.
        target_entropy: base target entropy (multiplied by ``entropy_multiplier``).
        init_alpha: initial temperature.
        alpha_lr: learning rate of the log-temperature.
        warmup: number of uniform-random steps collected before updates begin.
        reward_scale: factor applied to rewards inside the learner only.
        w_d, w_f, w_s: objective weights of the cost.
        random_state: seed for networks, exploration and episode seeds.
    """

    def __init__(self, lr=3e-5, tau=0.005, gamma=0.95, batch_size=64, target_entropy=-4.0,
                 entropy_multiplier=1.0, init_alpha=0.2, alpha_lr=3e-4, warmup=1000,
                 buffer_size=100_000, grad_clip=1.0, hidden_dim=128, gat_hidden=128, gat_dropout=0.3,
                 reward_scale=0.05, w_d=1.0, w_f=0.5, w_s=2.0, random_state=0):
        self.lr = lr
        self.tau = tau
        self.gamma = gamma
        self.batch_size = batch_size
        self.target_entropy = target_entropy
        self.entropy_multiplier = entropy_multiplier
        self.init_alpha = init_alpha
        self.alpha_lr = alpha_lr
        self.warmup = warmup
        self.buffer_size = buffer_size
        self.grad_clip = grad_clip
        self.hidden_dim = hidden_dim
        self.gat_hidden = gat_hidden
        self.gat_dropout = gat_dropout
        self.reward_scale = reward_scale
        self.w_d = w_d
        self.w_f = w_f
        self.w_s = w_s
        self.random_state = random_state

    # ------------------------------------------------------------ config
    def sac_config(self):
        return SACConfig(lr=self.lr, tau=self.tau, gamma=self.gamma, batch_size=int(self.batch_size),
                         target_entropy=self.target_entropy, entropy_multiplier=self.entropy_multiplier,
                         init_alpha=self.init_alpha, alpha_lr=self.alpha_lr, warmup=int(self.warmup),
                         buffer_size=int(self.buffer_size), grad_clip=self.grad_clip,
                         hidden_dim=int(self.hidden_dim), gat_hidden=int(self.gat_hidden),
                         gat_dropout=self.gat_dropout, reward_scale=self.reward_scale)

    def cost_weights(self):
        return CostWeights(w_d=self.w_d, w_f=self.w_f, w_s=self.w_s)

    def _init_agent(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        self.agent_ = SACAgent(self.sac_config(), seed=seed)
        self.rng_ = np.random.default_rng([seed, 1])
        self.buffer_ = ReplayBuffer(int(self.buffer_size))
        self.total_steps_ = 0
        self.history_ = []
        self.episodes_done_ = 0
        self._skips = 0

    # ------------------------------------------------------------ acting
    def _channelize(self, env, X, a_lane):
        _, Z = self.agent_.observe(X, env.sim.signal.context(), env.sim.signal.phase_index)
        logits = self.agent_.encoder.lane_type_logits(Z, a_lane)
        env.set_lane_types(assign_lane_types(logits))

    def _command(self, env, graph, a):
        if env.channelization_due():
            self._channelize(env, graph.features, a[:N_LANE_ACT])
        return decode_action(a, env.sim.bounds, env.sim.signal.clearances)

    def begin_episode(self, env):
        check_is_fitted(self, "agent_")
        env.sim.set_lane_types(["mixed"] * len(env.sim.lanes))

    def act(self, env, graph):
        """Deterministic evaluation action as a SignalCommand."""
        a = self.agent_.act(graph.features, graph.signal_context, graph.phase_index, deterministic=True)
        return self._command(env, graph, a)

    def predict(self, X, ctx, phase):
        """Deterministic raw actions (n, 33) for batches of node features, contexts and phases."""
        check_is_fitted(self, "agent_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X, ctx, phase = X[None], np.asarray(ctx)[None], np.atleast_1d(phase)
        obs, _ = self.agent_.observe(X, ctx, phase)
        mu, _, _ = self.agent_.policy(obs)
        return np.tanh(mu)

    # ----------------------------------------------------------- training
    def fit(self, X=None, y=None, episodes=300, metrics_path=None, callback=None, horizon=None):
        """Train on scenario ``X`` (a SimConfig, default scenario if None).

        ``callback(episode_index, metrics_row)`` may return True to stop early.
        Calling ``fit`` again continues training the same networks.
        """
        config = X if X is not None else SimConfig()
        if not isinstance(config, SimConfig):
            raise TypeError("fit expects a SimConfig scenario")
        if not hasattr(self, "agent_"):
            self._init_agent()
        env = TrafficEnv(config, self.cost_weights(), horizon=horizon)
        writer = fh = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
        try:
            for _ in range(int(episodes)):
                row = self._train_episode(env, config)
                self.history_.append(row)
                if writer:
                    writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
                    fh.flush()
                if callback is not None and callback(row["episode"], row):
                    break
        finally:
            if fh:
                fh.close()
        return self

    def _train_episode(self, env, config):
        agent = self.agent_
        c = agent.config
        ep = self.episodes_done_
        t0 = time.perf_counter()
        graph = env.reset(episode_seed(config.rng_seed + 7919 * int(self.random_state or 0), ep))
        env.sim.set_lane_types(["mixed"] * len(env.sim.lanes))
        losses = []
        done = False
        while not done:
            X, ctx, ph = graph.features, graph.signal_context, graph.phase_index
            if self.total_steps_ < c.warmup:
                a = self.rng_.uniform(-1.0, 1.0, ACTION_DIM)
            else:
                a = agent.act(X, ctx, ph, rng=self.rng_)
            res = env.step(self._command(env, graph, a))
            nxt = res.graph
            # reaching the horizon is a time limit, not a terminal state
            self.buffer_.push(X, ctx, ph, a, res.cost.reward, nxt.features, nxt.signal_context,
                              nxt.phase_index, 0.0)
            self.total_steps_ += 1
            graph = nxt
            done = res.done
            if len(self.buffer_) > c.warmup and len(self.buffer_) >= c.batch_size:
                out = agent.update(self.buffer_.sample(c.batch_size, self.rng_), self.rng_)
                if out is None:
                    self._skips += 1
                    if self._skips >= MAX_CONSECUTIVE_SKIPS:
                        raise TrainingError(
                            f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite updates at step "
                            f"{self.total_steps_} (alpha={agent.alpha:.4g})")
                else:
                    self._skips = 0
                    losses.append(out)
        m: EpisodeMetrics = env.metrics()
        self.episodes_done_ += 1
        row = {
            "episode": ep + 1,
            "reward": m.reward,
            "normalized_reward": m.normalized_reward,
            "reference_reward": m.normalized_reward_under(REFERENCE_WEIGHTS),
            "throughput": m.throughput,
            "delay": m.avg_delay,
            "delay_cav": m.delay_cav,
            "delay_hdv": m.delay_hdv,
            "violations": m.violations,
            "critic_loss": float(np.mean([l["critic_loss"] for l in losses])) if losses else float("nan"),
            "actor_loss": float(np.mean([l["actor_loss"] for l in losses])) if losses else float("nan"),
            "alpha": agent.alpha,
            "entropy": float(np.mean([l["entropy"] for l in losses])) if losses else float("nan"),
            "steps": m.steps,
            "updates": len(losses),
            "seconds": time.perf_counter() - t0,
        }
        logger.info("episode %d reward %.2f delay %.2f updates %d", row["episode"], m.reward, m.avg_delay,
                    len(losses))
        return row

    # ---------------------------------------------------------- checkpoints
    def save(self, path, scenario: SimConfig | None = None):
        """Write networks, optimizer state, hyperparameters and (optionally) the training scenario."""
        check_is_fitted(self, "agent_")
        meta = {f"param.{k}": v for k, v in self.get_params().items() if v is not None}
        meta["episodes_done"] = self.episodes_done_
        meta["total_steps"] = self.total_steps_
        if scenario is not None:
            meta["scenario"] = dump_config(scenario)
        save_checkpoint(path, self.agent_.stores(), meta)

    @classmethod
    def load(cls, path):
        """Rebuild a controller from a checkpoint written by ``save``.

        ``scenario_`` holds the stored training scenario as a dict of config
        values (empty if none was saved).
        """
        try:
            data = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        with data:
            params = {k[len("__meta__/param."):]: data[k][()] for k in data.files
                      if k.startswith("__meta__/param.")}
        defaults = cls().get_params()
        kwargs = {}
        for k, v in params.items():
            if k in defaults:
                kwargs[k] = type(defaults[k])(v) if defaults[k] is not None else int(v)
        est = cls(**kwargs)
        est._init_agent()
        meta = load_checkpoint(path, est.agent_.stores())
        est.episodes_done_ = int(meta.get("episodes_done", 0))
        est.total_steps_ = int(meta.get("total_steps", 0))
        est.scenario_ = parse_config_text(str(meta["scenario"])) if "scenario" in meta else {}
        return est


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


_INT_COLUMNS = ("episode", "throughput", "violations", "updates")


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in _INT_COLUMNS else float(v)) for k, v in r.items()} for r in rows]
