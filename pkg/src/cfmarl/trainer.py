"""Multi-agent trainer: replay, per-agent mixed critics, a global extrinsic
critic, stochastic policy updates on the permutation actor, and meta-gradient
updates of the reward networks.

Update order per round follows the training algorithm: mixed critics first,
then the actor, then the extrinsic critic, then the reward nets. The actor
ascends tau_a * clip(grad(mean log pi * advantage)); critics and reward nets
use Adam. All target networks trail their online copies by polyak(tau_a).

The reward-net update is the first-order meta-gradient: differentiate the
post-update policy parameters through the advantage (the gradient-of-log-pi
factor is treated as constant), then ascend the extrinsic critic's score of
the post-update policy. The directional derivatives it needs are evaluated
with central differences along a single direction, so no second-order graph
is ever built.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import env as envmod
from . import gnn as gnnmod
from . import policy as polmod
from . import rewards as rewmod
from .autodiff import Tensor
from .optim import Adam, ParamSet, clip_by_global_norm, global_norm, polyak_update
from .rng import RngStream

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient poisons an update."""


@dataclass
class TrainerConfig:
    episodes: int = 300
    gamma: float = 0.99
    tau_a: float = 0.01            # policy step size and soft update rate
    lr: float = 0.01               # Adam rate for critics and reward nets
    grad_clip: float = 0.5
    batch_size: int = 1024
    replay_capacity: int = 60000
    update_every: int = 1          # env slots between update rounds
    warmup_episodes: int = 10
    explore_sigma: float = 0.1
    explore_decay: float = 0.999
    gumbel_temperature: float = 1.0
    gumbel_decay: float = 0.999
    gumbel_floor: float = 0.1
    policy_gradient: str = "stochastic"   # or "deterministic"
    advantage_reward: str = "mixed"       # or "extrinsic" (the literal TD form)
    use_intrinsic: bool = True
    action_mode: str = "joint"            # "pi-only" ignores the power heads
    arn_update_every: int = 10
    arn_meta_batch: int = 16
    critic_hidden: tuple = (128, 64)
    plateau_window: int = 200      # episodes without improvement before stopping
    checkpoint_every: int = 100
    log_se_every: int = 1


# -- replay -------------------------------------------------------------------------

class ReplayPool:
    """Fixed-capacity ring buffer over transition fields, uniform sampling."""

    def __init__(self, capacity: int, num_agents: int, obs_shape: tuple,
                 action_dim: int, state_dim: int, hidden_shape: tuple):
        self.capacity = capacity
        self.size = 0
        self.head = 0
        l = num_agents
        self.obs = np.zeros((capacity, l) + obs_shape)
        self.next_obs = np.zeros((capacity, l) + obs_shape)
        self.state = np.zeros((capacity, state_dim))
        self.next_state = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, l, action_dim))
        self.presquash = np.zeros((capacity, l, action_dim))
        self.r_ex = np.zeros((capacity, l))
        self.r_m = np.zeros((capacity, l))
        self.hidden = np.zeros((capacity,) + hidden_shape)
        self.next_hidden = np.zeros((capacity,) + hidden_shape)
        self.done = np.zeros(capacity)

    def add(self, **fields):
        i = self.head
        for name, value in fields.items():
            getattr(self, name)[i] = value
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: RngStream) -> dict:
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {name: getattr(self, name)[idx] for name in
                ("obs", "next_obs", "state", "next_state", "actions", "presquash",
                 "r_ex", "r_m", "hidden", "next_hidden", "done")}


# -- critics -------------------------------------------------------------------------

def init_critic(in_dim: int, hidden: tuple, rng: RngStream) -> ParamSet:
    ps = ParamSet()
    polmod.init_mlp(ps, "q", (in_dim, *hidden, 1), rng, out_scale=0.1)
    return ps


def critic_value(ps: ParamSet, x) -> Tensor:
    out = polmod.mlp_forward(ps, "q", ad.as_tensor(x),
                             activation=lambda t: ad.leaky_relu(t, 0.01))
    return ad.reshape(out, out.shape[:-1])


# -- advantage ------------------------------------------------------------------------

def advantage(reward, v_now, v_next, gamma: float, done=0.0):
    """Standard TD advantage r + gamma * V(o') - V(o); bootstrap cut at done."""
    return reward + gamma * (1.0 - done) * v_next - v_now


# -- trainer --------------------------------------------------------------------------

class Trainer:
    def __init__(self, env_config: envmod.EnvConfig, policy_config: polmod.PolicyConfig,
                 trainer_config: TrainerConfig, rng: RngStream,
                 reward_config: rewmod.RewardNetConfig | None = None):
        self.env_cfg = env_config
        self.pol_cfg = policy_config
        self.cfg = trainer_config
        self.rng = rng
        l = env_config.num_aps
        self.num_agents = l
        obs_dim = env_config.num_ues * env_config.feature_dim
        act_dim = env_config.action_dim
        self.obs_dim, self.act_dim = obs_dim, act_dim

        self.policy = polmod.init_policy_params(policy_config, rng.derive(1))
        self.policy_target = self.policy.copy_values()
        self.critics = [init_critic(obs_dim + act_dim, trainer_config.critic_hidden,
                                    rng.derive(2, i)) for i in range(l)]
        self.critic_targets = [c.copy_values() for c in self.critics]
        self.critic_opts = [Adam(c, lr=trainer_config.lr) for c in self.critics]
        self.extrinsic = init_critic(l * (obs_dim + act_dim),
                                     trainer_config.critic_hidden, rng.derive(3))
        self.extrinsic_target = self.extrinsic.copy_values()
        self.extrinsic_opt = Adam(self.extrinsic, lr=trainer_config.lr)

        if reward_config is None:
            reward_config = rewmod.RewardNetConfig(obs_dim=obs_dim, action_dim=act_dim)
        self.rew_cfg = reward_config
        self.rewards = rewmod.init_reward_params(reward_config, rng.derive(4))
        self.reward_opt = Adam(self.rewards, lr=trainer_config.lr)

        hidden_shape = self._hidden_shape()
        self.pool = ReplayPool(trainer_config.replay_capacity, l,
                               (env_config.num_ues, env_config.feature_dim),
                               act_dim, self._state_dim(), hidden_shape)
        self.sample_rng = rng.derive(5)
        self.sigma = trainer_config.explore_sigma
        self.temperature = trainer_config.gumbel_temperature
        self.rounds = 0
        self.history: list[dict] = []
        self.first_order_logged = False

    def _hidden_shape(self):
        l = self.num_agents
        if self.pol_cfg.actor == "mlp":
            return (l, 1)
        if self.pol_cfg.backbone == "rnn":
            return (l, self.pol_cfg.d_r)
        return (l, l)

    def _state_dim(self):
        c = self.env_cfg
        return 2 * c.num_aps + 2 * c.num_ues + c.num_aps * c.num_ues

    # -- rollout helpers ---------------------------------------------------------

    def initial_hidden(self, state: envmod.EnvState) -> np.ndarray:
        if self.pol_cfg.actor != "mlp" and self.pol_cfg.backbone == "gnn":
            return gnnmod.initial_adjacency(state.geometry.ap_positions,
                                            self.pol_cfg.gnn)
        return np.zeros(self._hidden_shape())

    def _env_actions(self, raw: np.ndarray) -> list:
        acts = [envmod.ActionVector.from_raw(raw[m], self.env_cfg.num_ues,
                                             self.env_cfg.num_antennas)
                for m in range(self.num_agents)]
        if self.cfg.action_mode == "pi-only":
            k, n = self.env_cfg.num_ues, self.env_cfg.num_antennas
            acts = [envmod.ActionVector(mobility=a.mobility, ap_power=1.0,
                                        power_split=np.full(k, 1.0 / k),
                                        antenna_weights=np.full(n, 1.0 / n))
                    for a in acts]
        return acts

    def _target_policy_actions(self, obs: np.ndarray, hidden: np.ndarray) -> np.ndarray:
        out = polmod.act(self.policy_target, obs, hidden, self.pol_cfg, mode="eval")
        env_actions = out.env_actions
        return env_actions

    # -- update rounds ---------------------------------------------------------------

    def update_round(self) -> dict:
        try:
            return self._update_round()
        except ad.GradientError as exc:
            self._abort(str(exc), {})

    def _update_round(self) -> dict:
        batch = self.pool.sample(self.cfg.batch_size, self.sample_rng)
        metrics = {}
        a_next = self._target_policy_actions(batch["next_obs"], batch["next_hidden"])
        a_now_t = self._target_policy_actions(batch["obs"], batch["hidden"])

        q_next = np.stack([self._critic_values(self.critic_targets[l],
                                               batch["next_obs"][:, l], a_next[:, l])
                           for l in range(self.num_agents)], axis=1)
        q_now_t = np.stack([self._critic_values(self.critic_targets[l],
                                                batch["obs"][:, l], a_now_t[:, l])
                            for l in range(self.num_agents)], axis=1)

        metrics["critic_loss"] = self._update_mixed_critics(batch, q_next)
        metrics.update(self._update_policy(batch, q_now_t, q_next))
        metrics["extrinsic_loss"] = self._update_extrinsic(batch, a_next)
        if (self.cfg.use_intrinsic and self.cfg.policy_gradient == "stochastic"
                and self.rounds % self.cfg.arn_update_every == 0):
            metrics["reward_grad_norm"] = self.update_reward_nets()
        self._soft_updates()
        self.temperature = max(self.cfg.gumbel_floor,
                               self.temperature * self.cfg.gumbel_decay)
        self.rounds += 1
        for name, value in metrics.items():
            if not np.isfinite(value):
                self._abort(f"non-finite {name}", metrics)
        return metrics

    def _critic_values(self, ps: ParamSet, obs, actions) -> np.ndarray:
        x = np.concatenate([obs.reshape(obs.shape[0], -1), actions], axis=-1)
        frozen = ParamSet((k, v.detach()) for k, v in ps.items())
        return critic_value(frozen, x).value

    def _update_mixed_critics(self, batch, q_next) -> float:
        total = 0.0
        gamma, done = self.cfg.gamma, batch["done"]
        for l in range(self.num_agents):
            y = batch["r_m"][:, l] + gamma * (1.0 - done) * q_next[:, l]
            x = np.concatenate([batch["obs"][:, l].reshape(len(y), -1),
                                batch["actions"][:, l]], axis=-1)
            q = critic_value(self.critics[l], x)
            loss = ad.mean(ad.square(ad.sub(q, Tensor(y))))
            grads = ad.grad(loss, self.critics[l].tensors())
            grads, _ = clip_by_global_norm(grads, self.cfg.grad_clip)
            self.critic_opts[l].step(dict(zip(self.critics[l].keys(), grads)))
            total += loss.item()
        return total / self.num_agents

    def _policy_obs_hidden(self, batch):
        obs = Tensor(batch["obs"])
        if self.pol_cfg.actor != "mlp" and self.pol_cfg.backbone == "gnn":
            hidden = batch["hidden"]
        else:
            hidden = Tensor(batch["hidden"])
        return obs, hidden

    def _update_policy(self, batch, q_now_t, q_next) -> dict:
        if self.cfg.policy_gradient == "deterministic":
            return self._update_policy_deterministic(batch)
        reward = batch["r_m"] if self.cfg.advantage_reward == "mixed" else batch["r_ex"]
        adv = advantage(reward, q_now_t, q_next, self.cfg.gamma,
                        batch["done"][:, None])
        obs, hidden = self._policy_obs_hidden(batch)
        means, _ = polmod.policy_means(self.policy, obs, hidden, self.pol_cfg,
                                       mode="train", rng=self.rng.derive(6, self.rounds),
                                       temperature=self.temperature)
        lp = polmod.log_prob(means, batch["presquash"], max(self.sigma, 1e-3))
        objective = ad.mean(ad.mul(lp, Tensor(adv)))
        grads = ad.grad(objective, self.policy.tensors())
        grads, raw_norm = clip_by_global_norm(grads, self.cfg.grad_clip)
        for p, g in zip(self.policy.tensors(), grads):
            p.value += self.cfg.tau_a * g
        return {"policy_grad_norm": raw_norm, "advantage_mean": float(adv.mean())}

    def _update_policy_deterministic(self, batch) -> dict:
        obs, hidden = self._policy_obs_hidden(batch)
        means, _ = polmod.policy_means(self.policy, obs, hidden, self.pol_cfg,
                                       mode="train", rng=self.rng.derive(6, self.rounds),
                                       temperature=self.temperature)
        mob = ad.tanh(means[..., :2])
        acts = ad.concatenate([mob, means[..., 2:]], axis=-1)
        scores = []
        for l in range(self.num_agents):
            frozen = ParamSet((k, v.detach()) for k, v in self.critics[l].items())
            obs_flat = Tensor(batch["obs"][:, l].reshape(len(batch["done"]), -1))
            x = ad.concatenate([obs_flat, acts[:, l]], axis=-1)
            scores.append(critic_value(frozen, x))
        objective = ad.mean(ad.concatenate([ad.reshape(s, (-1, 1)) for s in scores],
                                           axis=-1))
        grads = ad.grad(objective, self.policy.tensors())
        grads, raw_norm = clip_by_global_norm(grads, self.cfg.grad_clip)
        for p, g in zip(self.policy.tensors(), grads):
            p.value += self.cfg.tau_a * g
        return {"policy_grad_norm": raw_norm, "advantage_mean": 0.0}

    def _update_extrinsic(self, batch, a_next) -> float:
        gamma, done = self.cfg.gamma, batch["done"]
        b = len(done)
        r_total = batch["r_ex"].sum(axis=1)
        x_next = np.concatenate([batch["next_obs"].reshape(b, -1),
                                 a_next.reshape(b, -1)], axis=-1)
        frozen = ParamSet((k, v.detach()) for k, v in self.extrinsic_target.items())
        y = r_total + gamma * (1.0 - done) * critic_value(frozen, x_next).value
        x = np.concatenate([batch["obs"].reshape(b, -1),
                            batch["actions"].reshape(b, -1)], axis=-1)
        q = critic_value(self.extrinsic, x)
        loss = ad.mean(ad.square(ad.sub(q, Tensor(y))))
        grads = ad.grad(loss, self.extrinsic.tensors())
        grads, _ = clip_by_global_norm(grads, self.cfg.grad_clip)
        self.extrinsic_opt.step(dict(zip(self.extrinsic.keys(), grads)))
        return loss.item()

    # -- reward-net meta update --------------------------------------------------------

    def update_reward_nets(self) -> float:
        """First-order meta-gradient ascent on the extrinsic critic's score of
        the post-inner-step policy. The inner step treats grad(log pi) as
        constant; the log has it on record."""
        if not self.first_order_logged:
            log.info("reward-net updates use the first-order meta-gradient "
                     "(stop-gradient on grad log pi)")
            self.first_order_logged = True
        cfg = self.cfg
        batch = self.pool.sample(min(cfg.arn_meta_batch, self.pool.size),
                                 self.sample_rng)
        b = len(batch["done"])

        a_next = self._target_policy_actions(batch["next_obs"], batch["next_hidden"])
        a_now_t = self._target_policy_actions(batch["obs"], batch["hidden"])
        q_next = np.stack([self._critic_values(self.critic_targets[l],
                                               batch["next_obs"][:, l], a_next[:, l])
                           for l in range(self.num_agents)], axis=1)
        q_now = np.stack([self._critic_values(self.critic_targets[l],
                                              batch["obs"][:, l], a_now_t[:, l])
                          for l in range(self.num_agents)], axis=1)

        obs_flat = batch["obs"].reshape(b, self.num_agents, -1)

        def advantage_graph() -> Tensor:
            r_in = rewmod.intrinsic_rewards(self.rewards, obs_flat,
                                            batch["actions"], self.rew_cfg)
            r_m = rewmod.mix_rewards(self.rewards, r_in, batch["r_ex"])
            base = Tensor(self.cfg.gamma * (1.0 - batch["done"][:, None]) * q_next - q_now)
            return ad.add(r_m, base)

        # inner step at current reward-net values
        adv_values = advantage_graph().value
        obs_t, hidden_t = self._policy_obs_hidden(batch)
        means, _ = polmod.policy_means(self.policy, obs_t, hidden_t, self.pol_cfg,
                                       mode="train",
                                       rng=self.rng.derive(7, self.rounds),
                                       temperature=self.temperature)
        lp = polmod.log_prob(means, batch["presquash"], max(self.sigma, 1e-3))
        inner = ad.mean(ad.mul(lp, Tensor(adv_values)))
        g_inner = ad.grad(inner, self.policy.tensors())
        g_inner, _ = clip_by_global_norm(g_inner, cfg.grad_clip)

        theta_prime = ParamSet()
        for (name, p), g in zip(self.policy.items(), g_inner):
            theta_prime[name] = Tensor(p.value + cfg.tau_a * g, requires_grad=True)

        # outer objective: extrinsic critic's view of the post-update policy
        def outer_value(params: ParamSet):
            m, _ = polmod.policy_means(params, Tensor(batch["obs"]),
                                       self._frozen_hidden(batch), self.pol_cfg,
                                       mode="eval")
            mob = ad.tanh(m[..., :2])
            acts = ad.concatenate([mob, m[..., 2:]], axis=-1)
            acts_flat = ad.reshape(acts, (b, self.num_agents * self.act_dim))
            x = ad.concatenate([Tensor(batch["obs"].reshape(b, -1)), acts_flat], axis=-1)
            frozen_q = ParamSet((k, v.detach()) for k, v in self.extrinsic.items())
            return ad.mean(critic_value(frozen_q, x))

        outer = outer_value(theta_prime)
        v_dir = ad.grad(outer, theta_prime.tensors())

        # directional derivative of each sample's log-prob along v via central FD
        v_norm = global_norm(v_dir)
        if v_norm == 0 or cfg.tau_a == 0:
            return 0.0
        eps = 1e-6 * max(1.0, global_norm([p.value for p in self.policy.tensors()])) / v_norm
        lp_plus = self._log_probs_at_shift(batch, v_dir, eps)
        lp_minus = self._log_probs_at_shift(batch, v_dir, -eps)
        c = (lp_plus - lp_minus) / (2 * eps)          # (b, L)

        # ascend: d outer / d eta = tau_a * mean(c * dA/d eta)
        surrogate = ad.mul(ad.mean(ad.mul(advantage_graph(), Tensor(c))), cfg.tau_a)
        grads = ad.grad(surrogate, self.rewards.tensors())
        grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
        self.reward_opt.step({k: -g for k, g in zip(self.rewards.keys(), grads)})
        return norm

    def _frozen_hidden(self, batch):
        if self.pol_cfg.actor != "mlp" and self.pol_cfg.backbone == "gnn":
            return batch["hidden"]
        return Tensor(batch["hidden"])

    def _log_probs_at_shift(self, batch, direction, eps: float) -> np.ndarray:
        shifted = ParamSet()
        for (name, p), d in zip(self.policy.items(), direction):
            shifted[name] = Tensor(p.value + eps * d)
        means, _ = polmod.policy_means(shifted, Tensor(batch["obs"]),
                                       self._frozen_hidden(batch), self.pol_cfg,
                                       mode="train",
                                       rng=self.rng.derive(7, self.rounds),
                                       temperature=self.temperature)
        lp = polmod.log_prob(means, batch["presquash"], max(self.sigma, 1e-3))
        return lp.value

    def _soft_updates(self):
        rate = self.cfg.tau_a
        for l in range(self.num_agents):
            polyak_update(self.critic_targets[l], self.critics[l], rate)
        polyak_update(self.extrinsic_target, self.extrinsic, rate)
        polyak_update(self.policy_target, self.policy, rate)

    def _abort(self, reason: str, metrics: dict):
        dump = {
            "reason": reason,
            "metrics": {k: float(v) for k, v in metrics.items()},
            "rounds": self.rounds,
            "sigma": self.sigma,
            "param_norms": {k: float(np.linalg.norm(v.value))
                            for k, v in self.policy.items()},
        }
        log.error("training aborted: %s", json.dumps(dump))
        raise TrainingAborted(reason)

    # -- main loop -----------------------------------------------------------------------

    def run_episode(self, episode: int, train: bool = True) -> dict:
        cfg = self.env_cfg
        ep_rng = self.rng.derive(8, episode)
        state, obs = envmod.reset(cfg, ep_rng.derive(0))
        hidden = self.initial_hidden(state)
        se_values, update_metrics = [], []
        for slot in range(cfg.episode_length):
            mode = "train" if train else "eval"
            out = polmod.act(self.policy, obs, hidden, self.pol_cfg, mode=mode,
                             rng=ep_rng.derive(1, slot),
                             explore_sigma=self.sigma if train else 0.0,
                             temperature=self.temperature)
            actions = self._env_actions(out.env_actions)
            nxt, res = envmod.step(state, actions, ep_rng.derive(2, slot))
            if train:
                obs_flat = obs.reshape(self.num_agents, -1)
                if self.cfg.use_intrinsic:
                    r_in, r_m = rewmod.mixed_reward_values(
                        self.rewards, obs_flat, out.env_actions, res.rewards,
                        self.rew_cfg)
                else:
                    r_in = np.zeros(self.num_agents)
                    r_m = res.rewards.copy()
                self.pool.add(obs=obs, next_obs=res.observations,
                              state=envmod.global_state(state),
                              next_state=envmod.global_state(nxt),
                              actions=out.env_actions, presquash=out.presquash,
                              r_ex=res.rewards, r_m=r_m,
                              hidden=hidden, next_hidden=out.next_hidden,
                              done=float(res.done))
                ready = (self.pool.size >= self.cfg.batch_size
                         and episode >= self.cfg.warmup_episodes)
                if ready and slot % self.cfg.update_every == 0:
                    update_metrics.append(self.update_round())
            se_values.append(res.sum_se)
            state, obs, hidden = nxt, res.observations, out.next_hidden
        row = {"episode": episode, "sum_se": float(np.mean(se_values))}
        if update_metrics:
            for key in update_metrics[0]:
                row[key] = float(np.mean([m[key] for m in update_metrics if key in m]))
        if train:
            self.sigma *= self.cfg.explore_decay
        return row

    def train(self, out_dir=None) -> list[dict]:
        """Episode loop with plateau termination and periodic checkpoints."""
        best = -np.inf
        best_episode = 0
        for episode in range(self.cfg.episodes):
            row = self.run_episode(episode, train=True)
            self.history.append(row)
            window = [r["sum_se"] for r in self.history[-100:]]
            moving = float(np.mean(window))
            row["moving_avg"] = moving
            if moving > best:
                best, best_episode = moving, episode
            if out_dir is not None and (episode + 1) % self.cfg.checkpoint_every == 0:
                polmod.save_params(self.policy, f"{out_dir}/checkpoint_{episode + 1}.json")
            if (episode - best_episode) >= self.cfg.plateau_window:
                log.info("plateau reached at episode %d (best at %d)", episode,
                         best_episode)
                break
        return self.history
