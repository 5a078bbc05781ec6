"""Experiment configuration: flat JSON schema, strict keys, unit parsing.

Powers are stored internally in watts and distances in meters; dB/dBm forms
are accepted only at this boundary ("-94dBm", "140.7dB"). A run's resolved
config is emitted next to its results and reproduces the run when fed back.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import env as envmod
from . import gnn as gnnmod
from . import phy
from . import policy as polmod
from . import trainer as trmod


class ConfigError(ValueError):
    """Invalid or unknown configuration input (CLI exit code 2)."""


def parse_power(value) -> float:
    """Watts from a float or a 'dBm'/'mW'/'W' suffixed string."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip().lower().replace(" ", "")
    try:
        if text.endswith("dbm"):
            return 10.0 ** ((float(text[:-3]) - 30.0) / 10.0)
        if text.endswith("mw"):
            return float(text[:-2]) / 1000.0
        if text.endswith("w"):
            return float(text[:-1])
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse power value {value!r}") from exc


ALGORITHMS = ("sf-maddpg", "maddpg", "fractional", "random")


@dataclass
class ExperimentConfig:
    # geometry / physical layer
    num_aps: int = 4
    num_ues: int = 3
    num_antennas: int = 2
    area_min: float = 0.0
    area_max: float = 1000.0
    wraparound: bool = True
    d_min: float = 10.0
    p_ap_max: float = 1.0
    p_an_max: float | None = None
    noise_power: float | str = "-94dBm"
    ue_power: float | str = 0.1
    tau_p: int | None = None
    tau_c: int = 200
    pathloss_model: str = "log-distance"
    pathloss_intercept_db: float = 140.7
    pathloss_slope_db: float = 36.7
    cov_model: str = "uncorrelated"
    precoder: str = "mr"
    # environment dynamics
    max_step: float = 50.0
    episode_length: int = 40
    mc_draws_train: int = 2000
    mc_draws_eval: int = 100000
    # algorithm and feature flags
    algorithm: str = "sf-maddpg"
    permutation: bool = True          # off: plain MLP actor
    gnn_comm: bool = True             # off: recurrent backbone
    intrinsic_reward: bool = True     # off: r_m = r_ex
    action_mode: str = "joint"        # or "pi-only" (mobility only, uniform power)
    weight_mode: str = "hypernet"     # or "finite-pool"
    policy_gradient: str = "stochastic"
    # network sizes
    d_r: int = 256
    hyper_hidden: int = 64
    head_hidden: tuple = (128, 64)
    critic_hidden: tuple = (128, 64)
    pool_size: int = 4
    # trainer
    episodes: int = 300
    batch_size: int = 1024
    update_every: int = 1
    warmup_episodes: int = 10
    lr: float = 0.01
    tau_a: float = 0.01
    gamma: float = 0.99
    grad_clip: float = 0.5
    explore_sigma: float = 0.1
    arn_update_every: int = 10
    arn_meta_batch: int = 16
    plateau_window: int = 200
    checkpoint_every: int = 100
    fractional_exponent: float = 1.0
    # run control
    seeds: tuple = (0,)
    eval_episodes: int = 25
    eval_use_train_draws: bool = False  # True: sample CDFs at training fidelity
    outdir: str = ""

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; "
                              f"choose from {ALGORITHMS}")
        if self.action_mode not in ("joint", "pi-only"):
            raise ConfigError(f"unknown action_mode {self.action_mode!r}")
        self.noise_power = parse_power(self.noise_power)
        self.ue_power = parse_power(self.ue_power)
        if self.p_an_max is not None:
            self.p_an_max = parse_power(self.p_an_max)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.head_hidden = tuple(self.head_hidden)
        self.critic_hidden = tuple(self.critic_hidden)

    # -- constructors -------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        out["head_hidden"] = list(self.head_hidden)
        out["critic_hidden"] = list(self.critic_hidden)
        out["seeds"] = list(self.seeds)
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.resolved(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    # -- component configs -----------------------------------------------------------

    def env_config(self, mc_draws: int | None = None) -> envmod.EnvConfig:
        return envmod.EnvConfig(
            num_aps=self.num_aps, num_ues=self.num_ues,
            num_antennas=self.num_antennas,
            area=(self.area_min, self.area_max), wraparound=self.wraparound,
            d_min=self.d_min, p_ap_max=self.p_ap_max, p_an_max=self.p_an_max,
            noise_power=self.noise_power, ue_power=self.ue_power,
            tau_p=self.tau_p, tau_c=self.tau_c, max_step=self.max_step,
            episode_length=self.episode_length,
            mc_draws=mc_draws or self.mc_draws_train,
            pathloss=phy.PathlossConfig(model=self.pathloss_model,
                                        intercept_db=self.pathloss_intercept_db,
                                        slope_db=self.pathloss_slope_db),
            cov_model=self.cov_model, precoder=self.precoder,
        )

    def policy_config(self) -> polmod.PolicyConfig:
        env_cfg = self.env_config()
        use_dhpn = self.permutation and self.algorithm != "maddpg"
        backbone = "gnn" if (self.gnn_comm and use_dhpn
                             and self.algorithm != "maddpg") else "rnn"
        gnn_cfg = None
        if backbone == "gnn":
            widths = (self.head_hidden[0], self.head_hidden[-1])
            gnn_cfg = gnnmod.GnnConfig(input_dim=self.d_r, layer_dims=widths,
                                       message_dim=self.head_hidden[-1],
                                       score_dim=max(4, self.head_hidden[-1] // 2))
        return polmod.PolicyConfig(
            feature_dim=env_cfg.feature_dim, num_ues=self.num_ues,
            num_antennas=self.num_antennas, d_r=self.d_r,
            hyper_hidden=self.hyper_hidden, head_hidden=self.head_hidden,
            weight_mode=self.weight_mode,
            backbone=backbone, actor="dhpn" if use_dhpn else "mlp",
            mlp_hidden=(128, 64), explore_sigma=self.explore_sigma, gnn=gnn_cfg,
        )

    def trainer_config(self) -> trmod.TrainerConfig:
        if self.algorithm == "maddpg":
            policy_gradient = "deterministic"
            use_intrinsic = False
        else:
            policy_gradient = self.policy_gradient
            use_intrinsic = self.intrinsic_reward
        return trmod.TrainerConfig(
            episodes=self.episodes, gamma=self.gamma, tau_a=self.tau_a,
            lr=self.lr, grad_clip=self.grad_clip, batch_size=self.batch_size,
            update_every=self.update_every, warmup_episodes=self.warmup_episodes,
            explore_sigma=self.explore_sigma,
            policy_gradient=policy_gradient, use_intrinsic=use_intrinsic,
            action_mode=self.action_mode,
            arn_update_every=self.arn_update_every,
            arn_meta_batch=self.arn_meta_batch, critic_hidden=self.critic_hidden,
            plateau_window=self.plateau_window,
            checkpoint_every=self.checkpoint_every,
        )
