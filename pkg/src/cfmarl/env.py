"""Multi-agent mobility + downlink power-control environment.

Agents are the mobile APs. Each slot they emit a mobility step, a total
transmit-power fraction with a per-UE split, and a per-antenna shaping hook.
The environment projects actions onto the feasible set (area bounds, minimum
AP-UE distance, per-AP and per-antenna power budgets), refreshes the
large-scale fading after movement, resamples channels, re-estimates them
from pilots, and scores the slot by the hardening-bound sum SE.

The per-agent extrinsic reward is deliberately the uniform split of the sum
SE: smarter splits are the credit-assignment networks' job, not the
environment's.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import phy
from .rng import RngStream


@dataclass
class EnvConfig:
    num_aps: int = 4
    num_ues: int = 3
    num_antennas: int = 2
    area: tuple = (0.0, 1000.0)
    wraparound: bool = True
    d_min: float = 10.0
    p_ap_max: float = 1.0
    p_an_max: float | None = None     # defaults to p_ap_max / num_antennas
    noise_power: float = 10.0 ** (-12.4)   # -94 dBm in watts
    ue_power: float = 0.1
    tau_p: int | None = None          # defaults to num_ues
    tau_c: int = 200
    max_step: float = 50.0
    episode_length: int = 40
    mc_draws: int = 2000
    pathloss: phy.PathlossConfig = field(default_factory=phy.PathlossConfig)
    cov_model: str = "uncorrelated"
    precoder: str = "mr"
    antenna_power_mode: str = "uniform"   # "uniform" ignores the mp hook, "weighted" applies it

    def __post_init__(self):
        if self.p_an_max is None:
            self.p_an_max = self.p_ap_max / self.num_antennas
        if self.tau_p is None:
            self.tau_p = self.num_ues
        if self.tau_p > self.tau_c:
            raise ValueError("tau_p cannot exceed tau_c")
        side = self.area[1] - self.area[0]
        if self.d_min >= side:
            raise ValueError("d_min must be smaller than the area side")

    @property
    def feature_dim(self) -> int:
        """Entity-row width: 2N channel reals, one gain feature, 2 coordinates."""
        return 2 * self.num_antennas + 3

    @property
    def action_dim(self) -> int:
        return 2 + self.num_ues + self.num_antennas


@dataclass
class ActionVector:
    mobility: np.ndarray            # (2,) in [-1, 1], scaled by max_step
    ap_power: float                 # fraction of p_ap_max in [0, 1]
    power_split: np.ndarray         # (K,) nonnegative, sums to 1
    antenna_weights: np.ndarray     # (N,) shaping hook, nonnegative, sums to 1

    @classmethod
    def from_raw(cls, raw: np.ndarray, num_ues: int, num_antennas: int) -> "ActionVector":
        """Decode a policy output row [mobility(2), sp logits(K), mp logits(N)].

        The per-UE split is the softmax of the sp logits and the total power
        fraction is sigmoid(logsumexp(sp logits)), which is invariant to UE
        reordering.
        """
        raw = np.asarray(raw, dtype=float)
        mob = raw[:2]
        sp = raw[2:2 + num_ues]
        mp = raw[2 + num_ues:2 + num_ues + num_antennas]
        split = _softmax(sp)
        total = 1.0 / (1.0 + np.exp(-_logsumexp(sp)))
        return cls(mobility=mob, ap_power=float(total), power_split=split,
                   antenna_weights=_softmax(mp))


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _logsumexp(x):
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


@dataclass
class EnvState:
    config: EnvConfig
    geometry: phy.NetworkGeometry
    cov: phy.CovarianceSet
    pilots: phy.PilotAssignment
    channels: phy.ChannelRealization
    estimates: phy.ChannelEstimate
    slot: int

    @property
    def beta(self) -> np.ndarray:
        return self.cov.beta


@dataclass
class StepResult:
    observations: np.ndarray     # (L, K, f_r) entity rows per agent
    rewards: np.ndarray          # (L,) extrinsic rewards, uniform split of sum SE
    sum_se: float
    per_ue_se: np.ndarray        # (K,)
    done: bool
    flags: dict
    rho: np.ndarray              # (M, K) downlink powers actually applied, watts


# -- observations -------------------------------------------------------------

def observe(state: EnvState) -> np.ndarray:
    """Per-agent entity rows: one row per UE.

    Row k for agent l: the MMSE channel estimate to UE k scaled to O(1) by
    its average energy, the large-scale gain in normalized dB, and the
    wraparound-shortest displacement to the UE in area units.
    """
    cfg = state.config
    m, k, n = cfg.num_aps, cfg.num_ues, cfg.num_antennas
    beta = state.beta
    h_hat = state.estimates.h_hat
    scale = np.sqrt(np.maximum(beta * n, 1e-30))[:, :, None]
    h_feat = h_hat / scale
    beta_db = (10.0 * np.log10(np.maximum(beta, 1e-20)) + 110.0) / 40.0
    disp = state.geometry.ue_positions[None, :, :] - state.geometry.ap_positions[:, None, :]
    side = cfg.area[1] - cfg.area[0]
    if cfg.wraparound:
        disp = disp - side * np.round(disp / side)
    rows = np.concatenate([
        h_feat.real, h_feat.imag,
        beta_db[:, :, None],
        disp / side,
    ], axis=-1)
    assert rows.shape == (m, k, cfg.feature_dim)
    return rows


def global_state(state: EnvState) -> np.ndarray:
    """Compact global state vector <positions, gains> stored with transitions."""
    cfg = state.config
    side = cfg.area[1] - cfg.area[0]
    beta_db = (10.0 * np.log10(np.maximum(state.beta, 1e-20)) + 110.0) / 40.0
    return np.concatenate([
        (state.geometry.ap_positions.ravel() - cfg.area[0]) / side,
        (state.geometry.ue_positions.ravel() - cfg.area[0]) / side,
        beta_db.ravel(),
    ])


# -- reset ----------------------------------------------------------------------

def reset(config: EnvConfig, rng: RngStream) -> tuple[EnvState, np.ndarray]:
    """Uniform placement honoring d_min, fresh channels and estimates."""
    lo, hi = config.area
    pos_rng = rng.derive(1)
    ue_pos = pos_rng.uniform(lo, hi, (config.num_ues, 2))
    ap_pos = pos_rng.uniform(lo, hi, (config.num_aps, 2))
    for attempt in range(1000):
        d = phy.pairwise_distances(ap_pos, ue_pos, config.area, config.wraparound)
        bad = np.flatnonzero(d.min(axis=1) < config.d_min)
        if bad.size == 0:
            break
        ap_pos[bad] = pos_rng.uniform(lo, hi, (bad.size, 2))
    else:
        raise ValueError(
            f"could not place {config.num_aps} APs at d_min={config.d_min} "
            f"after 1000 resampling rounds"
        )
    geometry = phy.NetworkGeometry(ap_pos, ue_pos, config.area, config.wraparound)
    state = _refresh(config, geometry, slot=0, rng=rng.derive(2))
    return state, observe(state)


def _refresh(config: EnvConfig, geometry: phy.NetworkGeometry, slot: int,
             rng: RngStream) -> EnvState:
    cov = phy.build_covariance(geometry, config.pathloss, config.cov_model,
                               config.num_antennas)
    pilots = phy.assign_pilots(config.num_ues, config.tau_p)
    h = phy.sample_channels(cov, rng.derive(1))
    est = phy.mmse_estimate(cov, pilots, phy.ChannelRealization(h),
                            config.ue_power, config.noise_power, rng.derive(2))
    return EnvState(config=config, geometry=geometry, cov=cov, pilots=pilots,
                    channels=phy.ChannelRealization(h), estimates=est, slot=slot)


# -- action projection -------------------------------------------------------------

def project_actions(state: EnvState, actions: list, config: EnvConfig | None = None) -> list:
    """Project raw actions onto the feasible set.

    Mobility is truncated along its own direction to the last feasible point
    (area bounds and d_min, under the configured distance metric); the power
    split and antenna weights are renormalized onto the simplex; the total
    power fraction is clipped to [0, 1] so the per-AP budget holds. The
    per-antenna budget depends on the realized precoders and is enforced
    during step().
    """
    cfg = config or state.config
    out = []
    for m, act in enumerate(actions):
        mob = np.asarray(act.mobility, dtype=float)
        if not np.all(np.isfinite(mob)):
            raise ValueError(f"non-finite mobility action for agent {m}")
        mob = np.clip(mob, -1.0, 1.0)
        alpha = _feasible_fraction(state, m, mob * cfg.max_step)
        split = np.clip(np.asarray(act.power_split, dtype=float), 0.0, None)
        total_split = split.sum()
        split = split / total_split if total_split > 0 else np.full(cfg.num_ues, 1.0 / cfg.num_ues)
        aw = np.clip(np.asarray(act.antenna_weights, dtype=float), 0.0, None)
        aw_sum = aw.sum()
        aw = aw / aw_sum if aw_sum > 0 else np.full(cfg.num_antennas, 1.0 / cfg.num_antennas)
        out.append(ActionVector(
            mobility=mob * alpha,
            ap_power=float(np.clip(act.ap_power, 0.0, 1.0)),
            power_split=split,
            antenna_weights=aw,
        ))
    return out


def _feasible_fraction(state: EnvState, agent: int, delta: np.ndarray) -> float:
    """Largest alpha in [0,1] keeping agent's move in bounds and d >= d_min."""
    cfg = state.config
    pos = state.geometry.ap_positions[agent]
    ues = state.geometry.ue_positions

    def ok(a: float) -> bool:
        p = pos + a * delta
        if p[0] < cfg.area[0] or p[0] > cfg.area[1]:
            return False
        if p[1] < cfg.area[0] or p[1] > cfg.area[1]:
            return False
        d = phy.pairwise_distances(p[None, :], ues, cfg.area, cfg.wraparound)
        return bool(d.min() >= cfg.d_min)

    if ok(1.0):
        return 1.0
    if not ok(0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = (lo + hi) / 2.0
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


# -- step ----------------------------------------------------------------------------

def step(state: EnvState, actions: list, rng: RngStream) -> tuple[EnvState, StepResult]:
    """Advance one slot: move, refresh fading, transmit, score sum SE."""
    cfg = state.config
    proj = project_actions(state, actions)
    new_ap = state.geometry.ap_positions + np.stack(
        [a.mobility * cfg.max_step for a in proj])
    new_ap = np.clip(new_ap, cfg.area[0], cfg.area[1])  # guards float dust only
    geometry = phy.NetworkGeometry(new_ap, state.geometry.ue_positions,
                                   cfg.area, cfg.wraparound)
    nxt = _refresh(cfg, geometry, state.slot + 1, rng.derive(10, state.slot))

    if cfg.precoder == "mr":
        w = phy.precode_mr(nxt.estimates.h_hat)
    else:
        w = phy.precode_rzf(nxt.estimates.h_hat, cfg.ue_power, cfg.noise_power)
    w = _shape_antennas(w, proj, cfg)

    rho = np.stack([a.ap_power * cfg.p_ap_max * a.power_split for a in proj])
    rho, an_flags = _enforce_antenna_budget(rho, w, cfg)

    stats = phy.estimate_se_statistics(
        nxt.cov, nxt.pilots, cfg.ue_power, cfg.noise_power, cfg.precoder,
        cfg.mc_draws, rng.derive(11, state.slot))
    sinr = phy.compute_sinr(stats, np.sqrt(rho).T, cfg.noise_power)
    per_ue_se = phy.compute_se(sinr, cfg.tau_p, cfg.tau_c)
    sum_se = float(per_ue_se.sum())
    rewards = np.full(cfg.num_aps, sum_se / cfg.num_aps)

    flags = constraint_flags(nxt, rho, w)
    flags["antenna_scaled"] = an_flags
    done = nxt.slot >= cfg.episode_length
    return nxt, StepResult(observations=observe(nxt), rewards=rewards,
                           sum_se=sum_se, per_ue_se=per_ue_se, done=done,
                           flags=flags, rho=rho)


def _shape_antennas(w: np.ndarray, proj: list, cfg: EnvConfig) -> np.ndarray:
    """Apply the antenna-power hook; the default mode leaves precoders alone."""
    if cfg.antenna_power_mode == "uniform":
        return w
    if cfg.antenna_power_mode != "weighted":
        raise ValueError(f"unknown antenna_power_mode {cfg.antenna_power_mode!r}")
    shaped = w.copy()
    for m, act in enumerate(proj):
        gains = np.sqrt(cfg.num_antennas * act.antenna_weights)
        shaped[m] = shaped[m] * gains[None, :]
        norms = np.linalg.norm(shaped[m], axis=-1, keepdims=True)
        norms[norms == 0] = 1.0
        shaped[m] = shaped[m] / norms
    return shaped


def _enforce_antenna_budget(rho: np.ndarray, w: np.ndarray, cfg: EnvConfig):
    """Scale each AP's powers down until every antenna meets its budget."""
    per_antenna = np.einsum("mk,mkn->mn", rho, np.abs(w) ** 2)
    peak = per_antenna.max(axis=1)
    scale = np.minimum(1.0, cfg.p_an_max / np.maximum(peak, 1e-300))
    return rho * scale[:, None], int((scale < 1.0).sum())


def constraint_flags(state: EnvState, rho: np.ndarray, w: np.ndarray) -> dict:
    """Direct inspection of constraints (22b)-(22e) on the current state."""
    cfg = state.config
    d = state.geometry.distances()
    pos = state.geometry.ap_positions
    per_antenna = np.einsum("mk,mkn->mn", rho, np.abs(w) ** 2)
    return {
        "d_min_ok": bool(d.min() >= cfg.d_min - 1e-9),
        "bounds_ok": bool(pos.min() >= cfg.area[0] - 1e-9
                          and pos.max() <= cfg.area[1] + 1e-9),
        "ap_power_ok": bool(rho.sum(axis=1).max() <= cfg.p_ap_max + 1e-9),
        "antenna_power_ok": bool(per_antenna.max() <= cfg.p_an_max + 1e-9),
    }


# -- baselines -------------------------------------------------------------------------

def fractional_power_baseline(state: EnvState, exponent: float = 1.0) -> list:
    """Fractional power control: rho_mk proportional to beta_mk^nu, no movement."""
    cfg = state.config
    beta = state.beta
    out = []
    for m in range(cfg.num_aps):
        weights = beta[m] ** exponent
        total = weights.sum()
        split = weights / total if total > 0 else np.full(cfg.num_ues, 1.0 / cfg.num_ues)
        out.append(ActionVector(
            mobility=np.zeros(2),
            ap_power=1.0,
            power_split=split,
            antenna_weights=np.full(cfg.num_antennas, 1.0 / cfg.num_antennas),
        ))
    return out


def random_actions(config: EnvConfig, rng: RngStream) -> list:
    """Uniform-random baseline actions (pre-projection)."""
    out = []
    for _ in range(config.num_aps):
        out.append(ActionVector(
            mobility=rng.uniform(-1.0, 1.0, (2,)),
            ap_power=float(rng.uniform(0.0, 1.0)),
            power_split=rng.uniform(0.0, 1.0, (config.num_ues,)),
            antenna_weights=np.full(config.num_antennas, 1.0 / config.num_antennas),
        ))
    return out


# -- trajectory dump ----------------------------------------------------------------------

TRAJECTORY_HEADER = ["slot", "agent", "x", "y", "ap_power"]


def trajectory_rows(state: EnvState, result: StepResult, actions: list) -> list:
    """Per-slot CSV rows: slot, agent id, position, power use, per-UE data."""
    rows = []
    for m in range(state.config.num_aps):
        row = {
            "slot": state.slot,
            "agent": m,
            "x": state.geometry.ap_positions[m, 0],
            "y": state.geometry.ap_positions[m, 1],
            "ap_power": actions[m].ap_power,
        }
        for k in range(state.config.num_ues):
            row[f"split_{k}"] = actions[m].power_split[k]
            row[f"se_{k}"] = result.per_ue_se[k]
        rows.append(row)
    return rows


def write_trajectory(path, rows: list):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
