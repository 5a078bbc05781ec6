"""Environment: reset, action projection, constraint enforcement, transitions."""
import numpy as np
import pytest

from cfmarl.env import (
    ActionVector,
    EnvConfig,
    constraint_flags,
    fractional_power_baseline,
    observe,
    project_actions,
    random_actions,
    reset,
    step,
    trajectory_rows,
)
from cfmarl.rng import RngStream


def make_env(seed=0, **kw):
    cfg = EnvConfig(**{**dict(num_aps=3, num_ues=2, num_antennas=2, mc_draws=300), **kw})
    state, obs = reset(cfg, RngStream(seed))
    return cfg, state, obs


def zero_actions(cfg):
    return [ActionVector(mobility=np.zeros(2), ap_power=0.0,
                         power_split=np.full(cfg.num_ues, 1.0 / cfg.num_ues),
                         antenna_weights=np.full(cfg.num_antennas, 1.0 / cfg.num_antennas))
            for _ in range(cfg.num_aps)]


# -- reset ----------------------------------------------------------------------

def test_reset_respects_d_min():
    cfg, state, _ = make_env(num_aps=9, num_ues=6)
    assert state.geometry.distances().min() >= cfg.d_min


def test_reset_deterministic():
    _, s1, o1 = make_env(seed=7)
    _, s2, o2 = make_env(seed=7)
    assert np.array_equal(s1.geometry.ap_positions, s2.geometry.ap_positions)
    assert np.array_equal(o1, o2)
    assert s1.slot == 0


def test_reset_infeasible_d_min_raises():
    with pytest.raises(ValueError, match="1000"):
        cfg = EnvConfig(num_aps=20, num_ues=20, area=(0.0, 30.0), d_min=25.0)
        reset(cfg, RngStream(0))


def test_observation_shape_and_finite():
    cfg, state, obs = make_env()
    assert obs.shape == (cfg.num_aps, cfg.num_ues, cfg.feature_dim)
    assert np.all(np.isfinite(obs))


# -- projection ------------------------------------------------------------------

def test_projection_truncates_to_d_min_boundary():
    cfg, state, _ = make_env(num_aps=1, num_ues=1, wraparound=False, area=(0.0, 1000.0))
    # place AP 60 m left of the UE, then ask to move 58 m toward it
    ue = state.geometry.ue_positions[0]
    state.geometry.ap_positions[0] = ue - np.array([60.0, 0.0])
    act = ActionVector(mobility=np.array([58.0 / cfg.max_step, 0.0]).clip(-1, 1),
                       ap_power=1.0, power_split=np.ones(1),
                       antenna_weights=np.full(2, 0.5))
    # max_step=50 caps the raw move at 50 m; boundary is at 10 m from the UE
    proj = project_actions(state, [act])
    new = state.geometry.ap_positions[0] + proj[0].mobility * cfg.max_step
    assert abs(np.linalg.norm(new - ue) - cfg.d_min) < 1e-6


def test_projection_renormalizes_split():
    cfg, state, _ = make_env()
    act = zero_actions(cfg)[0]
    act.power_split = np.array([2.0, 2.0])
    proj = project_actions(state, [act] * cfg.num_aps)
    assert np.allclose(proj[0].power_split, [0.5, 0.5])


def test_projection_rejects_nan():
    cfg, state, _ = make_env()
    act = zero_actions(cfg)[0]
    act.mobility = np.array([np.nan, 0.0])
    with pytest.raises(ValueError):
        project_actions(state, [act] * cfg.num_aps)


def test_full_power_respects_antenna_budget():
    cfg, state, _ = make_env(num_aps=2, num_ues=2, num_antennas=8, mc_draws=200)
    acts = [ActionVector(mobility=np.zeros(2), ap_power=1.0,
                         power_split=np.full(2, 0.5),
                         antenna_weights=np.full(8, 1.0 / 8))
            for _ in range(2)]
    nxt, res = step(state, acts, RngStream(1))
    assert res.flags["antenna_power_ok"]
    assert res.flags["ap_power_ok"]
    assert cfg.p_an_max == cfg.p_ap_max / 8


# -- step -------------------------------------------------------------------------

def test_zero_actions_zero_se():
    cfg, state, _ = make_env()
    pos_before = state.geometry.ap_positions.copy()
    nxt, res = step(state, zero_actions(cfg), RngStream(2))
    assert res.sum_se == 0.0
    assert np.array_equal(nxt.geometry.ap_positions, pos_before)
    assert nxt.slot == 1


def test_reward_identity():
    cfg, state, _ = make_env()
    acts = fractional_power_baseline(state)
    _, res = step(state, acts, RngStream(3))
    assert abs(res.rewards.sum() - res.sum_se) < 1e-9
    assert abs(res.per_ue_se.sum() - res.sum_se) < 1e-12


def test_step_deterministic():
    cfg, state, _ = make_env(seed=5)
    acts = fractional_power_baseline(state)
    _, r1 = step(state, acts, RngStream(9))
    _, r2 = step(state, acts, RngStream(9))
    assert np.array_equal(r1.observations, r2.observations)
    assert r1.sum_se == r2.sum_se


def test_beta_tracks_pathloss_after_move():
    cfg, state, _ = make_env()
    acts = zero_actions(cfg)
    acts[0].mobility = np.array([0.4, -0.3])
    nxt, _ = step(state, acts, RngStream(4))
    from cfmarl.phy import pathloss
    expect = pathloss(nxt.geometry.distances(), cfg.pathloss)
    assert np.allclose(nxt.beta, expect, rtol=1e-12)


def test_moving_toward_ue_increases_beta_and_se():
    cfg = EnvConfig(num_aps=1, num_ues=1, num_antennas=2, mc_draws=20000,
                    wraparound=False)
    state, _ = reset(cfg, RngStream(11))
    state.geometry.ue_positions[0] = np.array([200.0, 500.0])
    state.geometry.ap_positions[0] = np.array([800.0, 500.0])
    state = _rebuild(state)
    betas, ses = [], []
    for i in range(10):
        direction = state.geometry.ue_positions[0] - state.geometry.ap_positions[0]
        norm = np.linalg.norm(direction)
        mob = direction / max(norm, cfg.max_step)
        act = ActionVector(mobility=mob, ap_power=1.0, power_split=np.ones(1),
                           antenna_weights=np.full(2, 0.5))
        state, res = step(state, [act], RngStream(100 + i))
        betas.append(state.beta[0, 0])
        ses.append(res.sum_se)
    assert np.all(np.diff(betas) > 0)
    assert np.all(np.diff(ses) > -1e-3)


def _rebuild(state):
    from cfmarl.env import _refresh
    return _refresh(state.config, state.geometry, state.slot, RngStream(999))


def test_episode_terminates():
    cfg, state, _ = make_env(episode_length=2)
    _, r1 = step(state, zero_actions(cfg), RngStream(6))
    assert not r1.done
    state2, _ = step(state, zero_actions(cfg), RngStream(6))
    _, r2 = step(state2, zero_actions(cfg), RngStream(7))
    assert r2.done


# -- constraints under random actions ----------------------------------------------

def test_constraints_hold_under_random_actions():
    cfg, state, _ = make_env(num_aps=3, num_ues=2, mc_draws=100)
    rng = RngStream(21)
    for i in range(20):
        acts = random_actions(cfg, rng)
        state, res = step(state, acts, rng.derive(i))
        assert res.flags["d_min_ok"]
        assert res.flags["bounds_ok"]
        assert res.flags["ap_power_ok"]
        assert res.flags["antenna_power_ok"]


# -- baselines ------------------------------------------------------------------------

def test_fractional_weights():
    cfg, state, _ = make_env(num_aps=1, num_ues=2)
    state.cov.beta[0] = np.array([3.0, 1.0])
    acts = fractional_power_baseline(state, exponent=1.0)
    assert np.allclose(acts[0].power_split, [0.75, 0.25])
    assert acts[0].ap_power == 1.0


def test_fractional_exponent_zero_uniform():
    cfg, state, _ = make_env(num_aps=1, num_ues=2)
    acts = fractional_power_baseline(state, exponent=0.0)
    assert np.allclose(acts[0].power_split, [0.5, 0.5])


def test_fractional_total_power_at_budget():
    cfg, state, _ = make_env()
    acts = fractional_power_baseline(state)
    for a in acts:
        rho = a.ap_power * cfg.p_ap_max * a.power_split
        assert np.isclose(rho.sum(), cfg.p_ap_max)


def test_fractional_zero_beta_row_falls_back_to_uniform():
    cfg, state, _ = make_env(num_aps=1, num_ues=2)
    state.cov.beta[0] = np.zeros(2)
    acts = fractional_power_baseline(state)
    assert np.allclose(acts[0].power_split, [0.5, 0.5])


# -- trajectory dump --------------------------------------------------------------------

def test_trajectory_rows_schema(tmp_path):
    cfg, state, _ = make_env()
    acts = fractional_power_baseline(state)
    nxt, res = step(state, acts, RngStream(30))
    rows = trajectory_rows(nxt, res, acts)
    assert len(rows) == cfg.num_aps
    assert {"slot", "agent", "x", "y", "ap_power"} <= set(rows[0])
    from cfmarl.env import write_trajectory
    path = tmp_path / "traj.csv"
    write_trajectory(path, rows)
    assert path.read_text().count("\n") == cfg.num_aps + 1
