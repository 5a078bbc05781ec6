"""Experiment orchestration: training runs, baseline rollouts, evaluation."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import env as envmod
from . import policy as polmod
from .config import ExperimentConfig
from .rng import RngStream
from .trainer import Trainer


def evaluate_policy(trainer: Trainer, experiment: ExperimentConfig,
                    episodes: int, rng: RngStream):
    """Greedy rollouts at evaluation fidelity; per-slot sum-SE samples."""
    mc = (experiment.mc_draws_train if experiment.eval_use_train_draws
          else experiment.mc_draws_eval)
    env_cfg = experiment.env_config(mc_draws=mc)
    sum_samples, per_ue, trajectory = [], [], []
    for ep in range(episodes):
        state, obs = envmod.reset(env_cfg, rng.derive(1, ep))
        hidden = trainer.initial_hidden(state)
        for slot in range(env_cfg.episode_length):
            out = polmod.act(trainer.policy, obs, hidden, trainer.pol_cfg, mode="eval")
            actions = trainer._env_actions(out.env_actions)
            state, res = envmod.step(state, actions, rng.derive(2, ep, slot))
            sum_samples.append(res.sum_se)
            per_ue.append(res.per_ue_se.copy())
            if ep == 0:
                trajectory.extend(envmod.trajectory_rows(state, res, actions))
            obs, hidden = res.observations, out.next_hidden
    return np.array(sum_samples), np.array(per_ue), trajectory


def baseline_rollouts(experiment: ExperimentConfig, algorithm: str,
                      episodes: int, rng: RngStream, mc_draws: int | None = None):
    """Episode rollouts for the non-learning baselines.

    fractional: static APs, per-UE powers proportional to beta^nu.
    random: uniform-random mobility and power every slot.
    """
    mc = mc_draws or (experiment.mc_draws_train if experiment.eval_use_train_draws
                      else experiment.mc_draws_eval)
    env_cfg = experiment.env_config(mc_draws=mc)
    sum_samples, per_ue, episode_means, trajectory = [], [], [], []
    for ep in range(episodes):
        state, _ = envmod.reset(env_cfg, rng.derive(1, ep))
        ep_values = []
        for slot in range(env_cfg.episode_length):
            if algorithm == "fractional":
                actions = envmod.fractional_power_baseline(
                    state, experiment.fractional_exponent)
            elif algorithm == "random":
                actions = envmod.random_actions(env_cfg, rng.derive(3, ep, slot))
            else:
                raise ValueError(f"not a baseline algorithm: {algorithm!r}")
            state, res = envmod.step(state, actions, rng.derive(2, ep, slot))
            sum_samples.append(res.sum_se)
            per_ue.append(res.per_ue_se.copy())
            ep_values.append(res.sum_se)
            if ep == 0:
                trajectory.extend(envmod.trajectory_rows(state, res, actions))
        episode_means.append(float(np.mean(ep_values)))
    return np.array(sum_samples), np.array(per_ue), episode_means, trajectory


def _write_csv(path, rows: list[dict]):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in keys})


def _write_samples(path, sums: np.ndarray, per_ue: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        k = per_ue.shape[1] if per_ue.size else 0
        writer.writerow(["sample", "sum_se"] + [f"se_ue{i}" for i in range(k)])
        for i, s in enumerate(sums):
            writer.writerow([i, repr(float(s))] + [repr(float(x)) for x in per_ue[i]])


def run_seed(experiment: ExperimentConfig, seed: int, out_dir: Path) -> dict:
    """One seed of one experiment; writes metrics, CDF samples, trajectory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(seed)
    summary = {"seed": seed, "algorithm": experiment.algorithm}
    if experiment.algorithm in ("fractional", "random"):
        sums, per_ue, episode_means, trajectory = baseline_rollouts(
            experiment, experiment.algorithm, experiment.eval_episodes,
            rng.derive(100))
        history = [{"episode": i, "sum_se": m} for i, m in enumerate(episode_means)]
    else:
        trainer = Trainer(experiment.env_config(), experiment.policy_config(),
                          experiment.trainer_config(), rng)
        history = trainer.train(out_dir=str(out_dir))
        polmod.save_params(trainer.policy, out_dir / "policy_final.json")
        sums, per_ue, trajectory = evaluate_policy(
            trainer, experiment, experiment.eval_episodes, rng.derive(101))
    _write_csv(out_dir / "metrics.csv", history)
    _write_samples(out_dir / "cdf_samples.csv", sums, per_ue)
    envmod.write_trajectory(out_dir / "trajectory.csv", trajectory)
    summary["episodes"] = len(history)
    summary["median_sum_se"] = float(np.median(sums)) if len(sums) else float("nan")
    summary["final_mean_sum_se"] = float(
        np.mean([r["sum_se"] for r in history[-50:]])) if history else float("nan")
    return summary


def run_experiment(experiment: ExperimentConfig, out_root) -> Path:
    """All seeds of an experiment; emits the resolved config beside results."""
    name = experiment.outdir or experiment.algorithm
    root = Path(out_root) / name
    root.mkdir(parents=True, exist_ok=True)
    experiment.save(root / "resolved_config.json")
    summaries = []
    for seed in experiment.seeds:
        summaries.append(run_seed(experiment, seed, root / f"seed_{seed}"))
    _write_csv(root / "summary.csv", summaries)
    return root
