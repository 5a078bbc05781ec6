"""Result bundles, cross-run comparisons, and plot-data export.

A bundle is the directory written by runner.run_experiment: a resolved
config, one subdirectory per seed with metrics.csv and cdf_samples.csv, and
optional trajectory dumps. No plotting happens here; every figure is served
as a CSV with documented columns.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SeedResult:
    seed: int
    history: list          # per-episode dict rows
    sum_samples: np.ndarray
    per_ue_samples: np.ndarray

    @property
    def episode_sums(self) -> np.ndarray:
        return np.array([float(r["sum_se"]) for r in self.history])

    def final_score(self, window: int = 50) -> float:
        sums = self.episode_sums
        return float(sums[-window:].mean()) if sums.size else float("nan")


@dataclass
class MetricsBundle:
    root: Path
    config: dict
    seeds: list

    @classmethod
    def load(cls, root) -> "MetricsBundle":
        root = Path(root)
        with open(root / "resolved_config.json") as fh:
            config = json.load(fh)
        seeds = []
        for seed_dir in sorted(root.glob("seed_*")):
            history = _read_csv(seed_dir / "metrics.csv")
            sums, per_ue = _read_samples(seed_dir / "cdf_samples.csv")
            seeds.append(SeedResult(seed=int(seed_dir.name.split("_")[1]),
                                    history=history, sum_samples=sums,
                                    per_ue_samples=per_ue))
        if not seeds:
            raise FileNotFoundError(f"no seed_* directories under {root}")
        return cls(root=root, config=config, seeds=seeds)

    @property
    def algorithm(self) -> str:
        return self.config.get("algorithm", "?")

    def all_sum_samples(self) -> np.ndarray:
        return np.concatenate([s.sum_samples for s in self.seeds])

    def median_final_score(self) -> float:
        return float(np.median([s.final_score() for s in self.seeds]))

    def convergence_points(self) -> list:
        return [convergence_point(s.episode_sums) for s in self.seeds]


def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_samples(path):
    rows = _read_csv(path)
    if not rows:
        return np.array([]), np.zeros((0, 0))
    sums = np.array([float(r["sum_se"]) for r in rows])
    ue_cols = [k for k in rows[0] if k.startswith("se_ue")]
    per_ue = np.array([[float(r[k]) for k in ue_cols] for r in rows])
    return sums, per_ue


# -- convergence ------------------------------------------------------------------

def convergence_point(episode_sums: np.ndarray, window: int = 100,
                      tolerance: float = 0.01) -> int | None:
    """First episode whose trailing moving average is within 1% of the final
    plateau (the mean of the last `window` episodes)."""
    sums = np.asarray(episode_sums, dtype=float)
    if sums.size == 0:
        return None
    w = min(window, sums.size)
    plateau = sums[-w:].mean()
    if plateau == 0:
        return 0
    moving = np.convolve(sums, np.ones(w) / w, mode="valid")
    hits = np.flatnonzero(np.abs(moving - plateau) <= tolerance * abs(plateau))
    return int(hits[0] + w - 1) if hits.size else None


# -- comparison --------------------------------------------------------------------

SHARED_KEYS = ("num_aps", "num_ues", "num_antennas", "area_max", "episode_length",
               "noise_power", "p_ap_max", "tau_c")


def compare(bundles: list, n_bootstrap: int = 1000, seed: int = 0) -> list:
    """Median final sum-SE per bundle, improvement vs. the first bundle, and
    convergence-episode ratios, with bootstrap confidence intervals."""
    if len(bundles) < 2:
        raise ValueError("need at least two bundles to compare")
    base = bundles[0]
    for b in bundles[1:]:
        for key in SHARED_KEYS:
            if b.config.get(key) != base.config.get(key):
                raise ValueError(
                    f"bundle {b.root} differs from {base.root} on {key!r}: "
                    f"{b.config.get(key)} vs {base.config.get(key)}")
    rng = np.random.default_rng(seed)
    base_median = base.median_final_score()
    base_conv = _mean_convergence(base)
    rows = []
    for b in bundles:
        scores = np.array([s.final_score() for s in b.seeds])
        median = float(np.median(scores))
        improvement = 100.0 * (median - base_median) / abs(base_median)
        boot = []
        for _ in range(n_bootstrap):
            pick = rng.integers(0, len(scores), len(scores))
            boot.append(float(np.median(scores[pick])))
        lo, hi = np.percentile(boot, [2.5, 97.5])
        conv = _mean_convergence(b)
        ratio = (conv / base_conv) if (conv and base_conv) else float("nan")
        rows.append({
            "algorithm": b.algorithm,
            "bundle": str(b.root),
            "median_final_sum_se": median,
            "improvement_vs_first_pct": improvement,
            "ci_low": float(lo),
            "ci_high": float(hi),
            "convergence_episode": conv,
            "convergence_ratio": ratio,
        })
    return rows


def _mean_convergence(bundle: MetricsBundle):
    points = [p for p in bundle.convergence_points() if p is not None]
    return float(np.mean(points)) if points else None


# -- plot data ---------------------------------------------------------------------

def emit_plotdata(bundles, figure: str, out_path):
    """One CSV per figure kind; documented column headers, no rendering."""
    if isinstance(bundles, MetricsBundle):
        bundles = [bundles]
    out_path = Path(out_path)
    if figure == "cdf":
        _emit_cdf(bundles[0], out_path)
    elif figure == "convergence":
        _emit_convergence(bundles[0], out_path)
    elif figure == "trajectory":
        _emit_trajectory(bundles[0], out_path)
    elif figure == "scaling":
        _emit_scaling(bundles, out_path)
    else:
        raise ValueError(f"unknown figure kind {figure!r}")
    return out_path


def _emit_cdf(bundle: MetricsBundle, out_path: Path):
    samples = np.sort(bundle.all_sum_samples())
    n = samples.size
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sum_se", "cumulative_probability"])
        last = None
        for i, x in enumerate(samples):
            p = (i + 1) / n
            if last is not None and x == last[0]:
                last = (x, p)        # dedupe equal values, keep the top step
                continue
            if last is not None:
                writer.writerow([repr(float(last[0])), repr(float(last[1]))])
            last = (x, p)
        if last is not None:
            writer.writerow([repr(float(last[0])), repr(float(last[1]))])


def _emit_convergence(bundle: MetricsBundle, out_path: Path):
    lengths = [s.episode_sums.size for s in bundle.seeds]
    n = min(lengths)
    table = np.stack([s.episode_sums[:n] for s in bundle.seeds])
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "mean_sum_se", "min_sum_se", "max_sum_se"])
        for e in range(n):
            col = table[:, e]
            writer.writerow([e, repr(col.mean()), repr(col.min()), repr(col.max())])


def _emit_trajectory(bundle: MetricsBundle, out_path: Path):
    src = bundle.root / f"seed_{bundle.seeds[0].seed}" / "trajectory.csv"
    out_path.write_text(Path(src).read_text())


def _emit_scaling(bundles: list, out_path: Path):
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["num_aps", "algorithm", "median", "q25", "q75"])
        for b in bundles:
            scores = np.array([s.final_score() for s in b.seeds])
            writer.writerow([b.config["num_aps"], b.algorithm,
                             repr(float(np.median(scores))),
                             repr(float(np.percentile(scores, 25))),
                             repr(float(np.percentile(scores, 75)))])
