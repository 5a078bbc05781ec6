"""Command-line front end.

Subcommands: train, evaluate, baseline, compare, plotdata, selftest. Flags
mirror the experiment-config keys; --config loads a JSON file first and
explicit flags override it. Output goes under --out-root, the CFMARL_OUT
environment variable, or ./runs.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ALGORITHMS, ConfigError, ExperimentConfig
from .linalg import NumericError
from .trainer import TrainingAborted

_TUPLE_KEYS = {"seeds", "head_hidden", "critic_hidden"}
_SKIP_KEYS = {"outdir"}


def _add_config_flags(parser: argparse.ArgumentParser):
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _SKIP_KEYS:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        elif f.name in _TUPLE_KEYS:
            parser.add_argument(flag, dest=f.name, default=None,
                                help="comma-separated list")
        else:
            parser.add_argument(flag, dest=f.name, default=None)


def _collect_config(args) -> ExperimentConfig:
    data = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}:{exc.lineno}: {exc.msg}") from exc
    field_types = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for name, f in field_types.items():
        if name in _SKIP_KEYS or not hasattr(args, name):
            continue
        raw = getattr(args, name)
        if raw is None:
            continue
        if name in _TUPLE_KEYS:
            parts = [p for p in str(raw).replace(",", " ").split() if p]
            data[name] = [int(p) for p in parts]
        elif isinstance(raw, bool):
            data[name] = raw
        else:
            data[name] = _coerce(raw, f.default)
    if getattr(args, "outdir", None):
        data["outdir"] = args.outdir
    return ExperimentConfig.from_dict(data)


def _coerce(raw, default):
    if isinstance(default, bool):
        return bool(raw)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            return raw
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            return raw   # unit-suffixed strings parse downstream
    return raw


def _out_root(args) -> Path:
    return Path(args.out_root or os.environ.get("CFMARL_OUT", "runs"))


# -- subcommands -----------------------------------------------------------------

def cmd_train(args) -> int:
    from .runner import run_experiment
    experiment = _collect_config(args)
    root = run_experiment(experiment, _out_root(args))
    print(f"results written to {root}")
    return 0


def cmd_baseline(args) -> int:
    from .runner import run_experiment
    experiment = _collect_config(args)
    if experiment.algorithm not in ("fractional", "random"):
        raise ConfigError("baseline requires --algorithm fractional or random")
    root = run_experiment(experiment, _out_root(args))
    print(f"baseline results written to {root}")
    return 0


def cmd_evaluate(args) -> int:
    from . import policy as polmod
    from .runner import evaluate_policy, _write_samples
    from .rng import RngStream
    from .trainer import Trainer
    experiment = _collect_config(args)
    trainer = Trainer(experiment.env_config(), experiment.policy_config(),
                      experiment.trainer_config(), RngStream(experiment.seeds[0]))
    trainer.policy = polmod.load_params(args.checkpoint)
    sums, per_ue, trajectory = evaluate_policy(
        trainer, experiment, experiment.eval_episodes,
        RngStream(experiment.seeds[0]).derive(101))
    out = _out_root(args) / (experiment.outdir or "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    _write_samples(out / "cdf_samples.csv", sums, per_ue)
    print(f"median sum SE {np.median(sums):.4f} over {len(sums)} samples -> {out}")
    return 0


def cmd_compare(args) -> int:
    from .metrics import MetricsBundle, compare
    bundles = [MetricsBundle.load(p) for p in args.bundles]
    try:
        rows = compare(bundles)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    header = ["algorithm", "median_final_sum_se", "improvement_vs_first_pct",
              "ci_low", "ci_high", "convergence_episode", "convergence_ratio"]
    print("\t".join(header))
    for row in rows:
        print("\t".join(_fmt(row[k]) for k in header))
    if args.out:
        import csv
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return 0


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def cmd_plotdata(args) -> int:
    from .metrics import MetricsBundle, emit_plotdata
    bundles = [MetricsBundle.load(p) for p in args.bundles]
    out = Path(args.out or f"{args.figure}.csv")
    emit_plotdata(bundles if args.figure == "scaling" else bundles[0],
                  args.figure, out)
    print(f"wrote {out}")
    return 0


def cmd_selftest(args) -> int:
    failures = _selftest()
    return 0 if failures == 0 else 3


def _selftest() -> int:
    """Condensed invariant checks across the numeric stack."""
    import numpy as np
    from . import autodiff as ad
    from .autodiff import Tensor, grad
    from .env import EnvConfig, random_actions, reset, step
    from .linalg import sample_complex_gaussian
    from .policy import PolicyConfig, act, init_policy_params
    from .rng import RngStream

    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1

    a = RngStream(7, 3).standard_normal((64,))
    b = RngStream(7, 3).standard_normal((64,))
    check("rng determinism", np.array_equal(a, b))

    draws = sample_complex_gaussian(np.eye(3), RngStream(1), size=20000)
    cov = draws.conj().T @ draws / 20000
    check("complex gaussian covariance", np.linalg.norm(cov - np.eye(3)) < 0.1)

    x = Tensor(np.random.default_rng(0).standard_normal((4, 4)), requires_grad=True)
    out = ad.sum_(ad.square(ad.softmax(x, axis=-1)))
    g = grad(out, [x])[0]
    eps = 1e-5
    x.value[0, 0] += eps
    up = ad.sum_(ad.square(ad.softmax(x, axis=-1))).item()
    x.value[0, 0] -= 2 * eps
    dn = ad.sum_(ad.square(ad.softmax(x, axis=-1))).item()
    x.value[0, 0] += eps
    fd = (up - dn) / (2 * eps)
    check("gradient vs finite difference", abs(fd - g[0, 0]) < 1e-6 * max(1, abs(fd)))

    cfg = PolicyConfig(feature_dim=7, num_ues=3, num_antennas=2, d_r=8,
                       hyper_hidden=8, head_hidden=(8, 8))
    ps = init_policy_params(cfg, RngStream(2))
    obs = np.random.default_rng(1).standard_normal((3, 7))
    perm = np.array([2, 0, 1])
    base = act(ps, obs, np.zeros(8), cfg)
    permuted = act(ps, obs[perm], np.zeros(8), cfg)
    check("mobility permutation invariance",
          np.array_equal(base.env_actions[:2], permuted.env_actions[:2]))
    check("power-split permutation equivariance",
          np.array_equal(base.env_actions[2:5][perm], permuted.env_actions[2:5]))

    env_cfg = EnvConfig(num_aps=2, num_ues=2, num_antennas=2, mc_draws=100)
    state, _ = reset(env_cfg, RngStream(3))
    rng = RngStream(4)
    ok = True
    for i in range(5):
        state, res = step(state, random_actions(env_cfg, rng), rng.derive(i))
        ok = ok and all(res.flags[k] for k in
                        ("d_min_ok", "bounds_ok", "ap_power_ok", "antenna_power_ok"))
    check("constraints under random actions", ok)
    print(f"{failures} failure(s)")
    return failures


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfmarl",
        description="Mobile cell-free massive MIMO: MARL power/mobility control")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-root", default=None,
                        help="output root (default: $CFMARL_OUT or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("train", cmd_train), ("baseline", cmd_baseline),
                     ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--outdir", help="run name under the output root")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
        _add_config_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("compare", parents=[common])
    p.add_argument("bundles", nargs="+")
    p.add_argument("--out", help="write the comparison table as CSV")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("plotdata", parents=[common])
    p.add_argument("bundles", nargs="+")
    p.add_argument("--figure", required=True,
                   choices=("cdf", "convergence", "trajectory", "scaling"))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plotdata)

    p = sub.add_parser("selftest", parents=[common])
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
