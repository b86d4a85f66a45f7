"""Command-line front end.

    monoimprove certify     randomized certification of every bound inequality
    monoimprove improve     exact bound-guided policy improvement on a tabular env
    monoimprove train       TRPO with experience replay, alpha x seed sweep
    monoimprove export-env  write an environment's MDP as JSON

Settings come from (lowest to highest priority) built-in defaults, a TOML file
given by ``--config``, and command-line flags.  Exit codes: 0 success,
1 usage error, 2 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import bounds, improver, trpo_er
from .environments import EnvSpec, build
from .mdp import PolicyTable

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2

DEFAULT_ALPHAS = (0.0, 0.5, 0.75, 0.8, 0.9, 0.99, 1.0)

FP_CAVEAT = (
    "byte-identical reruns assume the same numpy/BLAS build and CPU floating-point "
    "behaviour; different LAPACK kernels may change the last bits of solved values"
)

DEFAULTS = {
    "certify": {
        "n_tuples": 10000, "seed": 1, "states": [2, 10], "actions": [2, 5],
        "gammas": list(bounds.GAMMAS), "identical": False, "out": None,
    },
    "improve": {
        "env": "chain", "env_params": {}, "env_seed": 0, "gamma": 0.9, "alpha": 1.0,
        "bound_kind": "tv", "max_iters": 200, "beta": "uniform", "seed": 0, "out": None,
    },
    "train": {
        "env": "gridworld", "env_params": {"width": 6, "height": 6, "step_penalty": -0.01},
        "env_seed": 0, "alphas": list(DEFAULT_ALPHAS), "n_seeds": 10, "epochs": 100, "seed": 0,
        "gamma": 0.99, "lam": 0.98, "delta": 0.01, "traj_len": 1000, "buffer_cap": 100,
        "draw_count": 10, "audit": False, "jobs": 1, "out": "train_out",
    },
    "export-env": {"env": "chain", "env_params": {}, "env_seed": 0, "gamma": 0.99, "seed": 0, "out": None},
}


class UsageError(Exception):
    pass


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    import tomli

    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return {k.replace("-", "_"): v for k, v in data.items()}


def _parse_param(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--env-param expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--config", help="TOML file of settings")
    common.add_argument("--out", help="output path (file, or directory for train)")

    env = argparse.ArgumentParser(add_help=False)
    env.add_argument("--env", choices=("chain", "gridworld", "random"))
    env.add_argument("--env-param", action="append", default=None, metavar="KEY=VALUE")
    env.add_argument("--env-seed", type=int)
    env.add_argument("--gamma", type=float)

    p = argparse.ArgumentParser(prog="monoimprove", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", parents=[common], help="certify the bounds on random tuples")
    c.add_argument("--n-tuples", type=int)
    c.add_argument("--states", type=_ints, help="min,max states")
    c.add_argument("--actions", type=_ints, help="min,max actions")
    c.add_argument("--gammas", type=_floats)
    c.add_argument("--identical", action="store_true", default=None, help="force pi' = pi = beta")

    i = sub.add_parser("improve", parents=[common, env], help="exact safe policy improvement")
    i.add_argument("--alpha", type=float)
    i.add_argument("--bound-kind", choices=("tv", "kl"))
    i.add_argument("--max-iters", type=int)
    i.add_argument("--beta", choices=("uniform", "replay", "on-policy"))

    t = sub.add_parser("train", parents=[common, env], help="TRPO with experience replay")
    t.add_argument("--alphas", type=_floats)
    t.add_argument("--n-seeds", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--delta", type=float)
    t.add_argument("--traj-len", type=int)
    t.add_argument("--buffer-cap", type=int)
    t.add_argument("--draw-count", type=int)
    t.add_argument("--audit", action="store_true", default=None)
    t.add_argument("--jobs", type=int)

    sub.add_parser("export-env", parents=[common, env], help="write an environment MDP as JSON")
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    file_cfg = load_config(args.config)
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("command", "config", "env_param") or value is None:
            continue
        cfg[key] = value
    if "env" in cfg and cfg["env"] != DEFAULTS[args.command]["env"] and "env_params" not in file_cfg:
        # built-in params belong to the built-in env kind only
        cfg["env_params"] = {}
    if getattr(args, "env_param", None):
        params = dict(cfg.get("env_params") or {})
        params.update(_parse_param(x) for x in args.env_param)
        cfg["env_params"] = params
    return cfg


def _env_spec(cfg: dict) -> EnvSpec:
    return EnvSpec(cfg["env"], dict(cfg["env_params"]), int(cfg["env_seed"]), float(cfg["gamma"]))


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_certify(cfg: dict) -> int:
    n = int(cfg["n_tuples"])
    if n < 1:
        raise UsageError("n_tuples must be at least 1")
    states, actions = tuple(cfg["states"]), tuple(cfg["actions"])
    gammas = tuple(float(g) for g in cfg["gammas"])
    out = io.StringIO()
    worst: dict[str, float] = {}
    violations = 0
    cor5_le_thm1 = 0
    for idx in range(n):
        rng = bounds.tuple_rng(cfg["seed"], idx)
        tup = bounds.random_tuple(rng, states, actions, gammas, identical=bool(cfg["identical"]))
        report = bounds.bound_report(*tup)
        row = {"index": idx, **report.to_dict()}
        for k, v in report.slacks().items():
            if math.isfinite(v):
                worst[k] = min(worst.get(k, math.inf), v)
        cor5_le_thm1 += report.verdicts["cor5_le_thm1"]
        if not report.valid:
            violations += 1
            row["tuple"] = json.loads(bounds.tuple_dump(*tup))
            sys.stderr.write(f"violation at tuple {idx}: {report.verdicts}\n")
        out.write(json.dumps(row) + "\n")
    summary = {
        "summary": {
            "n_tuples": n, "root_seed": cfg["seed"], "violations": violations,
            "min_slack": worst, "cor5_le_thm1_count": cor5_le_thm1, "fp_caveat": FP_CAVEAT,
        }
    }
    out.write(json.dumps(summary) + "\n")
    _write(cfg["out"], out.getvalue())
    return EXIT_OK if violations == 0 else EXIT_VIOLATION


def _beta_schedule(name: str, mdp):
    if name == "uniform":
        return PolicyTable.uniform(mdp.n_states, mdp.n_actions)
    return name


def cmd_improve(cfg: dict) -> int:
    mdp = build(_env_spec(cfg))
    pi0 = PolicyTable.uniform(mdp.n_states, mdp.n_actions)
    try:
        steps = improver.improve_until_converged(
            mdp, pi0, _beta_schedule(cfg["beta"], mdp), float(cfg["alpha"]),
            cfg["bound_kind"], int(cfg["max_iters"]),
        )
    except bounds.BoundViolation as exc:
        sys.stderr.write(f"{exc}\n{exc.dump}\n")
        return EXIT_VIOLATION
    _write(cfg["out"], improver.steps_to_csv(steps))
    return EXIT_OK


def _train_config(cfg: dict, alpha: float) -> trpo_er.TrainConfig:
    return trpo_er.TrainConfig(
        alpha=float(alpha), gamma=float(cfg["gamma"]), lam=float(cfg["lam"]),
        delta=float(cfg["delta"]), traj_len=int(cfg["traj_len"]), buffer_cap=int(cfg["buffer_cap"]),
        draw_count=int(cfg["draw_count"]), audit=bool(cfg["audit"]),
    )


def cell_seed(root_seed: int, seed_index: int) -> np.random.SeedSequence:
    """Seed for run ``seed_index``; shared across alphas (common random numbers)."""
    return np.random.SeedSequence([int(root_seed), int(seed_index)])


def _run_cell(args) -> tuple[float, int, str, list[float], bool]:
    cfg, alpha, k = args
    mdp = build(_env_spec(cfg))
    config = _train_config(cfg, alpha)
    records = trpo_er.train(mdp, config, int(cfg["epochs"]), cell_seed(cfg["seed"], k))
    ok = all(r.audit_ok is not False for r in records)
    return alpha, k, trpo_er.records_to_csv(records), [r.mean_return for r in records], ok


def aggregate(curves: dict[float, list[list[float]]]) -> str:
    """epoch, alpha, mean_return, stderr_return over seeds (stderr = sd / sqrt(n))."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "alpha", "mean_return", "stderr_return"))
    for alpha, runs in curves.items():
        arr = np.asarray(runs, dtype=float)
        n = arr.shape[0]
        mean = arr.mean(axis=0)
        se = arr.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(arr.shape[1])
        for e in range(arr.shape[1]):
            w.writerow((e, repr(float(alpha)), repr(float(mean[e])), repr(float(se[e]))))
    return buf.getvalue()


def cell_filename(alpha: float, k: int) -> str:
    return f"epochs_alpha{alpha!r}_seed{k}.csv"


def cmd_train(cfg: dict) -> int:
    build(_env_spec(cfg))  # fail fast on a bad env spec
    alphas = [float(a) for a in cfg["alphas"]]
    cells = [(cfg, a, k) for a in alphas for k in range(int(cfg["n_seeds"]))]
    if int(cfg["jobs"]) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["jobs"])) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    curves: dict[float, list[list[float]]] = {a: [] for a in alphas}
    audit_ok = True
    for alpha, k, text, curve, ok in results:
        _write(os.path.join(out_dir, cell_filename(alpha, k)), text)
        curves[alpha].append(curve)
        audit_ok &= ok
    _write(os.path.join(out_dir, "aggregate.csv"), aggregate(curves))
    manifest = {
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "numpy": np.__version__, "python": platform.python_version(),
        "fp_caveat": FP_CAVEAT, "audit_ok": audit_ok if cfg["audit"] else None,
    }
    _write(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if audit_ok else EXIT_VIOLATION


def cmd_export_env(cfg: dict) -> int:
    _write(cfg["out"], build(_env_spec(cfg)).to_json() + "\n")
    return EXIT_OK


COMMANDS = {"certify": cmd_certify, "improve": cmd_improve, "train": cmd_train, "export-env": cmd_export_env}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
