"""Command line entry point: ``scpo train | verify | eval``.

Exit codes: 0 success, 1 a verification check failed, 2 usage or config
error, 3 training stopped on a non-finite value.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import yaml

from . import __version__
from .nn import NonFiniteError
from .oracle import MASTER_SEED, report_csv
from .trainer import (
    ConfigError,
    NumericAbort,
    TrainConfig,
    atomic_write,
    evaluate,
    init_state,
    load_state,
    run_training,
)
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
DEFAULT_CONFIG = "point_run"
EVAL_FIELDS = ("mean_return", "mean_cost", "cost_std", "safe_fraction", "episodes")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Configs and run directories
# --------------------------------------------------------------------------

def shipped_configs() -> list[str]:
    files = resources.files("scpo").joinpath("configs").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".yaml"))


def read_config_doc(ref: str) -> tuple[dict, str]:
    """Load a YAML config from a path or a shipped config name; returns (doc, stem)."""
    path = Path(ref)
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.is_file():
            raise UsageError(f"config file not found: {ref}")
        text, stem = path.read_text(), path.stem
    else:
        res = resources.files("scpo").joinpath("configs", f"{ref}.yaml")
        if not res.is_file():
            raise UsageError(f"unknown config {ref!r}; shipped configs: {', '.join(shipped_configs())}")
        text, stem = res.read_text(), ref
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise UsageError(f"config {ref}: invalid YAML ({err})") from err
    if not isinstance(doc, dict):
        raise UsageError(f"config {ref}: expected a mapping at top level")
    return doc, stem


def build_config(doc: dict, **overrides) -> TrainConfig:
    """``table:`` selects per-task defaults; every other key is a config field."""
    doc = dict(doc)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    table = doc.pop("table", None)
    if table is not None:
        return TrainConfig.from_table(table, **doc)
    return TrainConfig.from_dict(doc)


def parse_k(text: str):
    if text.lower() in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"k must be a nonnegative integer or 'inf', got {text!r}") from err


def output_root(cli_out: str | None) -> Path:
    if cli_out:
        return Path(cli_out)
    return Path(os.environ.get("SCPO_OUT_DIR", "runs"))


def artifact_hash() -> str:
    """Git-style digest of the package sources: sha1 over sorted (path, blob sha1) pairs."""
    root = resources.files("scpo")
    entries = []
    for path in sorted(Path(str(root)).rglob("*")):
        if path.suffix not in (".py", ".yaml") or "__pycache__" in path.parts:
            continue
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        entries.append(f"{path.relative_to(str(root)).as_posix()} {blob}")
    return hashlib.sha1("\n".join(entries).encode()).hexdigest()


def default_run_id(stem: str, cfg: TrainConfig) -> str:
    return f"{stem}-{cfg.mode}-seed{cfg.seed}"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    doc, stem = read_config_doc(args.config or DEFAULT_CONFIG)
    cfg = build_config(doc, seed=args.seed, mode=args.mode, env=args.env, beta=args.beta, k=args.k,
                       n_iterations=args.iterations)
    run_id = args.run_id or default_run_id(stem, cfg)
    run_dir = output_root(args.out) / run_id
    if run_dir.exists():
        raise UsageError(f"run id {run_id!r} already exists at {run_dir}; choose another --run-id")
    run_dir.mkdir(parents=True)
    manifest = {"run_id": run_id, "config": cfg.to_dict(), "master_seed": cfg.seed,
                "artifact_hash": artifact_hash(), "output_dir": str(run_dir), "version": __version__}
    atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    t0 = time.perf_counter()
    try:
        state, history = run_training(cfg, out_dir=str(run_dir))
    except (NumericAbort, NonFiniteError) as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_ABORT
    last = history[-1]
    print(f"run {run_id}: {len(history)} iterations, {state.env_steps} env steps, "
          f"final mean_return={last.mean_return:.3f} mean_cost={last.mean_cost:.3f} "
          f"({time.perf_counter() - t0:.1f}s) -> {run_dir}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = MASTER_SEED if args.seed is None else args.seed
    t0 = time.perf_counter()
    rows = run_suite(args.suite, seed)
    out_dir = output_root(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"verify_{args.suite}_seed{seed}.csv"
    atomic_write(path, report_csv(rows))
    failed = [r for r in rows if not r.passed]
    for r in failed[:20]:
        print(f"FAIL {r.check} seed={r.instance_seed} value={r.value!r}")
    status = "FAIL" if failed else "PASS"
    print(f"{status} suite={args.suite} checks={len(rows)} failed={len(failed)} "
          f"({time.perf_counter() - t0:.1f}s) -> {path}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    if (args.checkpoint is None) == (args.config is None):
        raise UsageError("give exactly one of a checkpoint path or --config (fresh policy)")
    seed = 0 if args.seed is None else args.seed
    if args.checkpoint is not None:
        path = Path(args.checkpoint)
        if not path.is_file():
            raise UsageError(f"checkpoint not found: {path}")
        try:
            state = load_state(path)
        except (ValueError, KeyError, OSError) as err:
            raise UsageError(f"cannot load checkpoint {path}: {err}") from err
        if args.env is not None and args.env != state.env.name:
            raise UsageError(f"checkpoint was trained on {state.env.name!r}, not {args.env!r}")
        default_dir, label = path.parent, path.stem
    else:
        doc, stem = read_config_doc(args.config)
        state = init_state(build_config(doc, env=args.env))
        default_dir, label = output_root(None), f"{stem}-init"
    res = evaluate(state, args.episodes, seed)
    out_dir = Path(args.out) if args.out else default_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"eval_{label}_seed{seed}.csv"
    row = [repr(res.mean_return), repr(res.mean_cost), repr(res.cost_std), repr(res.safe_fraction), str(res.episodes)]
    atomic_write(csv_path, ",".join(EVAL_FIELDS) + "\n" + ",".join(row) + "\n")
    print(f"env={state.env.name} episodes={res.episodes} mean_return={res.mean_return:.3f} "
          f"mean_cost={res.mean_cost:.3f} cost_std={res.cost_std:.3f} safe_fraction={res.safe_fraction:.3f}"
          f" -> {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scpo", description="Safety-critic policy optimisation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy from a YAML config")
    t.add_argument("--config", help=f"YAML path or shipped name (default {DEFAULT_CONFIG})")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=("scpo", "lagrangian", "unconstrained"))
    t.add_argument("--env")
    t.add_argument("--beta", type=float)
    t.add_argument("--k", type=parse_k)
    t.add_argument("--iterations", type=int, help="override n_iterations")
    t.add_argument("--run-id")
    t.add_argument("--out", help="output root (default $SCPO_OUT_DIR or ./runs)")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run a verification suite and write a CSV report")
    v.add_argument("--suite", required=True, help=" | ".join(SUITES))
    v.add_argument("--seed", type=int, help=f"master seed for random batches (default {MASTER_SEED})")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or a freshly initialised policy)")
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("--config", help="evaluate the untrained policy of this config instead")
    e.add_argument("--env")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify" and args.suite not in SUITES:
        print(f"scpo verify: unknown suite {args.suite!r}; choose from {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"scpo {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
