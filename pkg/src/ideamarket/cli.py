"""Command-line entry point: ``generate``, ``run`` and ``sweep``.

Configuration is a JSON document whose keys mirror the command-line flags;
flags given explicitly override the file. Exit codes: 0 success, 2 bad
configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import SimParams, SteadyConfig
from .experiment import (
    RUN_COLUMNS,
    ExperimentKind,
    ManifestMismatch,
    SweepSpec,
    derive_seed,
    report_row,
    run_persisted_sweep,
    run_seed_id,
    simulate,
    _child,
)
from .metrics import evaluate
from .netgen import Generator, InvalidParameter, NetGenParams, Wiring, build_network
from .table import write_csv

log = logging.getLogger("ideamarket")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# Model defaults; every key accepted in a config file appears here.
DEFAULTS = {
    "n": 10_000,
    "beta": 0.1,
    "kout": 3,
    "p": 0.5,
    "gamma": 0.01,
    "wiring": "random",
    "generator": "rw",
    "rewire_dead_ends": False,
    "mean_degree": 20,
    "mu": 0.75,
    "alpha": 15,
    "phi": 1.0,
    "steady": {"window": None, "rel_tol": 0.05, "consecutive": 3, "max_steps": None},
    "measure_steps": None,
    "seed": 0,
    "replicates": None,
    "workers": 1,
    "out": "out",
    "ledger": True,
    "kind": None,
    "resume": False,
    "sweep": {},
    "verbose": 0,
}
SWEEP_KEYS = {"gamma_grid", "phi_grid", "mu_grid", "alpha_grid"}
STEADY_KEYS = set(DEFAULTS["steady"])


class ConfigError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--out", default=S, help="output directory")
    common.add_argument("--workers", type=int, default=S)
    common.add_argument("--replicates", type=int, default=S)
    common.add_argument("--gamma", type=float, default=S)
    common.add_argument("--phi", type=float, default=S)
    common.add_argument("--mu", type=float, default=S)
    common.add_argument("--alpha", type=int, default=S)
    common.add_argument("--n", type=int, default=S)
    common.add_argument("--beta", type=float, default=S)
    common.add_argument("--kout", type=int, default=S)
    common.add_argument("--p", type=float, default=S)
    common.add_argument("--wiring", choices=[w.value for w in Wiring], default=S)
    common.add_argument("--generator", choices=[g.value for g in Generator], default=S)
    common.add_argument("--mean-degree", dest="mean_degree", type=int, default=S)
    common.add_argument("--rewire-dead-ends", dest="rewire_dead_ends", action="store_true", default=S)
    common.add_argument("--measure-steps", dest="measure_steps", type=int, default=S)
    common.add_argument("-v", "--verbose", action="count", default=S)

    parser = argparse.ArgumentParser(prog="ideamarket", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a follower network edge list")
    run = sub.add_parser("run", parents=[common], help="simulate and write metrics and ledgers")
    run.add_argument("--no-ledger", dest="ledger", action="store_false", default=S)
    sweep = sub.add_parser("sweep", parents=[common], help="run an experiment grid")
    sweep.add_argument("--kind", choices=[k.value for k in ExperimentKind], default=S)
    sweep.add_argument("--resume", action="store_true", default=S)
    return parser


def load_config(args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys in {path}: {sorted(unknown)}")
        for key, allowed in (("steady", STEADY_KEYS), ("sweep", SWEEP_KEYS)):
            bad = set(doc.get(key) or {}) - allowed
            if bad:
                raise ConfigError(f"unknown {key} keys in {path}: {sorted(bad)}")
        steady = {**cfg["steady"], **(doc.pop("steady", None) or {})}
        cfg.update(doc)
        cfg["steady"] = steady
    for key, value in vars(args).items():
        if key in DEFAULTS:
            cfg[key] = value
    return cfg


def params_from_config(cfg: dict) -> SimParams:
    try:
        net = NetGenParams(
            n_humans=int(cfg["n"]),
            beta=float(cfg["beta"]),
            k_out=int(cfg["kout"]),
            p=float(cfg["p"]),
            gamma=float(cfg["gamma"]),
            wiring=Wiring(cfg["wiring"]),
            generator=Generator(cfg["generator"]),
            rewire_dead_ends=bool(cfg["rewire_dead_ends"]),
            mean_degree=int(cfg["mean_degree"]),
        )
        params = SimParams(
            net=net,
            mu=float(cfg["mu"]),
            alpha=int(cfg["alpha"]),
            phi=float(cfg["phi"]),
            steady=SteadyConfig(**cfg["steady"]),
            measure_steps=cfg["measure_steps"],
            seed=int(cfg["seed"]),
        )
        params.validate()
        params.steady.resolve(net.n_humans + net.n_bots)
    except (ValueError, TypeError, InvalidParameter) as exc:
        raise ConfigError(str(exc)) from None
    if not 0.0 <= net.gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {net.gamma}")
    return params


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def cmd_generate(cfg: dict) -> int:
    params = params_from_config(cfg)
    out = _out_dir(cfg)
    net = build_network(params.net, _child(derive_seed(params.seed, 0, 0), 0))
    path = out / "network.tsv"
    net.write_edgelist(path)
    print(f"nodes={net.n_nodes} humans={net.n_humans} bots={net.n_bots} "
          f"links={net.n_links} human_to_bot={net.human_to_bot_links()} -> {path}")
    return EXIT_OK


def cmd_run(cfg: dict) -> int:
    params = params_from_config(cfg)
    replicates = int(cfg["replicates"] or 1)
    out = _out_dir(cfg)
    rows = []
    for r in range(replicates):
        ss = derive_seed(params.seed, 0, r)
        result = simulate(params, ss)
        report = evaluate(result)
        rows.append(report_row(params, run_seed_id(ss), report))
        log.info("replicate %d: Q=%.4f tau=%.4f eta=%.4f converged=%s", r, report.Q, report.tau, report.eta,
                 report.converged)
        if cfg["ledger"]:
            result.ledger.write_csv(out / f"ledger_{r:03d}.csv")
    path = write_csv(out / "metrics.csv", RUN_COLUMNS, rows)
    print(f"{replicates} run(s) -> {path}")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    if not cfg["kind"]:
        raise ConfigError("sweep needs an experiment kind (--kind or \"kind\" in the config)")
    params = params_from_config(cfg)
    grids = {k: tuple(v) for k, v in (cfg["sweep"] or {}).items()}
    extra = {"replicates": int(cfg["replicates"])} if cfg["replicates"] else {}
    try:
        spec = SweepSpec.defaults(cfg["kind"], base_seed=params.seed, **grids, **extra)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(cfg)
    written = run_persisted_sweep(spec, params, out, workers=int(cfg["workers"]), resume=bool(cfg["resume"]))
    for name, path in written.items():
        print(f"{name} -> {path}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        logging.basicConfig(level=logging.WARNING - 10 * int(cfg["verbose"] or 0), format="%(message)s")
        return COMMANDS[args.command](cfg)
    except (ConfigError, ManifestMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
