"""Command-line entry point: ``subjectmia {gen,train,attack,run,grid,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import attacks, fedsim, grid, harness
from .config import FederationConfig, dump_config, load_config
from .synthgen import build_federation, load_federation, save_federation

log = logging.getLogger("subjectmia")

ATTACK_CHOICES = {
    "loss-threshold": (attacks.LOSS_THRESHOLD,),
    "loss-across-rounds": (attacks.LOSS_ACROSS_ROUNDS,),
    "both": attacks.ATTACK_KINDS,
}


def _config(args) -> FederationConfig:
    cfg = load_config(args.config) if args.config else FederationConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fed = build_federation(cfg)
    save_federation(fed, out / "federation.npz")
    dump_config(cfg, out / "config.yaml")
    print(f"{fed.n_users} users, {len(fed.member_subjects)} members, "
          f"{len(fed.nonmember_subjects)} non-members -> {out / 'federation.npz'}")
    return 0


def _federation_for(cfg, out: Path):
    path = out / "federation.npz"
    return load_federation(path) if path.exists() else build_federation(cfg)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fed = _federation_for(cfg, out)
    fed, snapshots = harness.train(cfg, fed)
    save_federation(fed, out / "federation.npz")
    fedsim.save_snapshots(snapshots, out / "snapshots")
    dump_config(cfg, out / "config.yaml")
    print(f"trained {cfg.rounds} rounds -> {out / 'snapshots'}")
    return 0


def cmd_attack(args) -> int:
    out = Path(args.out)
    if args.config is None and (out / "config.yaml").exists():
        args.config = out / "config.yaml"
    cfg = _config(args)
    snapshots = fedsim.load_snapshots(out / "snapshots")
    fed = _federation_for(cfg, out)
    report = harness.assess(cfg, fed, snapshots, ATTACK_CHOICES[args.attack], time.perf_counter())
    harness.write_outputs(report, out)
    _print_report(report)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    report = harness.run_experiment(cfg, args.out, save_snapshots=True,
                                    kinds=ATTACK_CHOICES[args.attack])
    dump_config(cfg, Path(args.out) / "config.yaml")
    _print_report(report)
    return 0


def cmd_grid(args) -> int:
    if args.config:
        values, base = grid.load_grid_file(args.config)
    else:
        values, base = grid.TABLE_GRID, FederationConfig()
    result = grid.run_grid(values, base, args.out, args.parallelism, args.seed or 0)
    ok = sum(r["status"] == "ok" for r in result.rows)
    print(f"{len(result.rows)} configs, {len(result.executed)} run now, {ok} complete, "
          f"{len(result.failed)} failed -> {result.csv_path}")
    return 1 if result.failed else 0


def cmd_report(args) -> int:
    rows = grid.collect_reports(args.out)
    if not rows:
        print(f"no reports under {args.out}", file=sys.stderr)
        return 1
    path = grid.write_grid_csv(rows, Path(args.out) / "grid.csv")
    print(f"{len(rows)} reports -> {path}")
    return 0


def _print_report(report: harness.ExperimentReport) -> None:
    print(f"model accuracy {report.final_accuracy:.4f}")
    for kind, rep in report.attacks.items():
        m = rep.metrics
        print(f"{kind}: F1 {m.f1:.4f}  precision {m.precision:.4f}  recall {m.recall:.4f}")
    if report.epsilon is not None:
        print(f"epsilon {report.epsilon:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subjectmia", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen": (cmd_gen, "generate a federation and save it"),
        "train": (cmd_train, "train a federation and save per-round snapshots"),
        "attack": (cmd_attack, "attack the snapshots in an output directory"),
        "run": (cmd_run, "generate, train and attack one configuration"),
        "grid": (cmd_grid, "sweep a configuration grid"),
        "report": (cmd_report, "aggregate finished reports into grid.csv"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", type=Path, help="YAML config (a grid file for `grid`)")
        p.add_argument("--seed", type=int, help="seed override (master seed for `grid`)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "grid":
            p.add_argument("--parallelism", type=int, default=1)
        if name in ("attack", "run"):
            p.add_argument("--attack", choices=list(ATTACK_CHOICES), default="both")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
