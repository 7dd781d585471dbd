"""Sweeps over configuration grids, with resumable per-config run directories."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import harness
from .config import GRID_DOMAINS, LAYER_PRESETS, ConfigError, FederationConfig, derive_seed

log = logging.getLogger(__name__)

# the full table: 4 * 2 * 2 * 3 * 3 * 3 = 432 configurations
TABLE_GRID = {**GRID_DOMAINS, "hidden": tuple(LAYER_PRESETS.values())}

CONFIG_COLUMNS = ("d", "sampling", "users", "subjects_per_user", "items_per_user", "hidden",
                  "rounds", "batch_size", "learning_rate", "access_mode", "validation_subject_count",
                  "dp_granularity", "dp_clip_threshold", "dp_noise_multiplier")
METRIC_COLUMNS = ("model_accuracy",
                  "lt_accuracy", "lt_precision", "lt_recall", "lt_f1",
                  "lar_accuracy", "lar_precision", "lar_recall", "lar_f1", "epsilon")
COLUMNS = ("config_hash", "seed", "status", *CONFIG_COLUMNS, *METRIC_COLUMNS, "error")


@dataclass
class GridResult:
    rows: list
    executed: list = field(default_factory=list)  # config hashes run in this call
    failed: list = field(default_factory=list)
    csv_path: Path | None = None


def expand_grid(grid: dict, base: FederationConfig, master_seed: int = 0) -> list[FederationConfig]:
    """Cross-product of `grid` over `base`, each config with its own derived seed."""
    if not grid:
        raise ConfigError("empty grid")
    names = list(grid)
    for name in names:
        if not list(grid[name]):
            raise ConfigError(f"grid field {name!r} has no values")
    out = []
    for combo in itertools.product(*(grid[n] for n in names)):
        cfg = base.replace(**dict(zip(names, combo)))
        out.append(cfg.replace(seed=derive_seed(master_seed, cfg)))
    return out


def run_dir(out_dir, cfg: FederationConfig) -> Path:
    return Path(out_dir) / "runs" / cfg.config_hash()


def _run_one(cfg_dict: dict, directory: str) -> tuple[str, str]:
    cfg = FederationConfig.from_dict(cfg_dict)
    try:
        harness.run_experiment(cfg, directory)
    except Exception as exc:  # recorded, never fatal to the sweep
        Path(directory).mkdir(parents=True, exist_ok=True)
        harness.atomic_write_text(Path(directory) / "error.txt", traceback.format_exc())
        return "failed", f"{type(exc).__name__}: {exc}"
    return "ok", ""


def run_grid(grid: dict, base: FederationConfig, out_dir, parallelism: int = 1,
             master_seed: int = 0) -> GridResult:
    """Run every config of the grid that has no finished report yet, then write ``grid.csv``."""
    out_dir = Path(out_dir)
    configs = expand_grid(grid, base, master_seed)
    pending = [c for c in configs if not (run_dir(out_dir, c) / "report.json").exists()]
    log.info("%d configs, %d to run", len(configs), len(pending))
    outcomes = {}
    jobs = [(c.to_dict(), str(run_dir(out_dir, c))) for c in pending]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = pool.map(_run_one, *zip(*jobs))
            for cfg, res in zip(pending, results):
                outcomes[cfg.config_hash()] = res
    else:
        for cfg, job in zip(pending, jobs):
            outcomes[cfg.config_hash()] = _run_one(*job)
    failed = [h for h, (status, _) in outcomes.items() if status != "ok"]
    for h in failed:
        log.warning("config %s failed: %s", h, outcomes[h][1])
    rows = [grid_row(cfg, run_dir(out_dir, cfg), outcomes.get(cfg.config_hash())) for cfg in configs]
    path = write_grid_csv(rows, out_dir / "grid.csv")
    return GridResult(rows, list(outcomes), failed, path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "-".join(str(x) for x in v)
    return str(v)


def config_columns(cfg: FederationConfig) -> dict:
    row = {name: getattr(cfg, name) for name in CONFIG_COLUMNS if not name.startswith("dp_")}
    dp = cfg.dp
    row["dp_granularity"] = dp.granularity if dp else None
    row["dp_clip_threshold"] = dp.clip_threshold if dp else None
    row["dp_noise_multiplier"] = dp.noise_multiplier if dp else None
    return row


def grid_row(cfg: FederationConfig, directory: Path, outcome=None) -> dict:
    row = {"config_hash": cfg.config_hash(), "seed": cfg.seed, **config_columns(cfg)}
    report = directory / "report.json"
    if report.exists():
        with open(report) as fh:
            row.update(harness.summary_row(json.load(fh)))
        row["status"] = "ok"
    else:
        row["status"] = "failed" if outcome else "missing"
        row["error"] = outcome[1] if outcome else None
    return row


def write_grid_csv(rows, path) -> Path:
    lines = []
    for row in rows:
        lines.append([_fmt(row.get(c)) for c in COLUMNS])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        w.writerows(lines)
    return path


def collect_reports(root) -> list[dict]:
    """Summary rows for every finished report below `root`."""
    rows = []
    for path in sorted(Path(root).rglob("report.json")):
        with open(path) as fh:
            report = json.load(fh)
        cfg = FederationConfig.from_dict(report["config"])
        rows.append({"config_hash": report["config_hash"], "seed": report["seed"], "status": "ok",
                     **config_columns(cfg), **harness.summary_row(report)})
    return rows


def load_grid_file(path) -> tuple[dict, FederationConfig]:
    """Read a sweep description: ``base`` (a config document) and ``grid`` (field -> values)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    unknown = set(doc) - {"base", "grid"}
    if unknown:
        raise ConfigError(f"unknown keys in grid file: {sorted(unknown)}")
    base = FederationConfig.from_dict(doc.get("base") or {})
    grid = doc.get("grid") or TABLE_GRID
    bad = set(grid) - {f for f in FederationConfig.__dataclass_fields__} - {"seed"}
    if bad:
        raise ConfigError(f"unknown grid fields: {sorted(bad)}")
    if "hidden" in grid:
        grid = {**grid, "hidden": [tuple(h) for h in grid["hidden"]]}
    return grid, base
