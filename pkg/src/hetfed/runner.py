"""Experiment orchestration: seed loops, parameter sweeps, cross-seed
aggregation, and deterministic report emission.

Accuracy degradation is paired by seed: for every (cell, seed) the runner also
executes the matching sigma=0 run with the identical seed and subtracts final
local accuracies, so initialization variance cancels. Participation shares are
reported both at the convergence trigger and at the actual stop.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from hetfed.config import SWEEPABLE_FIELDS, ConfigError, ExperimentConfig
from hetfed.sim import RunReport, run

MANIFEST_VERSION = 1


@dataclass
class CellResult:
    axis_values: dict
    reports: dict[int, RunReport]  # seed -> report
    baselines: dict[int, RunReport]  # sigma=0 runs, same seeds (empty when cell sigma == 0)
    failed: dict[int, str] = field(default_factory=dict)  # seed -> error message

    @property
    def label(self) -> str:
        return cell_label(self.axis_values)


@dataclass
class SweepBundle:
    config: ExperimentConfig
    axes: dict[str, list]
    cells: list[CellResult]


def cell_label(axis_values: dict) -> str:
    if not axis_values:
        return "base"
    return "_".join(f"{k}{v}" for k, v in sorted(axis_values.items()))


def _run_cell_seed(config: ExperimentConfig, seed: int) -> RunReport:
    return run(config.with_seed(seed))


def run_single(config: ExperimentConfig, seed: Optional[int] = None) -> RunReport:
    return run(config.with_seed(config.seed if seed is None else seed))


def validate_axes(axes: dict[str, list]) -> None:
    for name, values in axes.items():
        if name not in SWEEPABLE_FIELDS:
            raise ConfigError(f"axis {name!r} is not sweepable; choose from {SWEEPABLE_FIELDS}")
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"axis {name!r} needs a non-empty list of values")


def run_sweep(config: ExperimentConfig, axes: dict[str, list], parallelism: int = 1) -> SweepBundle:
    """Cartesian product of axis values x seeds, plus paired sigma=0 baselines.

    A run that raises marks its (cell, seed) as failed and the sweep continues.
    """
    validate_axes(axes)
    names = sorted(axes)
    grids: list[dict] = [{}]
    for name in names:
        grids = [dict(g, **{name: v}) for g in grids for v in axes[name]]

    jobs: dict[tuple[str, int, bool], ExperimentConfig] = {}
    for axis_values in grids:
        cell_cfg = replace(config, **axis_values)
        label = cell_label(axis_values)
        for seed in config.seeds:
            jobs[(label, seed, False)] = cell_cfg.with_seed(seed)
            if cell_cfg.sigma != 0.0:
                with warnings.catch_warnings():
                    # internal degradation baselines run at sigma=0 by design
                    warnings.simplefilter("ignore", UserWarning)
                    jobs[(label, seed, True)] = replace(cell_cfg, sigma=0.0).with_seed(seed)

    results: dict[tuple[str, int, bool], RunReport | Exception] = {}
    ordered = sorted(jobs)
    if parallelism > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = {key: pool.submit(run, jobs[key]) for key in ordered}
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as err:  # noqa: BLE001 - cell failures are data
                    results[key] = err
    else:
        for key in ordered:
            try:
                results[key] = run(jobs[key])
            except Exception as err:  # noqa: BLE001
                results[key] = err

    cells = []
    for axis_values in grids:
        label = cell_label(axis_values)
        reports, baselines, failed = {}, {}, {}
        for seed in config.seeds:
            main = results.get((label, seed, False))
            if isinstance(main, Exception):
                failed[seed] = f"{type(main).__name__}: {main}"
            elif main is not None:
                reports[seed] = main
            base = results.get((label, seed, True))
            if isinstance(base, Exception):
                failed[seed] = failed.get(seed, "") + f" baseline: {type(base).__name__}: {base}"
            elif base is not None:
                baselines[seed] = base
        cells.append(CellResult(axis_values=axis_values, reports=reports, baselines=baselines, failed=failed))
    return SweepBundle(config=config, axes=axes, cells=cells)


# ---------------------------------------------------------------- aggregation

def _mean_std(values: list[float]) -> tuple[Optional[float], Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    if len(vals) == 1:
        return float(vals[0]), None
    return float(np.mean(vals)), float(np.std(vals, ddof=1))


def aggregate_cell(cell: CellResult, config: ExperimentConfig) -> dict:
    """Per-cell cross-seed means and stddevs for the reported metrics."""
    tiers = [p.tier_name for p in config.profiles]
    per_tier = {}
    for tier in tiers:
        eps = [rep.per_client[tier].final_epsilon for rep in cell.reports.values()]
        share_stop = [rep.per_client[tier].participation_pct for rep in cell.reports.values()]
        share_target = [
            rep.participation_at_target[tier]
            for rep in cell.reports.values()
            if rep.participation_at_target is not None
        ]
        degradation = []
        for seed, rep in cell.reports.items():
            base = cell.baselines.get(seed)
            if base is None:
                degradation.append(0.0 if config_sigma(cell, config) == 0.0 else None)
                continue
            a = rep.per_client[tier].final_local_accuracy
            b = base.per_client[tier].final_local_accuracy
            degradation.append(None if a is None or b is None else b - a)
        stale = [
            rep.per_client[tier].staleness_mean
            for rep in cell.reports.values()
            if rep.per_client[tier].staleness_mean is not None
        ]
        updates = [rep.per_client[tier].update_count for rep in cell.reports.values()]
        per_tier[tier] = {
            "epsilon": _mean_std(eps),
            "acc_degradation": _mean_std(degradation),
            "participation_pct": _mean_std(share_stop),
            "participation_pct_at_target": _mean_std(share_target),
            "staleness_mean": _mean_std(stale),
            "update_count": _mean_std([float(u) for u in updates]),
        }
    times = [rep.time_to_target for rep in cell.reports.values()]
    finals = [rep.final_pooled_accuracy for rep in cell.reports.values()]
    return {
        "axis_values": cell.axis_values,
        "seeds_completed": sorted(cell.reports),
        "seeds_failed": {str(k): v for k, v in sorted(cell.failed.items())},
        "per_tier": per_tier,
        "time_to_target": _mean_std(times),
        "converged_seeds": len([t for t in times if t is not None]),
        "final_pooled_accuracy": _mean_std(finals),
    }


def config_sigma(cell: CellResult, config: ExperimentConfig) -> float:
    return cell.axis_values.get("sigma", config.sigma)


# ------------------------------------------------------------------ emission

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _fmt_share(value) -> str:
    # fixed 8 decimals so emitted shares conserve their 100% sum to < 1e-6
    return "" if value is None else f"{value:.8f}"


def emit_reports(bundle: SweepBundle, out_dir) -> dict[str, str]:
    """Write the privacy/fairness table, participation table, timing table,
    per-run convergence trajectories, and a replayable manifest."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def cell_method(cell: CellResult) -> tuple[str, float, float]:
        mode = cell.axis_values.get("mode", bundle.config.mode)
        alpha = cell.axis_values.get("alpha", bundle.config.alpha)
        sigma = config_sigma(cell, bundle.config)
        return mode, alpha, sigma

    sorted_cells = sorted(bundle.cells, key=lambda c: tuple((k, str(v)) for k, v in sorted(c.axis_values.items())))

    lines = ["method,alpha,sigma,device,epsilon_mean,epsilon_std,acc_loss_mean,acc_loss_std"]
    for cell in sorted_cells:
        agg = aggregate_cell(cell, bundle.config)
        mode, alpha, sigma = cell_method(cell)
        for tier in (p.tier_name for p in bundle.config.profiles):
            eps_m, eps_s = agg["per_tier"][tier]["epsilon"]
            deg_m, deg_s = agg["per_tier"][tier]["acc_degradation"]
            lines.append(
                f"{mode},{_fmt(alpha)},{_fmt(sigma)},{tier},{_fmt(eps_m)},{_fmt(eps_s)},{_fmt(deg_m)},{_fmt(deg_s)}"
            )
    paths["privacy_fairness"] = _write(out_dir, "privacy_fairness.csv", lines)

    lines = [
        "method,alpha,sigma,device,share_pct_at_stop_mean,share_pct_at_stop_std,"
        "share_pct_at_target_mean,share_pct_at_target_std"
    ]
    for cell in sorted_cells:
        agg = aggregate_cell(cell, bundle.config)
        mode, alpha, sigma = cell_method(cell)
        for tier in (p.tier_name for p in bundle.config.profiles):
            st_m, st_s = agg["per_tier"][tier]["participation_pct"]
            tg_m, tg_s = agg["per_tier"][tier]["participation_pct_at_target"]
            lines.append(
                f"{mode},{_fmt(alpha)},{_fmt(sigma)},{tier},"
                f"{_fmt_share(st_m)},{_fmt_share(st_s)},{_fmt_share(tg_m)},{_fmt_share(tg_s)}"
            )
    paths["participation"] = _write(out_dir, "participation.csv", lines)

    lines = ["method,alpha,sigma,time_to_target_mean,time_to_target_std,converged_seeds,final_accuracy_mean,final_accuracy_std"]
    for cell in sorted_cells:
        agg = aggregate_cell(cell, bundle.config)
        mode, alpha, sigma = cell_method(cell)
        tt_m, tt_s = agg["time_to_target"]
        fa_m, fa_s = agg["final_pooled_accuracy"]
        lines.append(
            f"{mode},{_fmt(alpha)},{_fmt(sigma)},{_fmt(tt_m)},{_fmt(tt_s)},{agg['converged_seeds']},{_fmt(fa_m)},{_fmt(fa_s)}"
        )
    paths["timing"] = _write(out_dir, "timing.csv", lines)

    conv_dir = os.path.join(out_dir, "convergence")
    os.makedirs(conv_dir, exist_ok=True)
    for cell in sorted_cells:
        for seed in sorted(cell.reports):
            rep = cell.reports[seed]
            lines = ["virtual_time,aggregation,pooled_accuracy"]
            for t, agg_idx, acc in rep.accuracy_trajectory:
                lines.append(f"{_fmt(t)},{agg_idx},{_fmt(acc)}")
            name = f"{cell.label}_seed{seed}.csv"
            _write(conv_dir, name, lines)
    paths["convergence_dir"] = conv_dir

    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "config": bundle.config.to_flat_dict(),
        "axes": {k: list(v) for k, v in sorted(bundle.axes.items())},
        "seeds": list(bundle.config.seeds),
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["manifest"] = manifest_path
    return paths


def _write(out_dir, name: str, lines: list[str]) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def replay(manifest_path, out_dir, parallelism: int = 1) -> dict[str, str]:
    """Re-execute a sweep exactly as recorded in a manifest; outputs are byte-identical."""
    with open(manifest_path, encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {manifest.get('manifest_version')!r}")
    config = ExperimentConfig.from_flat_dict(manifest["config"])
    axes = {k: list(v) for k, v in manifest["axes"].items()}
    bundle = run_sweep(config, axes, parallelism=parallelism)
    return emit_reports(bundle, out_dir)
