"""Command-line interface: run / sweep / replay.

Exit code 0 on success; on failure a single JSON error object is printed to
stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from hetfed.config import ConfigError, ExperimentConfig, parse_config
from hetfed.runner import emit_reports, replay, run_single, run_sweep


def _parse_axis(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"axis spec must look like name=v1,v2,... got {spec!r}")
    name, raw = spec.split("=", 1)
    name = name.strip()
    values: list = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        if name == "mode":
            values.append(token)
        elif name == "staleness_aware":
            values.append(token.lower() in ("true", "yes", "1"))
        elif name in ("batch_size", "local_epochs"):
            values.append(int(token))
        else:
            values.append(float(token))
    return name, values


def _single_run_outputs(config: ExperimentConfig, out_dir: str) -> None:
    report = run_single(config)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="ascii") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["virtual_time,aggregation,pooled_accuracy"]
    for t, agg_idx, acc in report.accuracy_trajectory:
        lines.append(f"{t:.6g},{agg_idx},{acc:.6g}")
    with open(os.path.join(out_dir, "convergence.csv"), "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    manifest = {
        "manifest_version": 1,
        "config": config.to_flat_dict(),
        "axes": {},
        "seeds": [config.seed],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="hetfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a single run from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out-dir", default="out")
    p_run.add_argument("--seed", type=int, default=None, help="override the run seed")

    p_sweep = sub.add_parser("sweep", help="execute a sweep over one or more axes")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", action="append", default=[], help="axis spec, e.g. sigma=0,0.5,1.0")
    p_sweep.add_argument("--out-dir", default="out")
    p_sweep.add_argument("--seeds", default=None, help="override seed list, comma separated")
    p_sweep.add_argument("--parallel", type=int, default=1)

    p_replay = sub.add_parser("replay", help="re-execute a recorded manifest byte-identically")
    p_replay.add_argument("--manifest", required=True)
    p_replay.add_argument("--out-dir", default="out_replay")
    p_replay.add_argument("--parallel", type=int, default=1)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config)
            if args.seed is not None:
                config = config.with_seed(args.seed)
            _single_run_outputs(config, args.out_dir)
        elif args.command == "sweep":
            config = parse_config(args.config)
            if args.seeds:
                from dataclasses import replace

                seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
                config = replace(config, seeds=seeds, seed=seeds[0])
            axes = dict(_parse_axis(spec) for spec in args.axis)
            bundle = run_sweep(config, axes, parallelism=args.parallel)
            emit_reports(bundle, args.out_dir)
        else:
            replay(args.manifest, args.out_dir, parallelism=args.parallel)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(json.dumps({"error": type(err).__name__, "detail": str(err)}), file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - surface anything else machine-readably
        print(json.dumps({"error": type(err).__name__, "detail": str(err)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
