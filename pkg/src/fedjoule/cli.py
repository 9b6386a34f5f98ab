"""Command-line entry point.

Subcommands:
  run           one experiment from a config file
  sweep         one experiment per config file in a directory
  plot          accuracy/time-vs-energy chart from metrics files
  bench         selection-solver timing grid
  gen-profiles  synthetic device power-mode trace CSV
  gen-data      synthetic labeled dataset CSV (optionally partitioned)
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Sequence

from .config import ExperimentConfig, load_config, save_config
from .data_partition import (
    dirichlet_partition,
    save_dataset,
    save_partition,
    shard_partition,
    synthesize_dataset,
)
from .device_model import DEFAULT_DEVICE_CLASSES, save_profiles, synthesize_profiles
from .orchestrator import (
    ExperimentResult,
    bench_selection,
    bench_table,
    emit_metrics,
    emit_plot,
    run_experiment,
)


def _run_one(cfg: ExperimentConfig, out_dir: str, stem: str) -> ExperimentResult:
    os.makedirs(out_dir, exist_ok=True)
    result = run_experiment(cfg)
    metrics_path = os.path.join(out_dir, f"{stem}.csv")
    emit_metrics(result.records, metrics_path, cfg.budget_j, cfg.target_accuracy)
    save_config(cfg, os.path.join(out_dir, f"{stem}_config.yaml"))
    spent = result.records[-1].cum_energy_j if result.records else 0.0
    print(
        f"{stem}: {len(result.records)} rounds, stop={result.stop_reason}, "
        f"accuracy={result.final_accuracy:.4f}, "
        f"energy={spent:.1f}/{cfg.budget_j:.1f} J -> {metrics_path}"
    )
    return result


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _run_one(cfg, args.out, "metrics")
    emit_plot([os.path.join(args.out, "metrics.csv")], os.path.join(args.out, "metrics.svg"))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    names = sorted(
        n for n in os.listdir(args.configs) if n.endswith((".yaml", ".yml"))
    )
    if not names:
        print(f"no .yaml config files in {args.configs}", file=sys.stderr)
        return 2
    metric_paths: List[str] = []
    for name in names:
        cfg = load_config(os.path.join(args.configs, name))
        stem = name.rsplit(".", 1)[0]
        _run_one(cfg, args.out, stem)
        metric_paths.append(os.path.join(args.out, f"{stem}.csv"))
    emit_plot(metric_paths, os.path.join(args.out, "sweep.svg"))
    print(f"combined chart -> {os.path.join(args.out, 'sweep.svg')}")
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    emit_plot(args.metrics, args.out)
    print(f"chart -> {args.out}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    cells = bench_selection(
        args.pools,
        args.cohorts,
        repetitions=args.reps,
        timeout_s=args.timeout_s,
        seed=args.seed,
    )
    print(bench_table(cells))
    return 0


def _cmd_gen_profiles(args: argparse.Namespace) -> int:
    by_name = {spec.name: spec for spec in DEFAULT_DEVICE_CLASSES}
    unknown = [name for name in args.classes if name not in by_name]
    if unknown:
        print(
            f"unknown device classes: {', '.join(unknown)}; "
            f"valid: {', '.join(sorted(by_name))}",
            file=sys.stderr,
        )
        return 2
    profiles = synthesize_profiles(
        [by_name[name] for name in args.classes],
        workload=args.workload,
        seed=args.seed,
        time_noise=args.time_noise,
        power_noise=args.power_noise,
    )
    save_profiles(profiles, args.out)
    modes = sum(len(p.modes) for p in profiles.values())
    print(f"{len(profiles)} profiles, {modes} modes -> {args.out}")
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    data = synthesize_dataset(
        classes=args.classes,
        dim=args.dim,
        samples=args.samples,
        class_separation=args.separation,
        seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    save_dataset(data, args.out)
    print(f"{len(data)} samples, {args.classes} classes -> {args.out}")
    if args.partition_out is not None:
        if args.partition == "shard":
            part = shard_partition(data, args.clients, args.labels_per_client, args.seed)
        else:
            part = dirichlet_partition(data, args.clients, args.dirichlet_alpha, args.seed)
        save_partition(part, args.partition_out)
        print(f"{args.clients}-client {args.partition} partition -> {args.partition_out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedjoule",
        description="Energy-budgeted federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True, help="YAML config file")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=_cmd_run)

    sweep = sub.add_parser("sweep", help="run every config file in a directory")
    sweep.add_argument("--configs", required=True, help="directory of YAML configs")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.set_defaults(func=_cmd_sweep)

    plot = sub.add_parser("plot", help="chart metrics files")
    plot.add_argument("--metrics", nargs="+", required=True, help="metrics CSV files")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.set_defaults(func=_cmd_plot)

    bench = sub.add_parser("bench", help="time the cohort selector")
    bench.add_argument("--pools", nargs="+", type=int, required=True)
    bench.add_argument("--cohorts", nargs="+", type=int, required=True)
    bench.add_argument("--reps", type=int, default=5)
    bench.add_argument("--timeout-s", type=float, default=3600.0)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=_cmd_bench)

    gen_profiles = sub.add_parser("gen-profiles", help="write a synthetic profile trace")
    gen_profiles.add_argument("--out", required=True, help="output CSV path")
    gen_profiles.add_argument(
        "--classes",
        nargs="+",
        default=[spec.name for spec in DEFAULT_DEVICE_CLASSES],
        help="device class names",
    )
    gen_profiles.add_argument("--workload", default="synth8")
    gen_profiles.add_argument("--seed", type=int, default=42)
    gen_profiles.add_argument("--time-noise", type=float, default=0.0)
    gen_profiles.add_argument("--power-noise", type=float, default=0.0)
    gen_profiles.set_defaults(func=_cmd_gen_profiles)

    gen_data = sub.add_parser("gen-data", help="write a synthetic dataset")
    gen_data.add_argument("--out", required=True, help="output CSV path")
    gen_data.add_argument("--classes", type=int, default=8)
    gen_data.add_argument("--dim", type=int, default=32)
    gen_data.add_argument("--samples", type=int, default=4800)
    gen_data.add_argument("--separation", type=float, default=2.0)
    gen_data.add_argument("--noise-sigma", type=float, default=0.5)
    gen_data.add_argument("--seed", type=int, default=42)
    gen_data.add_argument("--partition-out", default=None, help="also write a partition CSV")
    gen_data.add_argument("--partition", choices=("shard", "dirichlet"), default="shard")
    gen_data.add_argument("--clients", type=int, default=12)
    gen_data.add_argument("--labels-per-client", type=int, default=3)
    gen_data.add_argument("--dirichlet-alpha", type=float, default=0.05)
    gen_data.set_defaults(func=_cmd_gen_data)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
