from __future__ import annotations

import argparse
import dataclasses
import json
import logging
from pathlib import Path
from typing import Sequence

from .baselines import COMPARISON_COLUMNS, BaselineRecord, compare, get_baseline
from .engine import run, scenario_plan, sweep, write_report_csv, write_report_json
from .errors import EXIT_CODES, ChimeError, ConfigError, EmptySweepError, SimulationError
from .experiment import (
    DEFAULT_SEQ_LENGTHS,
    FIGURES,
    ExperimentConfig,
    failed_rows,
    figure_rows,
    load_experiment,
    shipped_experiments,
    write_rows,
)
from .hardware import peak_flops_check
from .jsonio import read_json, write_json
from .mapper import dump_plan, load_plan
from .workload import build_graph

LOGGER = logging.getLogger(__name__)


def _image(value: str) -> tuple[int, int] | None:
    if value.lower() == "none":
        return None
    try:
        height, width = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"image must look like 512x512 or none, got '{value}'") from None
    return height, width


def _values(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _add_workload_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="experiment JSON file")
    parser.add_argument("--model", default=None, help="model preset name or JSON file")
    parser.add_argument("--hw", default=None, help="hardware preset (chime, dram-only) or JSON file")
    parser.add_argument("--policy", default=None, help="het or dram-only")
    parser.add_argument("--prompt-tokens", type=int, default=None)
    parser.add_argument("--image", type=_image, default=argparse.SUPPRESS, help="HxW in pixels, or none")
    parser.add_argument("--output-tokens", type=int, default=None)
    parser.add_argument("--ffn-overflow", choices=("error", "spill"), default=None)
    parser.add_argument("--out", default=None, help="output directory")


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        experiment = load_experiment(args.config)
    elif args.model:
        experiment = ExperimentConfig(model=args.model)
    else:
        raise ConfigError("Give --config or --model")
    overrides = {
        "model": args.model,
        "hw": args.hw,
        "policy": args.policy,
        "prompt_tokens": args.prompt_tokens,
        "output_tokens": args.output_tokens,
        "ffn_overflow": args.ffn_overflow,
        "out_dir": args.out,
    }
    if hasattr(args, "image"):
        overrides["image"] = args.image
    changes = {key: value for key, value in overrides.items() if value is not None or key == "image"}
    return dataclasses.replace(experiment, **changes)


def cmd_run(args: argparse.Namespace) -> int:
    experiment = _experiment(args)
    scenario = experiment.to_scenario()
    if args.trace:
        scenario = dataclasses.replace(scenario, options=dataclasses.replace(scenario.options, trace=True))
    for spec in (scenario.platform.dram, scenario.platform.rram):
        check = peak_flops_check(spec)
        LOGGER.info(
            "%s peak: derived %.4g FLOPS, declared %.4g FLOPS", check.chiplet, check.derived_flops, check.declared_flops
        )
    graph = build_graph(scenario.model, scenario.prompt_tokens, scenario.image, scenario.output_tokens)
    if args.plan:
        plan = load_plan(args.plan)
        LOGGER.info("Replaying plan %s", args.plan)
    else:
        plan = scenario_plan(scenario, graph)
    report = run(graph, plan, scenario.platform, scenario.options)

    out_dir = Path(experiment.out_dir)
    write_report_json(out_dir / "report.json", report)
    write_report_csv(out_dir / "report.csv", [report])
    LOGGER.info("Wrote %s", out_dir / "report.json")
    if args.dump_plan:
        dump_plan(out_dir / "plan.json", plan)
        LOGGER.info("Wrote %s", out_dir / "plan.json")
    if args.trace:
        with (out_dir / "trace.jsonl").open("w", encoding="utf-8") as handle:
            for record in report.trace:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
        LOGGER.info("Wrote %d trace records", len(report.trace))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    experiment = _experiment(args)
    axis = args.axis or experiment.sweep_axis
    values = _values(args.values) if args.values is not None else list(experiment.sweep_values)
    if axis is None:
        raise ConfigError("Give --axis or set sweep_axis in the experiment file")
    if not values:
        raise EmptySweepError("Sweep has no values")
    points = sweep(experiment.to_scenario(), axis, values, max_workers=args.workers)

    out_dir = Path(experiment.out_dir)
    write_report_csv(out_dir / "sweep.csv", [point.report for point in points if point.ok])
    write_json(
        out_dir / "sweep.json",
        [
            {"value": point.value, "report": point.report.to_dict() if point.ok else None, "error": point.error}
            for point in points
        ],
    )
    failed = [point for point in points if not point.ok]
    LOGGER.info("Wrote %s (%d points, %d failed)", out_dir / "sweep.csv", len(points), len(failed))
    if len(failed) == len(points):
        raise SimulationError("Every sweep point failed")
    return 0


def _baseline(name: str) -> BaselineRecord:
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return BaselineRecord.from_report(read_json(path), name=path.stem)
    return get_baseline(name)


def cmd_compare(args: argparse.Namespace) -> int:
    report = read_json(args.report)
    rows = [compare(report, _baseline(name)) for name in args.baseline]
    writer_rows = [{column: row[column] for column in COMPARISON_COLUMNS} for row in rows]
    if args.out:
        write_rows(Path(args.out) / "comparison.csv", COMPARISON_COLUMNS, writer_rows)
        LOGGER.info("Wrote %s", Path(args.out) / "comparison.csv")
    for row in rows:
        print(
            f"{row['model']} vs {row['baseline']}: {row['speedup']:.1f}x throughput, "
            f"{row['efficiency_ratio']:.1f}x token/J, {row['hardware_efficiency_ratio']:.1f}x token/s/mm2"
        )
    return 0


def _lengths(values: str | None) -> list[int]:
    if values is None:
        return list(DEFAULT_SEQ_LENGTHS)
    try:
        return [int(value) for value in _values(values)]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got '{values}'") from None


def cmd_figdata(args: argparse.Namespace) -> int:
    paths = args.configs if args.configs is not None else shipped_experiments()
    scenarios = [load_experiment(path).to_scenario() for path in paths]
    columns, rows = figure_rows(args.figure, scenarios, _lengths(args.values), max_workers=args.workers)
    target = Path(args.out) / f"{args.figure}.csv"
    write_rows(target, columns, rows)
    failed = failed_rows(rows)
    LOGGER.info("Wrote %s (%d rows, %d failed)", target, len(rows), len(failed))
    if failed:
        raise SimulationError(f"{args.figure}: {len(failed)} of {len(rows)} runs failed, see the error column of {target}")
    return 0


def _exit_code_help() -> str:
    return "exit codes: " + ", ".join(f"{code} {name}" for name, code in sorted(EXIT_CODES.items(), key=lambda item: item[1]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Simulate MLLM inference on a DRAM + RRAM near-memory chiplet system.",
        epilog=_exit_code_help(),
    )
    parser.add_argument("--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="simulate one inference and write report.json/report.csv")
    _add_workload_arguments(run_parser)
    run_parser.add_argument("--plan", default=None, help="replay a dumped mapping plan")
    run_parser.add_argument("--dump-plan", action="store_true")
    run_parser.add_argument("--trace", action="store_true", help="also write trace.jsonl")
    run_parser.set_defaults(handler=cmd_run)

    sweep_parser = commands.add_parser("sweep", help="run one simulation per value of an axis")
    _add_workload_arguments(sweep_parser)
    sweep_parser.add_argument("--axis", default=None, help="seqlen, policy, linkbw or tierpolicy")
    sweep_parser.add_argument("--values", default=None, help="comma-separated values")
    sweep_parser.add_argument("--workers", type=int, default=None)
    sweep_parser.set_defaults(handler=cmd_sweep)

    compare_parser = commands.add_parser("compare", help="compare a report with published baselines")
    compare_parser.add_argument("--report", required=True)
    compare_parser.add_argument(
        "--baseline", action="append", required=True, help="jetson, facil, chime or another report.json"
    )
    compare_parser.add_argument("--out", default=None)
    compare_parser.set_defaults(handler=cmd_compare)

    fig_parser = commands.add_parser("figdata", help="emit plot-ready CSV data")
    fig_parser.add_argument("--figure", choices=FIGURES, required=True)
    fig_parser.add_argument("--configs", nargs="*", default=None, help="experiment files (default: shipped set)")
    fig_parser.add_argument("--values", default=None, help="fig9 output lengths, comma-separated")
    fig_parser.add_argument("--workers", type=int, default=None)
    fig_parser.add_argument("--out", default="out")
    fig_parser.set_defaults(handler=cmd_figdata)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.handler(args)
    except ChimeError as exc:
        LOGGER.error("%s", exc)
        return exc.exit_code
