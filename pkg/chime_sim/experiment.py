"""Experiment files and the figure data tables built from them."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .baselines import BaselineRecord, get_baseline
from .engine import Scenario, SweepAxis, SweepPoint, options_from_dict, parse_axis, run_points
from .errors import ConfigError, EmptySweepError
from .hardware import resolve_platform
from .jsonio import check_keys, read_json
from .mapper import MappingPolicy, parse_policy
from .workload import resolve_model

LOGGER = logging.getLogger(__name__)

EXPERIMENTS_DIR = Path(__file__).resolve().parent / "configs" / "experiments"
DEFAULT_SEQ_LENGTHS = (128, 256, 512, 1024, 2048, 4096)
FIGURES = ("fig7", "fig9", "fig10")
FIG7_COLUMNS = (
    "model",
    "throughput_token_per_s",
    "avg_power_w",
    "token_per_j",
    "speedup_vs_jetson",
    "efficiency_vs_jetson",
    "error",
)
FIG9_COLUMNS = ("model", "output_tokens", "latency_ms", "energy_j", "error")
FIG10_COLUMNS = (
    "model",
    "het_throughput_token_per_s",
    "dram_only_throughput_token_per_s",
    "speedup",
    "efficiency_ratio",
    "error",
)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    model: str
    hw: str = "chime"
    policy: str | None = None
    prompt_tokens: int = 128
    image: tuple[int, int] | None = (512, 512)
    output_tokens: int = 488
    ffn_overflow: str = "error"
    sweep_axis: str | None = None
    sweep_values: tuple[Any, ...] = ()
    out_dir: str = "out"
    options: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    base_dir: Path = dataclasses.field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        for name in ("model", "hw", "out_dir"):
            if not isinstance(getattr(self, name), str):
                raise ConfigError(f"{name} must be a string, got {getattr(self, name)!r}")
        for name in ("policy", "sweep_axis"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{name} must be a string or null, got {value!r}")
        for name in ("prompt_tokens", "output_tokens"):
            value = getattr(self, name)
            if not _is_int(value):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.ffn_overflow not in ("error", "spill"):
            raise ConfigError(f"ffn_overflow must be 'error' or 'spill', got {self.ffn_overflow!r}")
        if self.image is not None:
            if not isinstance(self.image, (list, tuple)) or len(self.image) != 2 or not all(_is_int(side) for side in self.image):
                raise ConfigError(f"image must be [height, width] in whole pixels, got {self.image!r}")
            object.__setattr__(self, "image", (self.image[0], self.image[1]))
        if not isinstance(self.sweep_values, (list, tuple)):
            raise ConfigError(f"sweep_values must be a list, got {self.sweep_values!r}")
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        if not isinstance(self.options, Mapping):
            raise ConfigError(f"options must be an object, got {self.options!r}")
        if self.policy is not None:
            parse_policy(self.policy)
        if self.sweep_axis is not None:
            parse_axis(self.sweep_axis)

    def _resolve(self, name_or_path: str) -> str | Path:
        local = self.base_dir / name_or_path
        return local if local.suffix == ".json" and local.exists() else name_or_path

    def to_scenario(self) -> Scenario:
        return Scenario(
            model=resolve_model(self._resolve(self.model)),
            platform=resolve_platform(self._resolve(self.hw)),
            policy=parse_policy(self.policy) if self.policy is not None else None,
            prompt_tokens=self.prompt_tokens,
            image=self.image,
            output_tokens=self.output_tokens,
            ffn_overflow=self.ffn_overflow,
            options=options_from_dict(self.options),
        )


def experiment_from_dict(data: Mapping, source: str = "experiment", base_dir: Path = Path(".")) -> ExperimentConfig:
    check_keys(data, ExperimentConfig, source)
    if "model" not in data:
        raise ConfigError(f"{source}: missing required key 'model'")
    if "base_dir" in data:
        raise ConfigError(f"{source}: unknown key 'base_dir'")
    try:
        return ExperimentConfig(**data, base_dir=base_dir)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return experiment_from_dict(read_json(path), source=str(path), base_dir=path.parent)


def shipped_experiments() -> list[Path]:
    return sorted(EXPERIMENTS_DIR.glob("*.json"))


def simulate_many(scenarios: Sequence[Scenario], max_workers: int | None = None) -> list[SweepPoint]:
    """Run independent scenarios; a failed scenario keeps its error in its slot."""
    return run_points([(scenario, None, scenario.model.name) for scenario in scenarios], max_workers)


def _failed_row(columns: Sequence[str], model: str, error: str, **known: Any) -> dict:
    row = {column: "" for column in columns}
    row.update(known, model=model, error=error)
    return row


def failed_rows(rows: Iterable[Mapping]) -> list[Mapping]:
    return [row for row in rows if row.get("error")]


def fig7_rows(scenarios: Sequence[Scenario], jetson: BaselineRecord | None = None, max_workers: int | None = None) -> list[dict]:
    jetson = jetson or get_baseline("jetson")
    rows = []
    for scenario, point in zip(scenarios, simulate_many(scenarios, max_workers)):
        if not point.ok:
            rows.append(_failed_row(FIG7_COLUMNS, scenario.model.name, point.error))
            continue
        report = point.report
        rows.append(
            {
                "model": report.model,
                "throughput_token_per_s": report.throughput_token_per_s,
                "avg_power_w": report.avg_power_w,
                "token_per_j": report.token_per_j,
                "speedup_vs_jetson": report.throughput_token_per_s / jetson.best_throughput,
                "efficiency_vs_jetson": report.token_per_j / jetson.best_token_per_j,
                "error": "",
            }
        )
    return rows


def fig9_rows(
    scenarios: Sequence[Scenario],
    lengths: Sequence[int] = DEFAULT_SEQ_LENGTHS,
    max_workers: int | None = None,
) -> list[dict]:
    jobs = [(scenario, SweepAxis.SEQ_LEN, length) for scenario in scenarios for length in lengths]
    rows = []
    for (scenario, _, length), point in zip(jobs, run_points(jobs, max_workers)):
        if not point.ok:
            rows.append(_failed_row(FIG9_COLUMNS, scenario.model.name, point.error, output_tokens=length))
            continue
        rows.append(
            {
                "model": point.report.model,
                "output_tokens": int(point.value),
                "latency_ms": point.report.total_latency_ns / 1e6,
                "energy_j": point.report.energy_per_inference_j,
                "error": "",
            }
        )
    return rows


def dram_only_variant(scenario: Scenario) -> Scenario:
    platform = dataclasses.replace(resolve_platform("dram-only"), link=scenario.platform.link)
    return dataclasses.replace(scenario, platform=platform, policy=MappingPolicy.DRAM_ONLY)


def fig10_rows(scenarios: Sequence[Scenario], max_workers: int | None = None) -> list[dict]:
    het = [dataclasses.replace(scenario, policy=MappingPolicy.HETEROGENEOUS) for scenario in scenarios]
    points = simulate_many(het + [dram_only_variant(scenario) for scenario in scenarios], max_workers)
    rows = []
    for scenario, het_point, dram_point in zip(scenarios, points[: len(het)], points[len(het) :]):
        if not (het_point.ok and dram_point.ok):
            errors = [f"{label}: {point.error}" for label, point in (("het", het_point), ("dram-only", dram_point)) if not point.ok]
            rows.append(_failed_row(FIG10_COLUMNS, scenario.model.name, "; ".join(errors)))
            continue
        het_report, dram_report = het_point.report, dram_point.report
        rows.append(
            {
                "model": het_report.model,
                "het_throughput_token_per_s": het_report.throughput_token_per_s,
                "dram_only_throughput_token_per_s": dram_report.throughput_token_per_s,
                "speedup": het_report.throughput_token_per_s / dram_report.throughput_token_per_s,
                "efficiency_ratio": het_report.token_per_j / dram_report.token_per_j,
                "error": "",
            }
        )
    return rows


def figure_rows(
    figure: str,
    scenarios: Sequence[Scenario],
    lengths: Sequence[int] = DEFAULT_SEQ_LENGTHS,
    max_workers: int | None = None,
) -> tuple[tuple[str, ...], list[dict]]:
    """Columns and rows of one figure table; a failed run keeps its row with ``error`` set."""
    if not scenarios:
        raise EmptySweepError(f"{figure}: no experiment configs given")
    if figure == "fig7":
        return FIG7_COLUMNS, fig7_rows(scenarios, max_workers=max_workers)
    if figure == "fig9":
        if not lengths:
            raise EmptySweepError("fig9: no sequence lengths given")
        return FIG9_COLUMNS, fig9_rows(scenarios, lengths, max_workers)
    if figure == "fig10":
        return FIG10_COLUMNS, fig10_rows(scenarios, max_workers)
    raise ConfigError(f"Unknown figure '{figure}' (use {', '.join(FIGURES)})")


def write_rows(path: str | Path, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: row.get(column, "") for column in columns})
