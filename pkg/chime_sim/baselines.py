"""Published baseline numbers and report-vs-baseline comparison."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Mapping

from .errors import BaselineError, ConfigError
from .jsonio import check_keys, read_json

BASELINES_PATH = Path(__file__).resolve().parent / "configs" / "baselines.json"
DEFAULT_AREA_MM2 = 28.71 + 24.85
COMPARISON_COLUMNS = (
    "model",
    "baseline",
    "throughput_token_per_s",
    "baseline_throughput_token_per_s",
    "speedup",
    "token_per_j",
    "baseline_token_per_j",
    "efficiency_ratio",
    "hardware_efficiency_ratio",
)


@dataclasses.dataclass(frozen=True)
class BaselineRecord:
    name: str
    throughput_token_per_s: tuple[float, float]
    power_w: tuple[float, float]
    token_per_j: tuple[float, float]
    area_mm2: float
    source: str = ""

    def __post_init__(self) -> None:
        for field_name in ("throughput_token_per_s", "power_w", "token_per_j"):
            value = tuple(float(item) for item in getattr(self, field_name))
            if len(value) != 2 or value[0] > value[1] or value[0] < 0:
                raise ConfigError(f"baseline {self.name}: {field_name} must be an ordered [lo, hi] pair")
            object.__setattr__(self, field_name, value)
        if self.area_mm2 <= 0:
            raise ConfigError(f"baseline {self.name}: area_mm2 must be positive")

    @property
    def best_throughput(self) -> float:
        return self.throughput_token_per_s[1]

    @property
    def best_token_per_j(self) -> float:
        return self.token_per_j[1]

    @classmethod
    def from_report(cls, report: Mapping, area_mm2: float = DEFAULT_AREA_MM2, name: str | None = None) -> "BaselineRecord":
        """Treat a simulated report (e.g. the DRAM-only run) as a single-point baseline."""
        throughput = float(report["throughput_token_per_s"])
        power = float(report["avg_power_w"])
        efficiency = float(report["token_per_j"])
        return cls(
            name=name or f"{report['model']}:{report['policy']}",
            throughput_token_per_s=(throughput, throughput),
            power_w=(power, power),
            token_per_j=(efficiency, efficiency),
            area_mm2=area_mm2,
            source="simulated report",
        )


def load_baselines(path: str | Path = BASELINES_PATH) -> dict[str, BaselineRecord]:
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object keyed by baseline name")
    records = {}
    for key, item in data.items():
        check_keys(item, BaselineRecord, f"{path}: {key}")
        records[key] = BaselineRecord(**item)
    return records


def get_baseline(name: str, path: str | Path = BASELINES_PATH) -> BaselineRecord:
    records = load_baselines(path)
    try:
        return records[name.lower()]
    except KeyError:
        raise BaselineError(f"Unknown baseline '{name}' (known: {', '.join(sorted(records))})") from None


def _value(report: Mapping, key: str) -> float:
    try:
        return float(report[key])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"report is missing a numeric '{key}'") from exc


def compare(report: Mapping, baseline: BaselineRecord, area_mm2: float = DEFAULT_AREA_MM2) -> dict:
    """Speedup and efficiency ratios against the baseline's best published figures."""
    throughput = _value(report, "throughput_token_per_s")
    token_per_j = _value(report, "token_per_j")
    hardware_efficiency = throughput / area_mm2
    baseline_hardware_efficiency = baseline.best_throughput / baseline.area_mm2
    return {
        "model": report.get("model", ""),
        "baseline": baseline.name,
        "throughput_token_per_s": throughput,
        "baseline_throughput_token_per_s": baseline.best_throughput,
        "speedup": throughput / baseline.best_throughput,
        "token_per_j": token_per_j,
        "baseline_token_per_j": baseline.best_token_per_j,
        "efficiency_ratio": token_per_j / baseline.best_token_per_j,
        "hardware_efficiency_ratio": hardware_efficiency / baseline_hardware_efficiency,
    }
