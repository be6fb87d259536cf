"""Parameterization of the M3D DRAM chiplet, the M3D RRAM chiplet and the UCIe link."""

from __future__ import annotations

import dataclasses
import enum
import logging
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .jsonio import check_keys, read_json

LOGGER = logging.getLogger(__name__)

HARDWARE_DIR = Path(__file__).resolve().parent / "configs" / "hardware"
GIB = 1 << 30
MIB = 1 << 20
KIB = 1 << 10
PEAK_MISMATCH_TOLERANCE = 0.05


class Chiplet(str, enum.Enum):
    DRAM = "DramNmp"
    RRAM = "RramNmp"


class LatencyPolicy(str, enum.Enum):
    WORST_LAYER = "WorstLayer"
    MEAN_LAYER = "MeanLayer"


class AccessKind(str, enum.Enum):
    READ = "Read"
    WRITE = "Write"


@dataclasses.dataclass(frozen=True)
class DramChipletSpec:
    layers: int = 200
    tiers: int = 5
    tier_capacity_bytes: int = 5 * GIB // 4
    channels: int = 16
    banks_per_channel: int = 16
    bank_capacity_bits: int = 200 * MIB
    row_buffer_bits: int = 32768
    mat_rows: int = 1024
    mat_cols: int = 1024
    read_write_energy_pj_per_bit: float = 0.429
    latency_base_ns: float = 3.0
    latency_slope_ns: float = 0.8
    io_bits_per_channel: int = 64
    pus: int = 16
    pes_per_pu: int = 16
    macs_per_pe: int = 4
    sfpe_simd_width: int = 256
    clock_ghz: float = 1.0
    peak_flops: float = 2e12
    peak_power_w: float = 0.671
    shared_mem_bytes_per_pu: int = 20 * KIB
    pe_buffer_bytes: int = 1 * KIB
    sram_bits: int = 512 * KIB

    def __post_init__(self) -> None:
        for name in ("layers", "tiers", "channels", "banks_per_channel", "row_buffer_bits", "io_bits_per_channel"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"dram: {name} must be positive")
        if self.layers % self.tiers:
            raise ConfigError(f"dram: {self.layers} layers do not split into {self.tiers} equal tiers")
        if self.tiers * self.tier_capacity_bytes > self.total_capacity_bytes:
            raise ConfigError(
                f"dram: {self.tiers} tiers x {self.tier_capacity_bytes} B exceed chip capacity {self.total_capacity_bytes} B"
            )
        if self.clock_ghz < 0 or self.peak_flops < 0 or self.peak_power_w < 0:
            raise ConfigError("dram: clock, peak_flops and peak_power_w must be non-negative")

    @property
    def layers_per_tier(self) -> int:
        return self.layers // self.tiers

    @property
    def total_capacity_bytes(self) -> int:
        return self.channels * self.banks_per_channel * self.bank_capacity_bits // 8

    @property
    def bandwidth_bytes_per_s(self) -> float:
        """Channel-interface bandwidth, used when data leaves the banks (KV migration)."""
        return self.channels * self.io_bits_per_channel * self.clock_ghz * 1e9 / 8

    @property
    def nmp_bandwidth_bytes_per_s(self) -> float:
        """Bank-parallel bandwidth seen by the near-memory PUs; equals PUs x ring-router link."""
        return self.channels * self.banks_per_channel * self.io_bits_per_channel * self.clock_ghz * 1e9 / 8

    @property
    def row_buffer_bytes(self) -> int:
        return self.row_buffer_bits // 8

    def latency_ns_of_layer(self, layer: int) -> float:
        if not 0 <= layer < self.layers:
            raise ValueError(f"layer {layer} outside 0..{self.layers - 1}")
        return self.latency_base_ns + self.latency_slope_ns * layer


@dataclasses.dataclass(frozen=True)
class RramChipletSpec:
    layers: int = 8
    controllers: int = 8
    channels_per_controller: int = 16
    tiles_per_channel: int = 4
    units_per_tile: int = 256
    unit_rows: int = 1024
    unit_cols: int = 1024
    read_latency_ns: float = 2.3
    write_latency_ns: float = 11.0
    read_energy_pj_per_bit: float = 0.4
    write_energy_pj_per_bit: float = 1.33
    layer_capacity_bytes: int = 2 * GIB
    peak_bw_bytes_per_s: float = 512e9
    # None derives the array-side bandwidth from the organization
    array_bandwidth_bytes_per_s: float | None = None
    interface_bits_per_controller: int = 512
    pus: int = 16
    pes_per_pu: int = 16
    macs_per_pe: int = 16
    clock_ghz: float = 1.0
    peak_flops: float = 32e12
    peak_power_w: float = 2.584
    sram_bytes: int = 1 * MIB
    endurance_writes_per_cell: int = 1

    def __post_init__(self) -> None:
        if self.write_energy_pj_per_bit <= self.read_energy_pj_per_bit:
            raise ConfigError("rram: write energy per bit must exceed read energy per bit")
        if self.write_latency_ns <= self.read_latency_ns:
            raise ConfigError("rram: write latency must exceed read latency")
        if self.layers <= 0 or self.layer_capacity_bytes <= 0 or self.peak_bw_bytes_per_s <= 0:
            raise ConfigError("rram: layers, capacity and bandwidth must be positive")
        if self.array_bandwidth_bytes_per_s is not None and self.array_bandwidth_bytes_per_s <= 0:
            raise ConfigError("rram: array bandwidth must be positive")
        if self.endurance_writes_per_cell < 1:
            raise ConfigError("rram: endurance budget must allow at least one write")

    @property
    def capacity_bytes(self) -> int:
        return self.layers * self.layer_capacity_bytes

    @property
    def organization_bits(self) -> int:
        return (
            self.controllers
            * self.channels_per_controller
            * self.tiles_per_channel
            * self.units_per_tile
            * self.unit_rows
            * self.unit_cols
        )

    @property
    def array_read_bandwidth_bytes_per_s(self) -> float:
        """Bandwidth of weight reads inside the chiplet: one unit row per tile per read latency."""
        if self.array_bandwidth_bytes_per_s is not None:
            return self.array_bandwidth_bytes_per_s
        row_bits = self.controllers * self.channels_per_controller * self.tiles_per_channel * self.unit_cols
        return row_bits / 8 / (self.read_latency_ns * 1e-9)


@dataclasses.dataclass(frozen=True)
class LinkSpec:
    bandwidth_bytes_per_s: float = 128e9
    # 0.98 pJ/bit x 1.024e12 bit/s ~= 1.0 W when saturated
    energy_pj_per_bit: float = 0.98
    latency_ns: float = 20.0

    def __post_init__(self) -> None:
        if self.bandwidth_bytes_per_s <= 0:
            raise ConfigError("link: bandwidth must be positive")
        if self.energy_pj_per_bit < 0 or self.latency_ns < 0:
            raise ConfigError("link: energy and latency must be non-negative")


@dataclasses.dataclass(frozen=True)
class PlatformSpec:
    name: str = "chime"
    dram: DramChipletSpec = dataclasses.field(default_factory=DramChipletSpec)
    rram: RramChipletSpec = dataclasses.field(default_factory=RramChipletSpec)
    link: LinkSpec = dataclasses.field(default_factory=LinkSpec)
    dram_die_area_mm2: float = 28.71
    rram_die_area_mm2: float = 24.85
    default_policy: str = "Heterogeneous"

    def __post_init__(self) -> None:
        if self.dram_die_area_mm2 <= 0 or self.rram_die_area_mm2 <= 0:
            raise ConfigError(f"{self.name}: die areas must be positive")

    @property
    def total_area_mm2(self) -> float:
        return self.dram_die_area_mm2 + self.rram_die_area_mm2

    def chiplet(self, which: Chiplet) -> DramChipletSpec | RramChipletSpec:
        return self.dram if which is Chiplet.DRAM else self.rram

    def with_link_bandwidth(self, bandwidth_bytes_per_s: float) -> "PlatformSpec":
        return dataclasses.replace(self, link=dataclasses.replace(self.link, bandwidth_bytes_per_s=bandwidth_bytes_per_s))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def tier_access_latency_ns(
    spec: DramChipletSpec,
    tier: int,
    policy: LatencyPolicy = LatencyPolicy.MEAN_LAYER,
) -> float:
    """Access latency of a tier; tiers are contiguous layer groups, Tier-0 at the bottom."""
    if not 0 <= tier < spec.tiers:
        raise ValueError(f"tier {tier} outside 0..{spec.tiers - 1}")
    per_tier = spec.layers_per_tier
    if LatencyPolicy(policy) is LatencyPolicy.WORST_LAYER:
        return spec.latency_ns_of_layer(per_tier * (tier + 1) - 1)
    mean_layer = tier * per_tier + (per_tier - 1) / 2
    return spec.latency_base_ns + spec.latency_slope_ns * mean_layer


def dram_access_energy_j(bits: float, spec: DramChipletSpec | None = None) -> float:
    spec = spec or DramChipletSpec()
    return bits * spec.read_write_energy_pj_per_bit * 1e-12


def rram_access_energy_j(bits: float, kind: AccessKind, spec: RramChipletSpec | None = None) -> float:
    spec = spec or RramChipletSpec()
    per_bit = spec.read_energy_pj_per_bit if AccessKind(kind) is AccessKind.READ else spec.write_energy_pj_per_bit
    return bits * per_bit * 1e-12


def link_energy_j(bits: float, link: LinkSpec) -> float:
    return bits * link.energy_pj_per_bit * 1e-12


def rram_derived_bandwidth(spec: RramChipletSpec) -> float:
    return spec.controllers * spec.interface_bits_per_controller * spec.clock_ghz * 1e9 / 8


@dataclasses.dataclass(frozen=True)
class PeakFlopsCheck:
    chiplet: str
    derived_flops: float
    declared_flops: float
    relative_error: float
    mismatch: bool


def peak_flops_check(spec: DramChipletSpec | RramChipletSpec) -> PeakFlopsCheck:
    """Compare PU x PE x MAC x 2 x clock against the declared table peak."""
    derived = spec.pus * spec.pes_per_pu * spec.macs_per_pe * 2 * spec.clock_ghz * 1e9
    declared = spec.peak_flops
    if declared > 0:
        relative_error = abs(derived - declared) / declared
    else:
        relative_error = 0.0 if derived == 0 else float("inf")
    name = "dram" if isinstance(spec, DramChipletSpec) else "rram"
    check = PeakFlopsCheck(
        chiplet=name,
        derived_flops=derived,
        declared_flops=declared,
        relative_error=relative_error,
        mismatch=relative_error > PEAK_MISMATCH_TOLERANCE,
    )
    if check.mismatch:
        LOGGER.warning(
            "%s: organization gives %.4g FLOPS but the declared peak is %.4g FLOPS; using the declared value",
            name,
            derived,
            declared,
        )
    return check


@dataclasses.dataclass(frozen=True)
class CapacityCheck:
    organization_bytes: int
    declared_bytes: int
    mismatch: bool


def rram_capacity_check(spec: RramChipletSpec) -> CapacityCheck:
    organization = spec.organization_bits // 8
    mismatch = organization != spec.capacity_bytes
    if mismatch:
        LOGGER.warning(
            "rram: organization holds %d B but %d layers x %d B are declared; using the declared capacity",
            organization,
            spec.layers,
            spec.layer_capacity_bytes,
        )
    return CapacityCheck(organization_bytes=organization, declared_bytes=spec.capacity_bytes, mismatch=mismatch)


_FIELD_TYPES = {
    "int": (int,),
    "float": (int, float),
    "float | None": (int, float, type(None)),
    "str": (str,),
}


def _section(cls: type, data: Any, source: str) -> Any:
    if data is None:
        return cls()
    check_keys(data, cls, source)
    types = {field.name: _FIELD_TYPES.get(field.type) for field in dataclasses.fields(cls)}
    for key, value in data.items():
        expected = types[key]
        if expected is not None and (isinstance(value, bool) or not isinstance(value, expected)):
            raise ConfigError(f"{source}: '{key}' must be {_types_label(expected)}, got {value!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _types_label(expected: tuple[type, ...]) -> str:
    if float in expected:
        return "a number" if type(None) not in expected else "a number or null"
    return "an integer" if int in expected else "a string"


def platform_from_dict(data: Mapping, source: str = "hardware config") -> PlatformSpec:
    check_keys(data, PlatformSpec, source)
    values = dict(data)
    values["dram"] = _section(DramChipletSpec, data.get("dram"), f"{source}: dram")
    values["rram"] = _section(RramChipletSpec, data.get("rram"), f"{source}: rram")
    values["link"] = _section(LinkSpec, data.get("link"), f"{source}: link")
    try:
        return PlatformSpec(**values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_platform(path: str | Path) -> PlatformSpec:
    return platform_from_dict(read_json(path), source=str(path))


def resolve_platform(name_or_path: str | Path) -> PlatformSpec:
    """Accept a preset name (``chime``, ``dram-only``) or a JSON path."""
    candidate = HARDWARE_DIR / f"{name_or_path}.json"
    if candidate.exists():
        return load_platform(candidate)
    return load_platform(name_or_path)
