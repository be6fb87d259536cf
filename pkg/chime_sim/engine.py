"""Event-driven timing and energy simulation of a mapping plan.

Each chiplet and the link is a resource that executes one work unit (a fusion group or a
lone kernel) at a time. A unit's duration is the roofline ``max(compute, memory)`` of its
members; the event queue is kept in integer picoseconds.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import heapq
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, EmptySweepError, MappingError, SimulationError
from .hardware import (
    AccessKind,
    Chiplet,
    DramChipletSpec,
    LatencyPolicy,
    LinkSpec,
    PlatformSpec,
    RramChipletSpec,
    dram_access_energy_j,
    link_energy_j,
    peak_flops_check,
    rram_access_energy_j,
    rram_capacity_check,
    tier_access_latency_ns,
)
from .jsonio import check_keys, write_json
from .mapper import (
    FusionKind,
    KvCache,
    MappingPlan,
    MappingPolicy,
    build_plan,
    kv_tier_budgets,
    migration_cost,
    parse_policy,
)
from .workload import (
    LAYER_KERNELS,
    SFPE_KINDS,
    KernelKind,
    KernelNode,
    ModelConfig,
    OperatorGraph,
    Phase,
    build_graph,
)

LOGGER = logging.getLogger(__name__)

LINK_RESOURCE = "Link"
RRAM_ACTIVATION_NOTE = "rram-activation-on-reducer"
KV_OVERCOMMIT_NOTE = "kv-tier-overcommit"
REPORT_SCHEMA_VERSION = 1
REPORT_CSV_COLUMNS = (
    "schema_version",
    "model",
    "policy",
    "output_tokens",
    "total_latency_ns",
    "steady_state_decode_ns_per_token",
    "throughput_token_per_s",
    "avg_power_w",
    "energy_per_inference_j",
    "token_per_j",
    "link_bytes_total",
    "kv_offload_link_bytes",
    "dram_bits_accessed",
    "rram_bits_read",
    "rram_bits_written",
    "kv_migrations",
    "encode_ns",
    "connect_ns",
    "prefill_ns",
    "decode_ns",
)
_PHASE_COLUMNS = {
    "encode_ns": Phase.ENCODE,
    "connect_ns": Phase.CONNECT,
    "prefill_ns": Phase.PREFILL,
    "decode_ns": Phase.DECODE_STEP,
}


@dataclasses.dataclass(frozen=True)
class SimOptions:
    """Calibration knobs of the timing and power model.

    ``gemv_utilization`` applies to GEMMs with a single-row left operand (decode projections,
    decode attention, ``lm_head``); ``tensor_utilization`` to every other GEMM.
    """

    tensor_utilization: float = 0.8
    gemv_utilization: float = 0.18
    sfpe_utilization: float = 1.0
    activity_factor: float = 0.2
    idle_factor: float = 0.03
    kv_block_tokens: int = 64
    rebalance_period: int = 64
    tile_size: int = 512
    latency_policy: LatencyPolicy = LatencyPolicy.MEAN_LAYER
    trace: bool = False

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "latency_policy", LatencyPolicy(self.latency_policy))
        except ValueError as exc:
            raise ConfigError(f"options: {exc}") from exc
        for name in ("tensor_utilization", "gemv_utilization", "sfpe_utilization"):
            value = _number(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"options: {name} must be in (0, 1], got {value}")
        for name in ("activity_factor", "idle_factor"):
            value = _number(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"options: {name} must be in [0, 1], got {value}")
        for name in ("kv_block_tokens", "rebalance_period", "tile_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"options: {name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.trace, bool):
            raise ConfigError(f"options: trace must be true or false, got {self.trace!r}")


def _number(options: SimOptions, name: str) -> float:
    value = getattr(options, name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"options: {name} must be a number, got {value!r}")
    return value


def options_from_dict(data: Mapping | None, source: str = "options") -> SimOptions:
    if data is None:
        return SimOptions()
    check_keys(data, SimOptions, source)
    try:
        return SimOptions(**data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from exc


@dataclasses.dataclass(slots=True)
class WorkUnit:
    """A fusion group or lone kernel scheduled as one piece of work.

    Decode-step units carry their step template's kernels, so the ids inside ``nodes`` are
    local to one layer; ``layer_index`` says which layer the unit runs.
    """

    id: int
    nodes: tuple[KernelNode, ...]
    chiplet: Chiplet
    phase: Phase
    step: int = 0
    layer_index: int = 0
    fusion: FusionKind | None = None
    intermediate_bytes_kept_local: int = 0
    tile_iterations: int = 1
    link_bytes: int = 0
    migration: bool = False
    deps: tuple[int, ...] = ()
    signature: tuple | None = None

    @classmethod
    def from_node(cls, unit_id: int, node: KernelNode, chiplet: Chiplet, link_bytes: int = 0) -> "WorkUnit":
        return cls(
            id=unit_id,
            nodes=(node,),
            chiplet=chiplet,
            phase=node.phase,
            step=node.step,
            layer_index=node.layer_index,
            link_bytes=link_bytes,
        )

    @property
    def resource(self) -> str:
        return LINK_RESOURCE if self.link_bytes else self.chiplet.value

    @property
    def kind_key(self) -> str:
        if self.migration:
            return "KvMigration"
        if self.link_bytes:
            return "LinkTransfer"
        if self.fusion is not None:
            return self.fusion.value
        return self.nodes[0].kind.value


@dataclasses.dataclass(frozen=True)
class KernelCost:
    compute_ns: float
    memory_ns: float
    dynamic_energy_j: float
    chiplet: str
    dram_bytes: int = 0
    rram_read_bytes: int = 0
    rram_write_bytes: int = 0
    link_bytes: int = 0
    kv_offload_bytes: int = 0
    rram_sfpe: bool = False

    @property
    def chosen_ns(self) -> float:
        return max(self.compute_ns, self.memory_ns)


@dataclasses.dataclass(frozen=True)
class TierContext:
    """Where a unit's operands live.

    KV byte vectors hold one entry per DRAM tier followed by the RRAM-resident bytes.
    """

    weight_tier: int = 0
    activation_tier: int = 0
    kv_read_bytes: tuple[int, ...] = ()
    kv_write_bytes: tuple[int, ...] = ()
    latency_policy: LatencyPolicy = LatencyPolicy.MEAN_LAYER
    link: LinkSpec | None = None
    rram: RramChipletSpec | None = None


def _activation_bytes(node: KernelNode) -> int:
    if node.kind is KernelKind.KV_APPEND:
        return node.bytes_read
    if node.kind is KernelKind.KV_READ:
        return node.bytes_written
    return node.bytes_read - node.weight_bytes + node.bytes_written


def _dram_time_ns(spec: DramChipletSpec, tier: int, nbytes: int, policy: LatencyPolicy) -> float:
    if nbytes <= 0:
        return 0.0
    bursts = -(-nbytes // spec.row_buffer_bytes)
    latency = tier_access_latency_ns(spec, tier, policy)
    return nbytes / spec.nmp_bandwidth_bytes_per_s * 1e9 + bursts * latency / spec.channels


def _gemm_utilization(node: KernelNode, options: SimOptions) -> float:
    shapes = node.operand_shapes
    return options.gemv_utilization if shapes and shapes[0].rows == 1 else options.tensor_utilization


def _compute_ns(unit: WorkUnit, spec: DramChipletSpec | RramChipletSpec, options: SimOptions) -> tuple[float, bool]:
    on_rram = isinstance(spec, RramChipletSpec)
    total = 0.0
    reducer_used = False
    for node in unit.nodes:
        if node.kind is KernelKind.GEMM:
            total += node.flops / (spec.peak_flops * _gemm_utilization(node, options)) * 1e9
        elif node.kind in SFPE_KINDS:
            if not on_rram:
                total += node.flops / (spec.sfpe_simd_width * spec.clock_ghz * options.sfpe_utilization)
            elif unit.fusion is FusionKind.FUSED_FFN_ACT:
                total += node.flops / (spec.pus * spec.clock_ghz)
                reducer_used = True
            else:
                raise MappingError(
                    f"Kernel {node.id} ({node.label}) needs a special-function PE but is placed on the RRAM chiplet"
                )
    return total, reducer_used


def time_kernel(
    unit: WorkUnit,
    spec: DramChipletSpec | RramChipletSpec,
    tier_ctx: TierContext | None = None,
    options: SimOptions | None = None,
) -> KernelCost:
    """Roofline cost of one work unit on ``spec``.

    External traffic excludes the intermediates a fusion group keeps local. On the DRAM
    chiplet, weights come from their tier, activations from ``tier_ctx.activation_tier`` and
    KV bytes from wherever the cache blocks live; RRAM-resident KV is fetched over the link.
    On the RRAM chiplet weights stream from the arrays and activations stay in SRAM.
    """
    tier_ctx = tier_ctx or TierContext()
    options = options or SimOptions()
    compute_ns, reducer_used = _compute_ns(unit, spec, options)
    weight_bytes = sum(node.weight_bytes for node in unit.nodes)
    kv_read = tuple(tier_ctx.kv_read_bytes)
    kv_write = tuple(tier_ctx.kv_write_bytes)

    if isinstance(spec, RramChipletSpec):
        memory_ns = 0.0
        if weight_bytes:
            memory_ns = spec.read_latency_ns + weight_bytes / spec.array_read_bandwidth_bytes_per_s * 1e9
        return KernelCost(
            compute_ns=compute_ns,
            memory_ns=memory_ns,
            dynamic_energy_j=rram_access_energy_j(weight_bytes * 8, AccessKind.READ, spec),
            chiplet=Chiplet.RRAM.value,
            rram_read_bytes=weight_bytes,
            rram_sfpe=reducer_used,
        )

    activation = sum(_activation_bytes(node) for node in unit.nodes) - 2 * unit.intermediate_bytes_kept_local
    if activation < 0:
        raise SimulationError(f"Unit {unit.id}: fused intermediates exceed its activation traffic")
    traffic = [0] * spec.tiers
    traffic[tier_ctx.weight_tier] += weight_bytes
    traffic[tier_ctx.activation_tier] += activation
    for vector in (kv_read, kv_write):
        for tier, nbytes in enumerate(vector[: spec.tiers]):
            traffic[tier] += nbytes
    memory_ns = sum(_dram_time_ns(spec, tier, nbytes, tier_ctx.latency_policy) for tier, nbytes in enumerate(traffic))
    dram_bytes = sum(traffic)
    energy = dram_access_energy_j(dram_bytes * 8, spec)

    offloaded = kv_read[spec.tiers] if len(kv_read) > spec.tiers else 0
    if offloaded:
        if tier_ctx.link is None or tier_ctx.rram is None:
            raise SimulationError(f"Unit {unit.id} reads offloaded KV but no link/RRAM path was given")
        link_ns, link_j = time_link_transfer(offloaded, tier_ctx.link)
        memory_ns += link_ns + tier_ctx.rram.read_latency_ns + offloaded / tier_ctx.rram.peak_bw_bytes_per_s * 1e9
        energy += link_j + rram_access_energy_j(offloaded * 8, AccessKind.READ, tier_ctx.rram)
    return KernelCost(
        compute_ns=compute_ns,
        memory_ns=memory_ns,
        dynamic_energy_j=energy,
        chiplet=Chiplet.DRAM.value,
        dram_bytes=dram_bytes,
        rram_read_bytes=offloaded,
        link_bytes=offloaded,
        kv_offload_bytes=offloaded,
    )


def time_link_transfer(nbytes: int, link: LinkSpec) -> tuple[float, float]:
    if nbytes < 0:
        raise ValueError(f"transfer size must be >= 0, got {nbytes}")
    return link.latency_ns + nbytes / link.bandwidth_bytes_per_s * 1e9, link_energy_j(nbytes * 8, link)


def _check_plan(graph: OperatorGraph, plan: MappingPlan) -> None:
    if plan.model_name != graph.model.name:
        raise MappingError(f"Plan was built for {plan.model_name}, not {graph.model.name}")
    if len(plan.placement.assignment) != len(graph.nodes):
        raise MappingError(
            f"Plan places {len(plan.placement.assignment)} kernels but the graph has {len(graph.nodes)}"
        )


def _signature(node: KernelNode) -> tuple:
    """Everything about a kernel that its cost depends on, apart from where its operands live."""
    return (
        node.kind,
        node.operand_shapes,
        node.flops,
        node.bytes_read,
        node.bytes_written,
        node.weight_bytes,
        node.kv_bytes,
    )


def _prefix_units(graph: OperatorGraph, plan: MappingPlan, groups: Mapping[int, Any], edges: Mapping[int, int]) -> list[WorkUnit]:
    prefix = graph.nodes.prefix
    unit_of = [-1] * len(prefix)
    units: list[WorkUnit] = []
    node_id = 0
    while node_id < len(prefix):
        node = prefix[node_id]
        group = groups.get(node_id)
        if group is not None:
            if group.members[-1] >= len(prefix):
                raise MappingError(f"Fusion group {group.id} spans prefill and decode kernels")
            unit = WorkUnit(
                id=len(units),
                nodes=tuple(prefix[member] for member in group.members),
                chiplet=group.chiplet,
                phase=node.phase,
                step=node.step,
                layer_index=node.layer_index,
                fusion=group.kind,
                intermediate_bytes_kept_local=group.intermediate_bytes_kept_local,
                tile_iterations=group.tile_iterations,
            )
        else:
            unit = WorkUnit.from_node(len(units), node, plan.placement.assignment[node_id], edges.get(node_id, 0))
        for member in unit.nodes:
            if unit_of[member.id] != -1:
                raise MappingError(f"Kernel {member.id} belongs to more than one work unit")
            unit_of[member.id] = unit.id
        deps = {unit_of[dep] for member in unit.nodes for dep in member.deps}
        deps.discard(unit.id)
        if -1 in deps:
            raise MappingError(f"Unit {unit.id} depends on a kernel outside the plan")
        unit.deps = tuple(sorted(deps))
        units.append(unit)
        node_id = unit.nodes[-1].id + 1
    return units


def build_work_units(graph: OperatorGraph, plan: MappingPlan, rebalance_period: int) -> list[WorkUnit]:
    """Fusion groups and lone kernels in kernel order, with a KV migration unit every R decode steps.

    The first unit of a decode layer that has no in-layer producer waits on the unit
    before it, and on the migration unit when one precedes the step.
    """
    _check_plan(graph, plan)
    groups = {group.members[0]: group for group in plan.fusion_groups}
    edges = {edge.consumer_id: edge.bytes for edge in plan.placement.transfer_edges}
    assignment = plan.placement.assignment
    units = _prefix_units(graph, plan, groups, edges)
    previous = len(units) - 1
    num_layers = graph.model.num_layers

    for step in range(1, graph.output_tokens + 1):
        extra: tuple[int, ...] = ()
        if step > 1 and (step - 1) % rebalance_period == 0:
            migration = WorkUnit(
                id=len(units),
                nodes=(),
                chiplet=Chiplet.DRAM,
                phase=Phase.DECODE_STEP,
                step=step - 1,
                migration=True,
                deps=(previous,),
            )
            units.append(migration)
            extra = (migration.id,)
        template = graph.step_template(step)
        layer_nodes = template.layer
        signatures = [_signature(node) for node in layer_nodes]
        start = graph.nodes.step_start(step)
        for layer in range(num_layers):
            base = start + layer * LAYER_KERNELS
            unit_at = [-1] * LAYER_KERNELS
            slot = 0
            while slot < LAYER_KERNELS:
                group = groups.get(base + slot)
                count = len(group.members) if group is not None else 1
                if group is not None and (slot + count > LAYER_KERNELS or group.members[-1] != base + slot + count - 1):
                    raise MappingError(f"Fusion group {group.id} does not cover contiguous kernels of one layer")
                unit_id = len(units)
                members = layer_nodes[slot : slot + count]
                for position in range(slot, slot + count):
                    if unit_at[position] != -1:
                        raise MappingError(f"Kernel {base + position} belongs to more than one work unit")
                    unit_at[position] = unit_id
                deps: set[int] = set()
                for member in members:
                    if member.deps:
                        deps.update(unit_at[dep] for dep in member.deps)
                    else:
                        deps.add(previous)
                        deps.update(extra)
                deps.discard(unit_id)
                if -1 in deps:
                    raise MappingError(f"Unit {unit_id} depends on a kernel outside the plan")
                unit = WorkUnit(
                    id=unit_id,
                    nodes=members,
                    chiplet=group.chiplet if group is not None else assignment[base + slot],
                    phase=Phase.DECODE_STEP,
                    step=step,
                    layer_index=layer,
                    deps=tuple(sorted(deps)),
                    signature=tuple(signatures[slot : slot + count]),
                )
                if group is not None:
                    unit.fusion = group.kind
                    unit.intermediate_bytes_kept_local = group.intermediate_bytes_kept_local
                    unit.tile_iterations = group.tile_iterations
                else:
                    unit.link_bytes = edges.get(base + slot, 0)
                units.append(unit)
                slot += count
            previous = len(units) - 1
            extra = ()
        head_id = start + graph.step_size - 1
        units.append(
            WorkUnit(
                id=len(units),
                nodes=(template.lm_head,),
                chiplet=assignment[head_id],
                phase=Phase.DECODE_STEP,
                step=step,
                layer_index=template.lm_head.layer_index,
                link_bytes=edges.get(head_id, 0),
                deps=(previous,),
                signature=(_signature(template.lm_head),),
            )
        )
        previous = len(units) - 1
    return units


@dataclasses.dataclass(frozen=True)
class SimReport:
    model: str
    policy: str
    output_tokens: int
    total_latency_ns: float
    phase_latency_ns: dict[str, float]
    kind_latency_ns: dict[str, float]
    kind_energy_j: dict[str, float]
    steady_state_decode_ns_per_token: float
    throughput_token_per_s: float
    avg_power_w: float
    energy_per_inference_j: float
    token_per_j: float
    dynamic_energy_j: float
    static_energy_j: float
    link_bytes_total: int
    kv_offload_link_bytes: int
    dram_bits_accessed: int
    rram_bits_read: int
    rram_bits_written: int
    kv_migrations: int
    ffn_weight_preload_bytes: int
    power_breakdown_w: dict[str, float]
    notes: tuple[str, ...] = ()
    schema_version: int = REPORT_SCHEMA_VERSION
    trace: tuple[dict, ...] = dataclasses.field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        data = {field.name: getattr(self, field.name) for field in dataclasses.fields(self) if field.name != "trace"}
        data["notes"] = list(self.notes)
        return data

    def csv_row(self) -> dict[str, Any]:
        data = self.to_dict()
        row = {column: data[column] for column in REPORT_CSV_COLUMNS if column in data}
        for column, phase in _PHASE_COLUMNS.items():
            row[column] = self.phase_latency_ns.get(phase.value, 0.0)
        return row


def write_report_json(path: str | Path, report: SimReport) -> None:
    write_json(path, report.to_dict())


def write_report_csv(path: str | Path, reports: Iterable[SimReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=REPORT_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(report.csv_row())


def _to_ps(ns: float) -> int:
    return int(round(ns * 1000))


_NO_COST = {chiplet: KernelCost(0.0, 0.0, 0.0, chiplet.value) for chiplet in Chiplet}


class _Simulation:
    def __init__(self, graph: OperatorGraph, plan: MappingPlan, platform: PlatformSpec, options: SimOptions) -> None:
        self.graph = graph
        self.plan = plan
        self.platform = platform
        self.options = options
        self.units = build_work_units(graph, plan, options.rebalance_period)
        cfg = graph.model
        self.cache = KvCache(
            num_layers=cfg.num_layers,
            kv_bytes_per_token=cfg.kv_bytes_per_token_per_layer,
            dram=platform.dram,
            tier_budgets=kv_tier_budgets(platform, plan.weight_layout),
            rram_budget=platform.rram.capacity_bytes - plan.weight_layout.rram_weight_bytes,
            block_tokens=options.kv_block_tokens,
        )
        self.costs: list[KernelCost | None] = [None] * len(self.units)
        self.start_ps = [0] * len(self.units)
        self.end_ps = [0] * len(self.units)
        self.trace: list[dict] = []
        self.kv_migrations = 0
        # (signature, placement, tiers) -> cost, for units whose cost does not depend on the KV read profile
        self._memo: dict[tuple, KernelCost] = {}
        self._link_costs: dict[int, KernelCost] = {}

    def _migrate(self, unit: WorkUnit) -> KernelCost:
        before, after = self.cache.rebalance()
        cost = migration_cost(before, after, self.platform)
        already = {block.id for block in before if block.on_rram}
        offloaded = sum(block.bytes for block in after if block.on_rram and block.id not in already)
        self.kv_migrations += cost.blocks_moved
        if offloaded:
            LOGGER.warning("Offloaded %d B of cold KV cache to RRAM at decode step %d", offloaded, unit.step)
        return KernelCost(
            compute_ns=0.0,
            memory_ns=cost.ns,
            dynamic_energy_j=cost.joules,
            chiplet=Chiplet.DRAM.value,
            dram_bytes=2 * (cost.bytes_moved - offloaded) + offloaded,
            rram_write_bytes=offloaded,
            link_bytes=offloaded,
            kv_offload_bytes=offloaded,
        )

    def cost_of(self, unit: WorkUnit) -> KernelCost:
        platform = self.platform
        if unit.migration:
            return self._migrate(unit)
        if unit.link_bytes:
            cost = self._link_costs.get(unit.link_bytes)
            if cost is None:
                ns, joules = time_link_transfer(unit.link_bytes, platform.link)
                cost = KernelCost(0.0, ns, joules, LINK_RESOURCE, link_bytes=unit.link_bytes)
                self._link_costs[unit.link_bytes] = cost
            return cost

        kv_read: tuple[int, ...] = ()
        kv_write: tuple[int, ...] = ()
        weight_node = None
        for node in unit.nodes:
            kind = node.kind
            if kind is KernelKind.KV_APPEND:
                written = self.cache.append(unit.layer_index, node.operand_shapes[0].rows)
                vector = [0] * (platform.dram.tiers + 1)
                for residence, nbytes in written.items():
                    vector[self.cache.slot_of(residence)] += nbytes
                kv_write = tuple(vector)
            elif kind is KernelKind.KV_READ:
                kv_read = tuple(self.cache.read_profile(unit.layer_index))
            elif node.weight_bytes and weight_node is None:
                weight_node = node
        if weight_node is None and all(node.kind is KernelKind.TRANSFER for node in unit.nodes):
            return _NO_COST[unit.chiplet]
        weight_tier = self.plan.weight_layout.tier_for(weight_node, unit.layer_index) if weight_node else 0

        key = None
        if unit.signature is not None and not kv_read:
            key = (
                unit.signature,
                unit.chiplet,
                unit.fusion,
                unit.intermediate_bytes_kept_local,
                unit.tile_iterations,
                weight_tier,
                kv_write,
            )
            cost = self._memo.get(key)
            if cost is not None:
                return cost
        ctx = TierContext(
            weight_tier=weight_tier,
            kv_read_bytes=kv_read,
            kv_write_bytes=kv_write,
            latency_policy=self.options.latency_policy,
            link=platform.link,
            rram=platform.rram,
        )
        cost = time_kernel(unit, platform.chiplet(unit.chiplet), ctx, self.options)
        if key is not None:
            self._memo[key] = cost
        return cost

    def execute(self) -> SimReport:
        units = self.units
        resources = [unit.resource for unit in units]
        consumers: list[list[int]] = [[] for _ in units]
        pending = [len(unit.deps) for unit in units]
        for unit in units:
            for dep in unit.deps:
                consumers[dep].append(unit.id)
        ready: dict[str, list[int]] = {Chiplet.DRAM.value: [], Chiplet.RRAM.value: [], LINK_RESOURCE: []}
        busy: dict[str, int | None] = {name: None for name in ready}
        busy_ps = {name: 0 for name in ready}
        events: list[tuple[int, int]] = []
        for unit in units:
            if not unit.deps:
                heapq.heappush(ready[resources[unit.id]], unit.id)
        tracing = self.options.trace
        now = 0
        done = 0

        def dispatch() -> None:
            for resource, queue in ready.items():
                if busy[resource] is not None or not queue:
                    continue
                unit_id = heapq.heappop(queue)
                cost = self.cost_of(units[unit_id])
                duration = _to_ps(cost.chosen_ns)
                self.costs[unit_id] = cost
                self.start_ps[unit_id] = now
                self.end_ps[unit_id] = now + duration
                busy[resource] = unit_id
                busy_ps[resource] += duration
                heapq.heappush(events, (now + duration, unit_id))
                if tracing:
                    self.trace.append({"time_ps": now, "chiplet": resource, "event": "start", "id": unit_id})

        dispatch()
        while events:
            now, unit_id = heapq.heappop(events)
            resource = resources[unit_id]
            busy[resource] = None
            done += 1
            if tracing:
                self.trace.append({"time_ps": now, "chiplet": resource, "event": "finish", "id": unit_id})
            for consumer in consumers[unit_id]:
                pending[consumer] -= 1
                if pending[consumer] == 0:
                    heapq.heappush(ready[resources[consumer]], consumer)
            dispatch()
        if done != len(units):
            stuck = next(index for index, count in enumerate(pending) if count > 0)
            waiting_on = next(dep for dep in units[stuck].deps if self.costs[dep] is None)
            raise SimulationError(f"Deadlock: unit {stuck} waits on unit {waiting_on} which never ran")
        return self.report(now, busy_ps)

    def report(self, total_ps: int, busy_ps: Mapping[str, int]) -> SimReport:
        options, platform = self.options, self.platform
        total_ns = total_ps / 1000
        if total_ns <= 0:
            raise SimulationError("Simulation finished in zero time")
        phase_bounds: dict[str, list[int]] = {}
        kind_latency: dict[str, float] = {}
        kind_energy: dict[str, float] = {}
        dram_bytes = rram_read = rram_write = link_bytes = offload_bytes = 0
        dynamic = 0.0
        reducer_used = False
        used: set[str] = set()
        for unit, cost, start, end in zip(self.units, self.costs, self.start_ps, self.end_ps):
            bounds = phase_bounds.get(unit.phase.value)
            if bounds is None:
                phase_bounds[unit.phase.value] = [start, end]
            else:
                bounds[0] = min(bounds[0], start)
                bounds[1] = max(bounds[1], end)
            key = unit.kind_key
            kind_latency[key] = kind_latency.get(key, 0.0) + (end - start) / 1000
            kind_energy[key] = kind_energy.get(key, 0.0) + cost.dynamic_energy_j
            if not unit.link_bytes:
                used.add(unit.chiplet.value)
            dynamic += cost.dynamic_energy_j
            dram_bytes += cost.dram_bytes
            rram_read += cost.rram_read_bytes
            rram_write += cost.rram_write_bytes
            link_bytes += cost.link_bytes
            offload_bytes += cost.kv_offload_bytes
            reducer_used = reducer_used or cost.rram_sfpe

        static: dict[str, float] = {}
        for chiplet in Chiplet:
            if chiplet.value not in used:
                static[chiplet.value] = 0.0
                continue
            busy_s = busy_ps[chiplet.value] * 1e-12
            idle_s = max(0.0, total_ns * 1e-9 - busy_s)
            peak = platform.chiplet(chiplet).peak_power_w
            static[chiplet.value] = peak * (options.activity_factor * busy_s + options.idle_factor * idle_s)
        static_total = sum(static.values())
        energy = dynamic + static_total
        total_s = total_ns * 1e-9
        avg_power = energy / total_s

        decode = phase_bounds.get(Phase.DECODE_STEP.value)
        if decode is None:
            raise SimulationError("Run has no decode steps")
        ns_per_token = (decode[1] - decode[0]) / 1000 / self.graph.output_tokens
        throughput = 1e9 / ns_per_token
        dram_j = dram_access_energy_j(dram_bytes * 8, platform.dram)
        rram_j = rram_access_energy_j(rram_read * 8, AccessKind.READ, platform.rram) + rram_access_energy_j(
            rram_write * 8, AccessKind.WRITE, platform.rram
        )
        link_j = link_energy_j(link_bytes * 8, platform.link)

        notes = []
        if reducer_used:
            notes.append(RRAM_ACTIVATION_NOTE)
        for spec in (platform.dram, platform.rram):
            check = peak_flops_check(spec)
            if check.mismatch:
                notes.append(f"{check.chiplet}-peak-flops-mismatch")
        if rram_capacity_check(platform.rram).mismatch:
            notes.append("rram-capacity-mismatch")
        if self.plan.policy is MappingPolicy.HETEROGENEOUS and len(self.plan.placement.rram_ffn_layers) < self.graph.model.num_layers:
            notes.append("ffn-spilled-to-dram")
        if self.cache.overcommitted_blocks:
            LOGGER.warning(
                "%d KV blocks were placed in an already full top DRAM tier", self.cache.overcommitted_blocks
            )
            notes.append(KV_OVERCOMMIT_NOTE)

        return SimReport(
            model=self.graph.model.name,
            policy=self.plan.policy.value,
            output_tokens=self.graph.output_tokens,
            total_latency_ns=total_ns,
            phase_latency_ns={phase: (end - start) / 1000 for phase, (start, end) in phase_bounds.items()},
            kind_latency_ns=dict(sorted(kind_latency.items())),
            kind_energy_j=dict(sorted(kind_energy.items())),
            steady_state_decode_ns_per_token=ns_per_token,
            throughput_token_per_s=throughput,
            avg_power_w=avg_power,
            energy_per_inference_j=avg_power * total_s,
            token_per_j=throughput / avg_power,
            dynamic_energy_j=dynamic,
            static_energy_j=static_total,
            link_bytes_total=link_bytes,
            kv_offload_link_bytes=offload_bytes,
            dram_bits_accessed=dram_bytes * 8,
            rram_bits_read=rram_read * 8,
            rram_bits_written=rram_write * 8,
            kv_migrations=self.kv_migrations,
            ffn_weight_preload_bytes=self.plan.weight_layout.rram_weight_bytes,
            power_breakdown_w={
                "dram": (dram_j + static[Chiplet.DRAM.value]) / total_s,
                "rram": (rram_j + static[Chiplet.RRAM.value]) / total_s,
                "link": link_j / total_s,
            },
            notes=tuple(notes),
            trace=tuple(self.trace),
        )


def run(
    graph: OperatorGraph,
    plan: MappingPlan,
    platform: PlatformSpec,
    options: SimOptions | None = None,
) -> SimReport:
    options = options or SimOptions()
    report = _Simulation(graph, plan, platform, options).execute()
    LOGGER.info(
        "%s [%s]: %.1f token/s, %.3f W, %.1f token/J",
        report.model,
        report.policy,
        report.throughput_token_per_s,
        report.avg_power_w,
        report.token_per_j,
    )
    return report


@dataclasses.dataclass(frozen=True)
class Scenario:
    model: ModelConfig
    platform: PlatformSpec
    policy: MappingPolicy | None = None
    prompt_tokens: int = 128
    image: tuple[int, int] | None = (512, 512)
    output_tokens: int = 488
    ffn_overflow: str = "error"
    options: SimOptions = dataclasses.field(default_factory=SimOptions)


def scenario_plan(scenario: Scenario, graph: OperatorGraph) -> MappingPlan:
    return build_plan(
        graph,
        scenario.platform,
        scenario.policy,
        ffn_overflow=scenario.ffn_overflow,
        kv_block_tokens=scenario.options.kv_block_tokens,
        tile_size=scenario.options.tile_size,
    )


def prepare(scenario: Scenario) -> tuple[OperatorGraph, MappingPlan]:
    graph = build_graph(scenario.model, scenario.prompt_tokens, scenario.image, scenario.output_tokens)
    return graph, scenario_plan(scenario, graph)


def simulate(scenario: Scenario, plan: MappingPlan | None = None) -> SimReport:
    graph = build_graph(scenario.model, scenario.prompt_tokens, scenario.image, scenario.output_tokens)
    if plan is None:
        plan = scenario_plan(scenario, graph)
    return run(graph, plan, scenario.platform, scenario.options)


class SweepAxis(str, enum.Enum):
    SEQ_LEN = "SeqLen"
    POLICY = "Policy"
    LINK_BW = "LinkBw"
    TIER_POLICY = "TierPolicy"


_AXIS_ALIASES = {"seqlen": SweepAxis.SEQ_LEN, "policy": SweepAxis.POLICY, "linkbw": SweepAxis.LINK_BW, "tierpolicy": SweepAxis.TIER_POLICY}


def parse_axis(value: str | SweepAxis) -> SweepAxis:
    if isinstance(value, SweepAxis):
        return value
    axis = _AXIS_ALIASES.get(value.lower().replace("-", "").replace("_", ""))
    if axis is None:
        raise ConfigError(f"Unknown sweep axis '{value}' (use seqlen, policy, linkbw or tierpolicy)")
    return axis


def apply_axis(base: Scenario, axis: SweepAxis, value: Any) -> Scenario:
    try:
        if axis is SweepAxis.SEQ_LEN:
            return dataclasses.replace(base, output_tokens=int(value))
        if axis is SweepAxis.POLICY:
            return dataclasses.replace(base, policy=parse_policy(value))
        if axis is SweepAxis.LINK_BW:
            return dataclasses.replace(base, platform=base.platform.with_link_bandwidth(float(value)))
        return dataclasses.replace(base, options=dataclasses.replace(base.options, latency_policy=LatencyPolicy(value)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"Bad {axis.value} sweep value {value!r}: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class SweepPoint:
    value: Any
    report: SimReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None



def _run_point(base: Scenario, axis: SweepAxis | None, value: Any) -> SweepPoint:
    try:
        scenario = base if axis is None else apply_axis(base, axis, value)
        return SweepPoint(value=value, report=simulate(scenario))
    except Exception as exc:
        label = value if axis is None else f"{axis.value}={value}"
        LOGGER.warning("Simulation %s failed: %s", label, exc)
        LOGGER.debug("Simulation failure detail", exc_info=True)
        return SweepPoint(value=value, error=f"{type(exc).__name__}: {exc}")


def run_points(
    jobs: Sequence[tuple[Scenario, SweepAxis | None, Any]],
    max_workers: int | None = None,
) -> list[SweepPoint]:
    """Run independent simulations, in worker processes when there is more than one.

    Each job is ``(scenario, axis, value)``; with ``axis=None`` the scenario runs as given
    and ``value`` only labels the point. Points come back in job order.
    """
    workers = max_workers or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1 or len(jobs) <= 1:
        return [_run_point(*job) for job in jobs]
    try:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_run_point, *zip(*jobs)))
    except (OSError, BrokenProcessPool) as exc:
        LOGGER.warning("Worker processes unavailable (%s); running %d simulations in-process", exc, len(jobs))
        return [_run_point(*job) for job in jobs]


def sweep(
    base: Scenario,
    axis: SweepAxis | str,
    values: Sequence[Any],
    max_workers: int | None = None,
) -> list[SweepPoint]:
    """Run one simulation per value; failures are recorded per point and the rest continue."""
    axis = parse_axis(axis)
    if not values:
        raise EmptySweepError(f"{axis.value} sweep has no values")
    return run_points([(base, axis, value) for value in values], max_workers)
