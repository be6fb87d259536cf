"""Mapping framework: chiplet placement, kernel fusion and KV-cache tiering."""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import CapacityError, ConfigError, MappingError
from .hardware import (
    AccessKind,
    Chiplet,
    DramChipletSpec,
    PlatformSpec,
    dram_access_energy_j,
    link_energy_j,
    rram_access_energy_j,
)
from .jsonio import read_json, write_json
from .workload import LAYER_KERNELS, KernelKind, KernelNode, OperatorGraph, Phase

LOGGER = logging.getLogger(__name__)

RRAM_RESIDENCE = "Rram"
FFN_LABELS = frozenset({"ffn_up", "ffn_act", "ffn_down", "ffn_bias"})
BACKBONE_PHASES = frozenset({Phase.PREFILL, Phase.DECODE_STEP})
DEFAULT_KV_BLOCK_TOKENS = 64
DEFAULT_TILE_SIZE = 512


class MappingPolicy(str, enum.Enum):
    HETEROGENEOUS = "Heterogeneous"
    DRAM_ONLY = "DramOnly"


_POLICY_ALIASES = {"het": MappingPolicy.HETEROGENEOUS, "dram-only": MappingPolicy.DRAM_ONLY}


def parse_policy(value: str | MappingPolicy) -> MappingPolicy:
    if isinstance(value, MappingPolicy):
        return value
    if value in _POLICY_ALIASES:
        return _POLICY_ALIASES[value]
    try:
        return MappingPolicy(value)
    except ValueError as exc:
        raise ConfigError(f"Unknown policy '{value}' (use het, dram-only, Heterogeneous or DramOnly)") from exc


class FusionKind(str, enum.Enum):
    FUSED_QKV_PROJ = "FusedQkvProj"
    FUSED_ATTN_STREAM = "FusedAttnStream"
    FUSED_FFN_ACT = "FusedFfnAct"
    FUSED_NORM = "FusedNorm"


class HotnessPolicy(str, enum.Enum):
    RECENCY = "Recency"


_FUSION_LABELS = {
    "qkv_proj": FusionKind.FUSED_QKV_PROJ,
    "qkv_bias": FusionKind.FUSED_QKV_PROJ,
    "kv_read": FusionKind.FUSED_ATTN_STREAM,
    "attn_score": FusionKind.FUSED_ATTN_STREAM,
    "attn_softmax": FusionKind.FUSED_ATTN_STREAM,
    "attn_value": FusionKind.FUSED_ATTN_STREAM,
    "ffn_up": FusionKind.FUSED_FFN_ACT,
    "ffn_act": FusionKind.FUSED_FFN_ACT,
    "ffn_down": FusionKind.FUSED_FFN_ACT,
    "ffn_bias": FusionKind.FUSED_FFN_ACT,
}


def dram_tier(tier: int) -> str:
    return f"DramTier{tier}"


def tier_of(residence: str) -> int | None:
    if residence == RRAM_RESIDENCE:
        return None
    if not residence.startswith("DramTier"):
        raise MappingError(f"Unknown KV residence '{residence}'")
    return int(residence[len("DramTier"):])


@dataclasses.dataclass(frozen=True, slots=True)
class TransferEdge:
    producer_id: int
    consumer_id: int
    bytes: int


@dataclasses.dataclass(frozen=True)
class Placement:
    policy: MappingPolicy
    assignment: tuple[Chiplet, ...]
    transfer_edges: tuple[TransferEdge, ...]
    rram_ffn_layers: tuple[int, ...] = ()

    def chiplet_of(self, kernel_id: int) -> Chiplet:
        return self.assignment[kernel_id]

    @property
    def transfer_bytes(self) -> int:
        return sum(edge.bytes for edge in self.transfer_edges)


@dataclasses.dataclass(frozen=True, slots=True)
class FusionGroup:
    id: int
    kind: FusionKind
    members: tuple[int, ...]
    chiplet: Chiplet
    intermediate_bytes_kept_local: int
    tile_iterations: int = 1


@dataclasses.dataclass(frozen=True)
class KvBlock:
    id: int
    layer_index: int
    token_start: int
    token_end: int
    bytes: int
    hotness: float
    residence: str
    write_count: int = 0

    @property
    def on_rram(self) -> bool:
        return self.residence == RRAM_RESIDENCE


@dataclasses.dataclass(frozen=True)
class WeightLayout:
    region_tiers: Mapping[str, int]
    tier_weight_bytes: tuple[int, ...]
    rram_weight_bytes: int

    def tier_for(self, node: KernelNode, layer_index: int | None = None) -> int:
        key = weight_region(node, layer_index)
        return self.region_tiers.get(key, len(self.tier_weight_bytes) - 1)


@dataclasses.dataclass(frozen=True)
class MappingPlan:
    model_name: str
    placement: Placement
    fusion_groups: tuple[FusionGroup, ...]
    kv_assignment: tuple[KvBlock, ...]
    weight_layout: WeightLayout
    expected_link_bytes_per_step: int
    kv_block_tokens: int = DEFAULT_KV_BLOCK_TOKENS
    tile_size: int = DEFAULT_TILE_SIZE

    @property
    def policy(self) -> MappingPolicy:
        return self.placement.policy


def weight_region(node: KernelNode, layer_index: int | None = None) -> str:
    if node.phase is Phase.ENCODE:
        return "encoder"
    if node.phase is Phase.CONNECT:
        return "connector"
    if node.label == "lm_head":
        return "embedding"
    part = "ffn" if node.label in FFN_LABELS else "attn"
    return f"layer:{node.layer_index if layer_index is None else layer_index}:{part}"


def _rram_side(node: KernelNode) -> bool:
    return node.phase in BACKBONE_PHASES and (node.label in FFN_LABELS or node.label == "attn_out")


def _cut_edges(nodes: Sequence[KernelNode], assignment: Sequence[Chiplet]) -> list[tuple[int, int, int]]:
    """(producer, consumer, bytes) of transfer kernels fed from the other chiplet; ids are positions."""
    cuts = []
    for node in nodes:
        if node.kind is not KernelKind.TRANSFER:
            continue
        for dep in node.deps:
            if assignment[dep] is not assignment[node.id]:
                cuts.append((dep, node.id, nodes[dep].bytes_written))
    return cuts


def place(
    graph: OperatorGraph,
    platform: PlatformSpec,
    policy: MappingPolicy | str = MappingPolicy.HETEROGENEOUS,
    ffn_overflow: str = "error",
) -> Placement:
    """Assign each kernel to a chiplet and derive the cross-chiplet transfer edges.

    Heterogeneous keeps QKV, attention, norms and ``lm_head`` on the DRAM NMP and every FFN
    layer whose weights fit on the RRAM NMP; the ``attn_out`` transfer lands on RRAM and
    ``ffn_out`` on DRAM, giving two activation-only edges per layer. ``ffn_overflow="spill"``
    leaves layers that do not fit on DRAM instead of failing.
    """
    policy = parse_policy(policy)
    cfg = graph.model
    if ffn_overflow not in ("error", "spill"):
        raise ConfigError(f"ffn_overflow must be 'error' or 'spill', got '{ffn_overflow}'")
    if policy is MappingPolicy.DRAM_ONLY:
        rram_layers: frozenset[int] = frozenset()
    else:
        per_layer = cfg.ffn_weight_bytes_per_layer
        total = per_layer * cfg.num_layers
        capacity = platform.rram.capacity_bytes
        fitting = min(cfg.num_layers, capacity // per_layer)
        if fitting < cfg.num_layers:
            overflow = total - capacity
            if ffn_overflow == "error":
                raise CapacityError(
                    f"{cfg.name}: FFN weights need {total} B but RRAM holds {capacity} B (overflow {overflow} B)",
                    overflow_bytes=overflow,
                )
            LOGGER.warning(
                "%s: FFN weights overflow RRAM by %d B; layers %d..%d run their FFN on DRAM",
                cfg.name,
                overflow,
                fitting,
                cfg.num_layers - 1,
            )
        rram_layers = frozenset(range(fitting))

    prefix = graph.nodes.prefix
    assignment = [
        Chiplet.RRAM if _rram_side(node) and node.layer_index in rram_layers else Chiplet.DRAM for node in prefix
    ]
    template = graph.step_template(1).layer
    step: list[Chiplet] = []
    step_cuts: list[tuple[int, int, int]] = []
    for layer in range(cfg.num_layers):
        layer_chiplets = [
            Chiplet.RRAM if _rram_side(node) and layer in rram_layers else Chiplet.DRAM for node in template
        ]
        base = layer * LAYER_KERNELS
        step_cuts.extend((base + p, base + c, nbytes) for p, c, nbytes in _cut_edges(template, layer_chiplets))
        step.extend(layer_chiplets)
    step.append(Chiplet.DRAM)

    edges = [TransferEdge(*cut) for cut in _cut_edges(prefix, assignment)]
    for index in range(1, graph.output_tokens + 1):
        start = graph.nodes.step_start(index)
        edges.extend(TransferEdge(start + p, start + c, nbytes) for p, c, nbytes in step_cuts)
    _check_dram_weight_capacity(graph, platform, rram_layers)
    return Placement(
        policy=policy,
        assignment=tuple(assignment + step * graph.output_tokens),
        transfer_edges=tuple(edges),
        rram_ffn_layers=tuple(sorted(rram_layers)),
    )


def _dram_weight_regions(graph: OperatorGraph, rram_layers: Iterable[int]) -> list[tuple[str, int]]:
    cfg = graph.model
    rram_layers = set(rram_layers)
    regions: list[tuple[str, int]] = []
    if graph.visual_tokens:
        regions.append(("encoder", cfg.encoder_weight_bytes))
        regions.append(("connector", cfg.connector_weight_bytes))
    regions.append(("embedding", cfg.embedding_bytes))
    for layer in range(cfg.num_layers):
        regions.append((f"layer:{layer}:attn", cfg.attention_weight_bytes_per_layer))
        if layer not in rram_layers:
            regions.append((f"layer:{layer}:ffn", cfg.ffn_weight_bytes_per_layer))
    return regions


def _check_dram_weight_capacity(graph: OperatorGraph, platform: PlatformSpec, rram_layers: Iterable[int]) -> None:
    dram = platform.dram
    needed = sum(size for _, size in _dram_weight_regions(graph, rram_layers))
    available = dram.tiers * dram.tier_capacity_bytes
    if needed > available:
        raise CapacityError(
            f"{graph.model.name}: DRAM-resident weights need {needed} B but the tiers hold {available} B",
            overflow_bytes=needed - available,
        )


def layout_weights(graph: OperatorGraph, platform: PlatformSpec, placement: Placement) -> WeightLayout:
    dram = platform.dram
    used = [0] * dram.tiers
    region_tiers: dict[str, int] = {}
    tier = dram.tiers - 1
    for name, size in _dram_weight_regions(graph, placement.rram_ffn_layers):
        remaining = size
        majority_tier, majority_bytes = tier, -1
        while remaining > 0:
            if tier < 0:
                raise CapacityError(f"{graph.model.name}: weight region {name} does not fit in DRAM", remaining)
            room = dram.tier_capacity_bytes - used[tier]
            if room <= 0:
                tier -= 1
                continue
            chunk = min(room, remaining)
            used[tier] += chunk
            remaining -= chunk
            if chunk > majority_bytes:
                majority_tier, majority_bytes = tier, chunk
        region_tiers[name] = majority_tier
    rram_bytes = graph.model.ffn_weight_bytes_per_layer * len(placement.rram_ffn_layers)
    return WeightLayout(region_tiers=region_tiers, tier_weight_bytes=tuple(used), rram_weight_bytes=rram_bytes)


def _pattern_groups(nodes: Sequence[KernelNode], tile_size: int) -> list[tuple[FusionKind, tuple[int, ...], int, int]]:
    pending: dict[tuple, list[int]] = {}
    for node in nodes:
        if node.kind is KernelKind.NORM:
            pending[("norm", node.id)] = [node.id]
            continue
        kind = _FUSION_LABELS.get(node.label) if node.phase in BACKBONE_PHASES else None
        if kind is not None:
            pending.setdefault((kind, node.phase, node.step, node.layer_index), []).append(node.id)

    consumers: list[list[int]] = [[] for _ in nodes]
    for node in nodes:
        for dep in node.deps:
            consumers[dep].append(node.id)
    specs = []
    for key, members in pending.items():
        kind = FusionKind.FUSED_NORM if key[0] == "norm" else key[0]
        if members != list(range(members[0], members[0] + len(members))):
            raise MappingError(f"{kind.value} members {members} are not contiguous")
        member_set = set(members)
        local = sum(
            nodes[member].bytes_written
            for member in members[:-1]
            if consumers[member] and all(consumer in member_set for consumer in consumers[member])
        )
        tiles = 1
        if kind is FusionKind.FUSED_ATTN_STREAM:
            tiles = math.ceil(nodes[members[0]].operand_shapes[0].rows / tile_size)
        specs.append((kind, tuple(members), local, tiles))
    return specs


def _group(group_id: int, kind: FusionKind, members: tuple[int, ...], placement: Placement, local: int, tiles: int) -> FusionGroup:
    chiplets = {placement.assignment[member] for member in members}
    if len(chiplets) != 1:
        raise MappingError(
            f"Cannot fuse {kind.value} across chiplets: kernels {list(members)} are placed on "
            + ", ".join(sorted(chiplet.value for chiplet in chiplets))
        )
    return FusionGroup(
        id=group_id,
        kind=kind,
        members=members,
        chiplet=chiplets.pop(),
        intermediate_bytes_kept_local=local,
        tile_iterations=tiles,
    )


def fuse(
    graph: OperatorGraph,
    placement: Placement,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> list[FusionGroup]:
    """Group backbone kernels into the four fused near-memory kernels.

    Every Norm becomes its own FusedNorm; QKV, streaming attention and FFN chains of one
    (phase, step, layer) become one group each. Kernels outside any pattern stay alone.
    """
    if tile_size < 1:
        raise ConfigError(f"tile_size must be >= 1, got {tile_size}")
    groups = [
        _group(group_id, kind, members, placement, local, tiles)
        for group_id, (kind, members, local, tiles) in enumerate(_pattern_groups(graph.nodes.prefix, tile_size))
    ]
    for step in range(1, graph.output_tokens + 1):
        specs = _pattern_groups(graph.step_template(step).layer, tile_size)
        start = graph.nodes.step_start(step)
        for layer in range(graph.model.num_layers):
            base = start + layer * LAYER_KERNELS
            for kind, members, local, tiles in specs:
                groups.append(
                    _group(len(groups), kind, tuple(base + member for member in members), placement, local, tiles)
                )
    return groups


def recency_hotness(block: KvBlock) -> float:
    return float(block.token_end - 1)


_HOTNESS = {HotnessPolicy.RECENCY: recency_hotness}


def assign_kv(
    cache_state: Sequence[KvBlock],
    dram: DramChipletSpec,
    hotness_policy: HotnessPolicy | str = HotnessPolicy.RECENCY,
    tier_budget_bytes: Sequence[int] | None = None,
    rram_budget_bytes: int | None = None,
) -> list[KvBlock]:
    """Pack KV blocks hottest-first into Tier-0..Tier-N, overflowing the coldest to RRAM.

    Blocks already on RRAM stay there untouched (write-once). ``rram_budget_bytes=None``
    leaves the RRAM side unbounded.
    """
    score = _HOTNESS[HotnessPolicy(hotness_policy)]
    budgets = list(tier_budget_bytes) if tier_budget_bytes is not None else [dram.tier_capacity_bytes] * dram.tiers
    rescored = [dataclasses.replace(block, hotness=score(block)) for block in cache_state]
    resident = [block for block in rescored if block.on_rram]
    movable = [block for block in rescored if not block.on_rram]
    rram_used = sum(block.bytes for block in resident)
    if rram_budget_bytes is not None:
        total = sum(block.bytes for block in rescored)
        budget = sum(budgets) + rram_budget_bytes
        if total > budget:
            raise CapacityError(f"KV cache of {total} B exceeds the DRAM+RRAM budget of {budget} B", total - budget)

    movable.sort(key=lambda block: (-block.hotness, block.layer_index, block.token_start, block.id))
    used = [0] * len(budgets)
    tier = 0
    placed: list[KvBlock] = list(resident)
    for block in movable:
        while tier < len(budgets) and used[tier] + block.bytes > budgets[tier]:
            tier += 1
        if tier < len(budgets):
            used[tier] += block.bytes
            placed.append(dataclasses.replace(block, residence=dram_tier(tier)))
            continue
        rram_used += block.bytes
        if rram_budget_bytes is not None and rram_used > rram_budget_bytes:
            raise CapacityError(
                f"KV offload needs {rram_used} B on RRAM but only {rram_budget_bytes} B are free",
                rram_used - rram_budget_bytes,
            )
        placed.append(dataclasses.replace(block, residence=RRAM_RESIDENCE, write_count=block.write_count + 1))
    placed.sort(key=lambda block: block.id)
    return placed


@dataclasses.dataclass(frozen=True)
class MigrationCost:
    bytes_moved: int
    joules: float
    ns: float
    blocks_moved: int = 0


def _kv_blocks(plan: MappingPlan | Sequence[KvBlock]) -> Sequence[KvBlock]:
    return plan.kv_assignment if isinstance(plan, MappingPlan) else plan


def migration_cost(
    plan_before: MappingPlan | Sequence[KvBlock],
    plan_after: MappingPlan | Sequence[KvBlock],
    platform: PlatformSpec,
) -> MigrationCost:
    before = {block.id: block for block in _kv_blocks(plan_before)}
    dram, rram, link = platform.dram, platform.rram, platform.link
    moved = blocks = 0
    joules = ns = 0.0
    for block in _kv_blocks(plan_after):
        old = before.get(block.id)
        if old is None or old.residence == block.residence:
            continue
        if old.on_rram:
            raise MappingError(f"KV block {block.id} cannot leave RRAM once offloaded")
        bits = block.bytes * 8
        dram_read_ns = block.bytes / dram.bandwidth_bytes_per_s * 1e9
        if block.on_rram:
            joules += (
                dram_access_energy_j(bits, dram)
                + rram_access_energy_j(bits, AccessKind.WRITE, rram)
                + link_energy_j(bits, link)
            )
            ns += (
                dram_read_ns
                + link.latency_ns
                + block.bytes / link.bandwidth_bytes_per_s * 1e9
                + rram.write_latency_ns
                + block.bytes / rram.peak_bw_bytes_per_s * 1e9
            )
        else:
            joules += 2 * dram_access_energy_j(bits, dram)
            ns += 2 * dram_read_ns
        moved += block.bytes
        blocks += 1
    return MigrationCost(bytes_moved=moved, joules=joules, ns=ns, blocks_moved=blocks)


class KvCache:
    def __init__(
        self,
        num_layers: int,
        kv_bytes_per_token: int,
        dram: DramChipletSpec,
        tier_budgets: Sequence[int],
        rram_budget: int,
        block_tokens: int = DEFAULT_KV_BLOCK_TOKENS,
    ) -> None:
        if block_tokens < 1:
            raise ConfigError(f"kv block size must be >= 1 token, got {block_tokens}")
        self.dram = dram
        self.kv_bytes_per_token = kv_bytes_per_token
        self.block_tokens = block_tokens
        self.tier_budgets = list(tier_budgets)
        self.rram_budget = rram_budget
        self.blocks: dict[int, KvBlock] = {}
        self._open_block: list[int | None] = [None] * num_layers
        self._tokens = [0] * num_layers
        self._reserved = [0] * len(self.tier_budgets)
        self.overcommitted_blocks = 0
        # last slot holds RRAM-resident bytes
        self._profile = [[0] * (len(self.tier_budgets) + 1) for _ in range(num_layers)]

    def slot_of(self, residence: str) -> int:
        tier = tier_of(residence)
        return len(self.tier_budgets) if tier is None else tier

    def _new_block_residence(self) -> str:
        full = self.block_tokens * self.kv_bytes_per_token
        for tier, budget in enumerate(self.tier_budgets):
            if self._reserved[tier] + full <= budget:
                self._reserved[tier] += full
                return dram_tier(tier)
        if not self.overcommitted_blocks:
            LOGGER.warning("No free KV tier for a new block; over-committing the top tier until the next rebalance")
        self.overcommitted_blocks += 1
        self._reserved[-1] += full
        return dram_tier(len(self.tier_budgets) - 1)

    def append(self, layer: int, tokens: int) -> dict[str, int]:
        """Append ``tokens`` to a layer; returns bytes written per residence."""
        written: dict[str, int] = {}
        while tokens > 0:
            block_id = self._open_block[layer]
            block = self.blocks.get(block_id) if block_id is not None else None
            if block is None or block.on_rram or block.token_end - block.token_start >= self.block_tokens:
                start = self._tokens[layer]
                block = KvBlock(
                    id=len(self.blocks),
                    layer_index=layer,
                    token_start=start,
                    token_end=start,
                    bytes=0,
                    hotness=0.0,
                    residence=self._new_block_residence(),
                )
                self._open_block[layer] = block.id
            room = self.block_tokens - (block.token_end - block.token_start)
            take = min(room, tokens)
            added = take * self.kv_bytes_per_token
            end = block.token_end + take
            block = KvBlock(
                block.id, layer, block.token_start, end, block.bytes + added, float(end - 1), block.residence, block.write_count
            )
            self.blocks[block.id] = block
            self._profile[layer][self.slot_of(block.residence)] += added
            written[block.residence] = written.get(block.residence, 0) + added
            self._tokens[layer] += take
            tokens -= take
        return written

    def read_profile(self, layer: int) -> list[int]:
        """Bytes of the layer's cache per DRAM tier, RRAM last."""
        return list(self._profile[layer])

    def snapshot(self) -> list[KvBlock]:
        return [self.blocks[block_id] for block_id in sorted(self.blocks)]

    def rebalance(self, hotness_policy: HotnessPolicy | str = HotnessPolicy.RECENCY) -> tuple[list[KvBlock], list[KvBlock]]:
        before = self.snapshot()
        after = assign_kv(before, self.dram, hotness_policy, self.tier_budgets, self.rram_budget)
        self.blocks = {block.id: block for block in after}
        for row in self._profile:
            row[:] = [0] * len(row)
        self._reserved = [0] * len(self.tier_budgets)
        full = self.block_tokens * self.kv_bytes_per_token
        for block in after:
            slot = self.slot_of(block.residence)
            self._profile[block.layer_index][slot] += block.bytes
            if slot < len(self.tier_budgets):
                self._reserved[slot] += full if block.id in self._open_block else block.bytes
        return before, after


def projected_kv_blocks(graph: OperatorGraph, block_tokens: int) -> list[KvBlock]:
    cfg = graph.model
    total = graph.prefill_len + graph.output_tokens
    blocks = []
    for layer in range(cfg.num_layers):
        for start in range(0, total, block_tokens):
            end = min(total, start + block_tokens)
            blocks.append(
                KvBlock(
                    id=len(blocks),
                    layer_index=layer,
                    token_start=start,
                    token_end=end,
                    bytes=(end - start) * cfg.kv_bytes_per_token_per_layer,
                    hotness=float(end - 1),
                    residence=dram_tier(0),
                )
            )
    return blocks


def kv_tier_budgets(platform: PlatformSpec, layout: WeightLayout) -> list[int]:
    return [max(0, platform.dram.tier_capacity_bytes - used) for used in layout.tier_weight_bytes]


def build_plan(
    graph: OperatorGraph,
    platform: PlatformSpec,
    policy: MappingPolicy | str | None = None,
    ffn_overflow: str = "error",
    kv_block_tokens: int = DEFAULT_KV_BLOCK_TOKENS,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> MappingPlan:
    policy = parse_policy(policy if policy is not None else platform.default_policy)
    placement = place(graph, platform, policy, ffn_overflow=ffn_overflow)
    groups = fuse(graph, placement, tile_size=tile_size)
    layout = layout_weights(graph, platform, placement)
    rram_budget = platform.rram.capacity_bytes - layout.rram_weight_bytes
    kv = assign_kv(
        projected_kv_blocks(graph, kv_block_tokens),
        platform.dram,
        HotnessPolicy.RECENCY,
        kv_tier_budgets(platform, layout),
        rram_budget,
    )
    first_step = range(graph.nodes.step_start(1), graph.nodes.step_start(1) + graph.step_size)
    per_step = sum(edge.bytes for edge in placement.transfer_edges if edge.consumer_id in first_step)
    LOGGER.info(
        "Mapped %s with %s: %d fusion groups, %d transfer edges, %d B link traffic per decode step",
        graph.model.name,
        policy.value,
        len(groups),
        len(placement.transfer_edges),
        per_step,
    )
    return MappingPlan(
        model_name=graph.model.name,
        placement=placement,
        fusion_groups=tuple(groups),
        kv_assignment=tuple(kv),
        weight_layout=layout,
        expected_link_bytes_per_step=per_step,
        kv_block_tokens=kv_block_tokens,
        tile_size=tile_size,
    )


def _runs(assignment: Sequence[Chiplet]) -> list[list]:
    runs: list[list] = []
    for index, chiplet in enumerate(assignment):
        if runs and runs[-1][2] == chiplet.value and runs[-1][1] == index:
            runs[-1][1] = index + 1
        else:
            runs.append([index, index + 1, chiplet.value])
    return runs


def plan_to_dict(plan: MappingPlan) -> dict:
    return {
        "model_name": plan.model_name,
        "policy": plan.policy.value,
        "kv_block_tokens": plan.kv_block_tokens,
        "tile_size": plan.tile_size,
        "expected_link_bytes_per_step": plan.expected_link_bytes_per_step,
        "placement": {
            "runs": _runs(plan.placement.assignment),
            "rram_ffn_layers": list(plan.placement.rram_ffn_layers),
            "transfer_edges": [dataclasses.astuple(edge) for edge in plan.placement.transfer_edges],
        },
        "fusion_groups": [
            {
                "id": group.id,
                "kind": group.kind.value,
                "members": list(group.members),
                "chiplet": group.chiplet.value,
                "intermediate_bytes_kept_local": group.intermediate_bytes_kept_local,
                "tile_iterations": group.tile_iterations,
            }
            for group in plan.fusion_groups
        ],
        "kv_assignment": [dataclasses.asdict(block) for block in plan.kv_assignment],
        "weight_layout": {
            "region_tiers": dict(plan.weight_layout.region_tiers),
            "tier_weight_bytes": list(plan.weight_layout.tier_weight_bytes),
            "rram_weight_bytes": plan.weight_layout.rram_weight_bytes,
        },
    }


def plan_from_dict(data: Mapping) -> MappingPlan:
    try:
        assignment: list[Chiplet] = []
        for start, end, chiplet in data["placement"]["runs"]:
            if start != len(assignment):
                raise ConfigError(f"plan: placement runs are not contiguous at kernel {start}")
            assignment.extend([Chiplet(chiplet)] * (end - start))
        placement = Placement(
            policy=MappingPolicy(data["policy"]),
            assignment=tuple(assignment),
            transfer_edges=tuple(TransferEdge(*edge) for edge in data["placement"]["transfer_edges"]),
            rram_ffn_layers=tuple(data["placement"]["rram_ffn_layers"]),
        )
        groups = tuple(
            FusionGroup(
                id=item["id"],
                kind=FusionKind(item["kind"]),
                members=tuple(item["members"]),
                chiplet=Chiplet(item["chiplet"]),
                intermediate_bytes_kept_local=item["intermediate_bytes_kept_local"],
                tile_iterations=item["tile_iterations"],
            )
            for item in data["fusion_groups"]
        )
        layout = data["weight_layout"]
        return MappingPlan(
            model_name=data["model_name"],
            placement=placement,
            fusion_groups=groups,
            kv_assignment=tuple(KvBlock(**block) for block in data["kv_assignment"]),
            weight_layout=WeightLayout(
                region_tiers=dict(layout["region_tiers"]),
                tier_weight_bytes=tuple(layout["tier_weight_bytes"]),
                rram_weight_bytes=layout["rram_weight_bytes"],
            ),
            expected_link_bytes_per_step=data["expected_link_bytes_per_step"],
            kv_block_tokens=data["kv_block_tokens"],
            tile_size=data["tile_size"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"plan: malformed plan file ({exc!r})") from exc


def dump_plan(path: str | Path, plan: MappingPlan) -> None:
    write_json(path, plan_to_dict(plan))


def load_plan(path: str | Path) -> MappingPlan:
    return plan_from_dict(read_json(path))
