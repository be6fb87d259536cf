"""End-to-end checks of the shipped presets against the calibration bands."""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest

from chime_sim.engine import Scenario, SimReport, SweepAxis, prepare, run, sweep
from chime_sim.experiment import DEFAULT_SEQ_LENGTHS, dram_only_variant, load_experiment, shipped_experiments, simulate_many
from chime_sim.hardware import DramChipletSpec, PlatformSpec
from chime_sim.mapper import HotnessPolicy, KvCache, MappingPolicy, tier_of
from chime_sim.workload import Phase, backbone_fraction, build_graph, model_config_from_dict, phase_fractions

SMALLEST = "fastvlm-0.6b"
LARGEST = "mobilevlm-3b"
FAMILIES = (("fastvlm-0.6b", "fastvlm-1.7b"), ("mobilevlm-1.7b", "mobilevlm-3b"))


@pytest.fixture(scope="module")
def shipped() -> dict[str, Scenario]:
    scenarios = [load_experiment(path).to_scenario() for path in shipped_experiments()]
    return {scenario.model.name: scenario for scenario in scenarios}


@pytest.fixture(scope="module")
def reports(shipped: dict[str, Scenario]) -> dict[str, tuple[SimReport, SimReport]]:
    """(heterogeneous, DRAM-only) report per shipped model."""
    het = [dataclasses.replace(scenario, policy=MappingPolicy.HETEROGENEOUS) for scenario in shipped.values()]
    points = simulate_many(het + [dram_only_variant(scenario) for scenario in shipped.values()])
    assert all(point.ok for point in points), [point.error for point in points if not point.ok]
    half = len(het)
    return {
        name: (het_point.report, dram_point.report)
        for name, het_point, dram_point in zip(shipped, points[:half], points[half:])
    }


def test_throughput_lands_in_the_calibration_band(reports: dict[str, tuple[SimReport, SimReport]]) -> None:
    throughput = {name: het.throughput_token_per_s for name, (het, _) in reports.items()}

    assert 533 / 2 <= throughput[SMALLEST] <= 533 * 2
    assert 233 / 2 <= throughput[LARGEST] <= 233 * 2
    assert all(233 / 2 <= value <= 533 * 2 for value in throughput.values())
    assert max(throughput, key=throughput.get) == SMALLEST
    assert min(throughput, key=throughput.get) == LARGEST


def test_largest_model_keeps_every_ffn_layer_on_rram(
    shipped: dict[str, Scenario], reports: dict[str, tuple[SimReport, SimReport]]
) -> None:
    assert shipped[LARGEST].ffn_overflow == "error"
    for name, (het, _) in reports.items():
        assert "ffn-spilled-to-dram" not in het.notes, name
        model = shipped[name].model
        assert het.ffn_weight_preload_bytes == model.num_layers * model.ffn_weight_bytes_per_layer


def test_efficiency_identity_and_power(reports: dict[str, tuple[SimReport, SimReport]]) -> None:
    for name, (het, dram) in reports.items():
        for report in (het, dram):
            assert report.token_per_j * report.avg_power_w == pytest.approx(report.throughput_token_per_s, rel=1e-9)
        assert 1.0 <= het.avg_power_w <= 4.0, name
        assert 116.5 / 2 <= het.token_per_j <= 266.5 * 2, name


def test_heterogeneity_ablation(reports: dict[str, tuple[SimReport, SimReport]]) -> None:
    speedup = {name: het.throughput_token_per_s / dram.throughput_token_per_s for name, (het, dram) in reports.items()}

    assert 1.5 <= speedup[LARGEST] <= 3.5
    for smaller, larger in FAMILIES:
        assert speedup[larger] > speedup[smaller]
    for name, (het, dram) in reports.items():
        assert het.token_per_j / dram.token_per_j >= 1.0, name
        assert dram.link_bytes_total == 0


def test_backbone_dominates_execution_time(shipped: dict[str, Scenario], reports: dict[str, tuple[SimReport, SimReport]]) -> None:
    scenario = shipped[SMALLEST]
    graph = build_graph(scenario.model, scenario.prompt_tokens, scenario.image, scenario.output_tokens)

    fractions = phase_fractions(graph, reports[SMALLEST][0])

    assert set(fractions) == {Phase.ENCODE, Phase.CONNECT, Phase.PREFILL, Phase.DECODE_STEP}
    assert 0.80 <= backbone_fraction(fractions) <= 0.98


def test_sequence_length_sweep_is_near_linear_and_fast(shipped: dict[str, Scenario]) -> None:
    began = time.perf_counter()
    points = sweep(shipped[SMALLEST], SweepAxis.SEQ_LEN, list(DEFAULT_SEQ_LENGTHS))
    elapsed = time.perf_counter() - began

    assert all(point.ok for point in points)
    lengths = np.array([point.value for point in points], dtype=float)
    latency = np.array([point.report.total_latency_ns for point in points])
    energy = np.array([point.report.energy_per_inference_j for point in points])
    assert np.all(np.diff(latency) > 0)
    assert np.all(np.diff(energy) > 0)
    slope, intercept = np.polyfit(lengths, latency, 1)
    residual = latency - (slope * lengths + intercept)
    r_squared = 1 - np.sum(residual**2) / np.sum((latency - latency.mean()) ** 2)
    assert r_squared >= 0.98
    assert latency[-1] / latency[0] >= 8
    assert elapsed < 60


def test_link_bytes_follow_the_two_cut_points() -> None:
    rng = np.random.default_rng(7)
    for _ in range(12):
        heads = int(rng.integers(1, 5))
        head_dim = int(rng.choice([8, 16, 32]))
        hidden = heads * head_dim
        model = model_config_from_dict(
            {
                "name": "random",
                "hidden_dim": hidden,
                "num_layers": int(rng.integers(1, 5)),
                "num_heads": heads,
                "head_dim": head_dim,
                "ffn_dim": int(rng.integers(1, 5)) * hidden,
                "vocab_size": int(rng.integers(16, 200)),
                "encoder_kind": "ViT",
                "encoder_dim": 32,
                "encoder_layers": 1,
                "encoder_patch_size": 16,
                "encoder_tokens_out": 4,
                "connector_kind": "MLP",
                "connector_dims": [32, hidden, hidden],
            }
        )
        output_tokens = int(rng.integers(1, 6))
        scenario = Scenario(
            model=model,
            platform=PlatformSpec(),
            policy=MappingPolicy.HETEROGENEOUS,
            prompt_tokens=int(rng.integers(1, 9)),
            image=None,
            output_tokens=output_tokens,
        )
        graph, plan = prepare(scenario)

        report = run(graph, plan, scenario.platform, scenario.options)

        cut = model.hidden_dim * model.element_size
        assert report.kv_offload_link_bytes == 0
        assert plan.expected_link_bytes_per_step == model.num_layers * 2 * cut
        decode_link = report.link_bytes_total - model.num_layers * 2 * scenario.prompt_tokens * cut
        assert decode_link == output_tokens * plan.expected_link_bytes_per_step


def test_kv_tiering_keeps_order_and_write_once_over_long_contexts() -> None:
    num_layers, per_token, block_tokens = 2, 64, 64
    cache = KvCache(
        num_layers=num_layers,
        kv_bytes_per_token=per_token,
        dram=DramChipletSpec(),
        tier_budgets=[8 * block_tokens * per_token] * 5,
        rram_budget=10**9,
        block_tokens=block_tokens,
    )
    cache.append(0, 128)
    cache.append(1, 128)
    for step in range(1, 4097):
        for layer in range(num_layers):
            cache.append(layer, 1)
        if step % 64:
            continue
        _, after = cache.rebalance(HotnessPolicy.RECENCY)
        assert all(block.write_count <= 1 for block in after if block.on_rram)
        ranked = sorted(after, key=lambda block: (5 if tier_of(block.residence) is None else tier_of(block.residence)))
        for hotter, colder in zip(ranked, ranked[1:]):
            if tier_of(hotter.residence) != tier_of(colder.residence):
                assert hotter.hotness >= colder.hotness
    assert any(block.on_rram for block in cache.snapshot())
    assert sum(cache.read_profile(0)) == (128 + 4096) * per_token


def test_concurrent_sweep_matches_serial_runs(shipped: dict[str, Scenario]) -> None:
    base = dataclasses.replace(shipped[SMALLEST], output_tokens=16)

    parallel = sweep(base, SweepAxis.POLICY, ["het", "dram-only"], max_workers=2)
    serial = sweep(base, SweepAxis.POLICY, ["het", "dram-only"], max_workers=1)

    assert [point.report.to_dict() for point in parallel] == [point.report.to_dict() for point in serial]
