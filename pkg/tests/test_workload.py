from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from types import SimpleNamespace

import pytest

from chime_sim.errors import ConfigError, MissingFileError, SimulationError
from chime_sim.workload import (
    KernelKind,
    ModelConfig,
    Phase,
    backbone_fraction,
    build_graph,
    flops_of_gemm,
    load_model_config,
    phase_fractions,
    resolve_model,
    shipped_models,
)


def _labelled(graph, label, phase=None, step=None, layer=None):
    return [
        node
        for node in graph.nodes
        if node.label == label
        and (phase is None or node.phase is phase)
        and (step is None or node.step == step)
        and (layer is None or node.layer_index == layer)
    ]


def test_flops_of_gemm() -> None:
    assert flops_of_gemm(2, 3, 4) == 48
    assert flops_of_gemm(1, 1, 1) == 2
    with pytest.raises(ValueError):
        flops_of_gemm(0, 3, 4)


def test_text_only_graph_has_backbone_phases_only(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=2)

    assert graph.phases == (Phase.PREFILL, Phase.DECODE_STEP)
    assert graph.visual_tokens == 0
    assert graph.prefill_len == 4
    assert len(graph.nodes) == 16 * toy_model.num_layers * 3 + 3
    assert graph.entry_ids == (0,)
    assert len(graph.exit_ids) == 1
    assert len(graph.topological_order()) == len(graph.nodes)


def test_image_adds_encoder_and_connector(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=(64, 64), output_tokens=1)

    assert graph.phases == (Phase.ENCODE, Phase.CONNECT, Phase.PREFILL, Phase.DECODE_STEP)
    assert graph.visual_tokens == toy_model.encoder_tokens_out
    assert graph.prefill_len == 8
    assert len(_labelled(graph, "enc_downsample")) == 1
    assert [node.label for node in graph.nodes if node.phase is Phase.CONNECT] == ["conn_mlp_0", "conn_act_0", "conn_mlp_1"]
    assert len(graph.nodes) == 11 + 3 + 16 * toy_model.num_layers * 2 + 2


def test_decode_context_grows_by_one_token_per_step(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=3)

    for step in (1, 2, 3):
        (read,) = _labelled(graph, "kv_read", Phase.DECODE_STEP, step, 0)
        assert read.operand_shapes[0].rows == 4 + step
        assert read.kv_bytes == (4 + step) * toy_model.kv_bytes_per_token_per_layer


def test_kernel_flops_and_bytes(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=1)

    (qkv,) = _labelled(graph, "qkv_proj", Phase.PREFILL, layer=0)
    assert qkv.kind is KernelKind.GEMM
    assert qkv.flops == 2 * 4 * 192 * 64
    assert qkv.weight_bytes == 64 * 192 * 2
    assert qkv.bytes_written == 4 * 192 * 2

    (score,) = _labelled(graph, "attn_score", Phase.DECODE_STEP, 1, 0)
    assert score.flops == 4 * 2 * 1 * 5 * 16

    (attn_out,) = _labelled(graph, "attn_out", Phase.DECODE_STEP, 1, 0)
    assert attn_out.kind is KernelKind.TRANSFER
    assert attn_out.flops == 0
    assert attn_out.bytes_written == 64 * 2


def test_step_chains_to_previous_step(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=2)

    (first_norm,) = _labelled(graph, "attn_norm", Phase.DECODE_STEP, 2, 0)
    (head,) = _labelled(graph, "lm_head", Phase.DECODE_STEP, 1)
    (last_out,) = _labelled(graph, "ffn_out", Phase.DECODE_STEP, 1, toy_model.num_layers - 1)
    assert head.deps == (last_out.id,)
    assert first_norm.deps == (head.id,)


def test_build_graph_rejects_bad_workload(toy_model: ModelConfig) -> None:
    with pytest.raises(ConfigError):
        build_graph(toy_model, prompt_tokens=0, visual_input=None, output_tokens=1)
    with pytest.raises(ConfigError):
        build_graph(toy_model, prompt_tokens=4, visual_input=(0, 64), output_tokens=1)
    with pytest.raises(ConfigError, match="prompt_tokens"):
        build_graph(toy_model, prompt_tokens="4", visual_input=None, output_tokens=1)
    with pytest.raises(ConfigError, match="output_tokens"):
        build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=True)


def test_model_config_validation(toy_model: ModelConfig) -> None:
    with pytest.raises(ConfigError, match="num_heads"):
        dataclasses.replace(toy_model, head_dim=8)
    with pytest.raises(ConfigError, match="connector_dims"):
        dataclasses.replace(toy_model, connector_dims=(32, 48))
    with pytest.raises(ConfigError, match="kv_bytes_per_token_per_layer"):
        dataclasses.replace(toy_model, kv_bytes_per_token_per_layer=1)
    with pytest.raises(ConfigError, match="activation"):
        dataclasses.replace(toy_model, activation="tanh")


def test_unknown_key_is_rejected(tmp_path: Path) -> None:
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"name": "x", "bogus": 1}), encoding="utf-8")

    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        load_model_config(path)


def test_missing_model_file(tmp_path: Path) -> None:
    with pytest.raises(MissingFileError):
        resolve_model(tmp_path / "absent.json")


def test_shipped_models_load() -> None:
    assert shipped_models() == ["fastvlm-0.6b", "fastvlm-1.7b", "mobilevlm-1.7b", "mobilevlm-3b"]
    small = resolve_model("fastvlm-0.6b")
    assert small.kv_bytes_per_token_per_layer == 2 * 896 * 2
    large = resolve_model("mobilevlm-3b")
    assert large.ffn_weight_bytes_per_layer * large.num_layers > small.ffn_weight_bytes_per_layer * small.num_layers


def test_phase_fractions_sum_to_one(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=(64, 64), output_tokens=1)
    report = SimpleNamespace(phase_latency_ns={"Encode": 10.0, "Connect": 2.0, "Prefill": 30.0, "DecodeStep": 58.0})

    fractions = phase_fractions(graph, report)

    assert sum(fractions.values()) == pytest.approx(1.0)
    assert backbone_fraction(fractions) == pytest.approx(0.88)


def test_phase_fractions_need_latency(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=1)

    with pytest.raises(SimulationError):
        phase_fractions(graph, SimpleNamespace(phase_latency_ns={}))


def test_lm_head_closes_prefill_and_every_decode_step(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=3)

    heads = _labelled(graph, "lm_head")
    assert [(node.phase, node.step) for node in heads] == [
        (Phase.PREFILL, 0),
        (Phase.DECODE_STEP, 1),
        (Phase.DECODE_STEP, 2),
        (Phase.DECODE_STEP, 3),
    ]
    head = heads[1]
    assert head.id == graph.nodes.step_start(2) - 1
    assert head.layer_index == toy_model.num_layers - 1
    assert head.weight_bytes == 64 * 100 * 2
    assert head.flops == 2 * 1 * 100 * 64
    assert [node.label for node in graph.decode_nodes(3)][-1] == "lm_head"


def test_node_table_indexing_matches_iteration(toy_model: ModelConfig) -> None:
    graph = build_graph(toy_model, prompt_tokens=4, visual_input=(64, 64), output_tokens=6)
    nodes = graph.nodes

    listed = list(nodes)
    assert len(listed) == len(nodes)
    assert [node.id for node in listed] == list(range(len(nodes)))
    for index in (0, nodes.decode_base, nodes.decode_base + 17, len(nodes) - 1):
        assert nodes[index] == listed[index]
    assert nodes[-1] == listed[-1]
    assert nodes[nodes.decode_base : nodes.decode_base + 3] == listed[nodes.decode_base : nodes.decode_base + 3]
    assert all(dep < node.id for node in listed for dep in node.deps)
    with pytest.raises(IndexError):
        nodes[len(nodes)]
    with pytest.raises(IndexError):
        nodes.step_start(7)


def test_graphs_with_equal_inputs_compare_equal(toy_model: ModelConfig) -> None:
    first = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=2)
    second = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=2)
    longer = build_graph(toy_model, prompt_tokens=4, visual_input=None, output_tokens=3)

    assert first.nodes == second.nodes
    assert hash(first.nodes) == hash(second.nodes)
    assert first.nodes != longer.nodes
