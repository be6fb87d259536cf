from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest


PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from chime_sim.hardware import PlatformSpec  # noqa: E402
from chime_sim.workload import ModelConfig, model_config_from_dict  # noqa: E402

TOY_MODEL = {
    "name": "toy",
    "hidden_dim": 64,
    "num_layers": 2,
    "num_heads": 4,
    "head_dim": 16,
    "ffn_dim": 128,
    "vocab_size": 100,
    "encoder_kind": "ViT",
    "encoder_dim": 32,
    "encoder_layers": 1,
    "encoder_patch_size": 16,
    "encoder_tokens_out": 4,
    "connector_kind": "MLP",
    "connector_dims": [32, 64, 64],
}


@pytest.fixture
def toy_model() -> ModelConfig:
    return model_config_from_dict(TOY_MODEL)


@pytest.fixture
def platform() -> PlatformSpec:
    return PlatformSpec()


@pytest.fixture
def toy_model_file(tmp_path: Path) -> Path:
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TOY_MODEL), encoding="utf-8")
    return path
