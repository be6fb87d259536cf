"""Numeric reference versions of the four fused near-memory kernels.

These are oracles for checking that fusion preserves values; they are not tuned for speed.
All math is float64 unless ``precision="fp16"`` asks for half-precision rounding of the
intermediates.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, MissingFileError, NumericalError

NORM_EPS = 1e-5
PRECISIONS = ("fp64", "fp16")


def _matrix(name: str, value: np.ndarray | Sequence) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ConfigError(f"{name} must be a matrix, got {array.ndim} dimensions")
    return array


def _vector(name: str, value: np.ndarray | Sequence, width: int) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64).reshape(-1)
    if array.shape[0] != width:
        raise ConfigError(f"{name} has {array.shape[0]} entries, expected {width}")
    return array


def _round(array: np.ndarray, precision: str) -> np.ndarray:
    if precision == "fp16":
        return array.astype(np.float16).astype(np.float64)
    return array


def _check_precision(precision: str) -> None:
    if precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {', '.join(PRECISIONS)}, got '{precision}'")


def _conformable(label: str, left: np.ndarray, right: np.ndarray) -> None:
    if left.shape[1] != right.shape[0]:
        raise ConfigError(f"{label}: cannot multiply {left.shape} by {right.shape}")


def fused_qkv_proj(
    x: np.ndarray,
    w_q: np.ndarray,
    b_q: np.ndarray,
    w_k: np.ndarray,
    b_k: np.ndarray,
    w_v: np.ndarray,
    b_v: np.ndarray,
    precision: str = "fp64",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_precision(precision)
    x = _matrix("X", x)
    outputs = []
    for name, weight, bias in (("Q", w_q, b_q), ("K", w_k, b_k), ("V", w_v, b_v)):
        weight = _matrix(f"W_{name}", weight)
        _conformable(f"{name} projection", x, weight)
        bias = _vector(f"b_{name}", bias, weight.shape[1])
        outputs.append(_round(x @ weight + bias, precision))
    q, k, v = outputs
    return q, k.T.copy(), v


@dataclasses.dataclass
class SoftmaxState:
    """Running row max, row sum and unnormalized output of an online softmax."""

    running_max: np.ndarray
    running_sum: np.ndarray
    accumulator: np.ndarray

    @classmethod
    def empty(cls, rows: int, cols: int) -> "SoftmaxState":
        return cls(
            running_max=np.full(rows, -np.inf),
            running_sum=np.zeros(rows),
            accumulator=np.zeros((rows, cols)),
        )

    def update(self, scores: np.ndarray, values: np.ndarray) -> None:
        tile_max = scores.max(axis=1)
        new_max = np.maximum(self.running_max, tile_max)
        correction = np.exp(self.running_max - new_max)
        weights = np.exp(scores - new_max[:, None])
        self.running_sum = self.running_sum * correction + weights.sum(axis=1)
        self.accumulator = self.accumulator * correction[:, None] + weights @ values
        self.running_max = new_max

    def finish(self) -> np.ndarray:
        return self.accumulator / self.running_sum[:, None]


def _attention_inputs(q, k_t, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q, k_t, v = _matrix("Q", q), _matrix("K^T", k_t), _matrix("V", v)
    _conformable("Q x K^T", q, k_t)
    if k_t.shape[1] != v.shape[0]:
        raise ConfigError(f"K^T has {k_t.shape[1]} context columns but V has {v.shape[0]} rows")
    if v.shape[0] < 1:
        raise ConfigError("attention context must hold at least one token")
    return q, k_t, v


def _finite(label: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{label} produced a non-finite value")
    return array


def fused_attn_stream(
    q: np.ndarray,
    k_t: np.ndarray,
    v: np.ndarray,
    scale: float | None = None,
    tile_size: int = 512,
    tile_order: Sequence[int] | None = None,
    precision: str = "fp64",
) -> np.ndarray:
    """softmax(scale * Q K^T) V, one (K^T, V) tile at a time with online rescaling.

    ``tile_order`` permutes the tile visiting order; the full score matrix is never built.
    """
    _check_precision(precision)
    if tile_size < 1:
        raise ConfigError(f"tile_size must be >= 1, got {tile_size}")
    q, k_t, v = _attention_inputs(q, k_t, v)
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    ctx = v.shape[0]
    starts = list(range(0, ctx, tile_size))
    if tile_order is not None:
        if sorted(tile_order) != list(range(len(starts))):
            raise ConfigError(f"tile_order must permute 0..{len(starts) - 1}")
        starts = [starts[index] for index in tile_order]

    state = SoftmaxState.empty(q.shape[0], v.shape[1])
    for start in starts:
        stop = min(ctx, start + tile_size)
        scores = _finite("attention score tile", _round(scale * (q @ k_t[:, start:stop]), precision))
        state.update(scores, v[start:stop])
        _finite("online softmax state", state.accumulator)
    return _finite("attention output", _round(state.finish(), precision))


def dense_attention(q: np.ndarray, k_t: np.ndarray, v: np.ndarray, scale: float | None = None) -> np.ndarray:
    q, k_t, v = _attention_inputs(q, k_t, v)
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    scores = scale * (q @ k_t)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "gelu": _gelu,
    "silu": _silu,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


def fused_ffn_act(
    x: np.ndarray,
    w_1: np.ndarray,
    b_1: np.ndarray,
    w_2: np.ndarray,
    b_2: np.ndarray,
    act: str = "gelu",
    precision: str = "fp64",
) -> np.ndarray:
    _check_precision(precision)
    if act not in ACTIVATIONS:
        raise ConfigError(f"Unknown activation '{act}'")
    x, w_1, w_2 = _matrix("X", x), _matrix("W_1", w_1), _matrix("W_2", w_2)
    _conformable("FFN up", x, w_1)
    if w_1.shape[1] != w_2.shape[0]:
        raise ConfigError(f"FFN down: hidden width {w_1.shape[1]} does not match W_2 rows {w_2.shape[0]}")
    hidden = _round(ACTIVATIONS[act](x @ w_1 + _vector("b_1", b_1, w_1.shape[1])), precision)
    return _round(hidden @ w_2 + _vector("b_2", b_2, w_2.shape[1]), precision)


def fused_norm(
    x: np.ndarray,
    g: np.ndarray,
    b: np.ndarray,
    eps: float = NORM_EPS,
    kind: str = "layernorm",
    precision: str = "fp64",
) -> np.ndarray:
    _check_precision(precision)
    x = _matrix("X", x)
    if x.shape[1] < 2:
        raise ConfigError(f"Norm needs rows of at least 2 elements, got {x.shape[1]}")
    g = _vector("g", g, x.shape[1])
    b = _vector("b", b, x.shape[1])
    if kind == "layernorm":
        centered = x - x.mean(axis=1, keepdims=True)
        normalized = centered / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    elif kind == "rmsnorm":
        normalized = x / np.sqrt((x**2).mean(axis=1, keepdims=True) + eps)
    else:
        raise ConfigError(f"Unknown norm kind '{kind}'")
    return _round(normalized * g + b, precision)


def qkv_intermediate_bytes(rows: int, hidden: int, element_size: int = 2) -> int:
    return rows * 3 * hidden * element_size


def attention_intermediate_bytes(rows: int, ctx: int, hidden: int, heads: int, element_size: int = 2) -> int:
    """Gathered K/V plus the score and probability tiles streamed through SRAM."""
    return (2 * heads * rows * ctx + 2 * ctx * hidden) * element_size


def ffn_intermediate_bytes(rows: int, hidden: int, ffn: int, element_size: int = 2) -> int:
    return (2 * rows * ffn + rows * hidden) * element_size


def load_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"No such file: {path}")
    rows = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(token) for token in line.split()])
        except ValueError as exc:
            raise ConfigError(f"{path}:{number}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{path}: no matrix rows")
    if len({len(row) for row in rows}) != 1:
        raise ConfigError(f"{path}: rows have different lengths")
    return _finite(str(path), np.array(rows, dtype=np.float64))
