"""Operator graphs of multimodal LLM inference: vision encoder, connector, backbone."""

from __future__ import annotations

from collections import deque
import dataclasses
import enum
import functools
import logging
import math
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Sequence

from .errors import ConfigError, SimulationError
from .jsonio import check_keys, read_json

if TYPE_CHECKING:
    from .engine import SimReport

LOGGER = logging.getLogger(__name__)

MODELS_DIR = Path(__file__).resolve().parent / "configs" / "models"
FP16_BYTES = 2
LAYER_KERNELS = 16
TEMPLATE_CACHE_STEPS = 4


class EncoderKind(str, enum.Enum):
    VIT = "ViT"
    PVT = "PVT"
    FASTVITHD = "FastViTHD"


class ConnectorKind(str, enum.Enum):
    MLP = "MLP"
    CROSS_ATTENTION = "CrossAttention"


class KernelKind(str, enum.Enum):
    GEMM = "GEMM"
    SOFTMAX = "Softmax"
    ELEMENTWISE = "Elementwise"
    NORM = "Norm"
    ACTIVATION = "Activation"
    KV_APPEND = "KVAppend"
    KV_READ = "KVRead"
    TRANSFER = "Transfer"


SFPE_KINDS = frozenset({KernelKind.SOFTMAX, KernelKind.ELEMENTWISE, KernelKind.NORM, KernelKind.ACTIVATION})


class Phase(str, enum.Enum):
    ENCODE = "Encode"
    CONNECT = "Connect"
    PREFILL = "Prefill"
    DECODE_STEP = "DecodeStep"


BACKBONE_PHASES = (Phase.PREFILL, Phase.DECODE_STEP)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    name: str
    hidden_dim: int
    num_layers: int
    num_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    encoder_kind: EncoderKind
    encoder_tokens_out: int
    connector_kind: ConnectorKind
    connector_dims: tuple[int, ...]
    element_size: int = FP16_BYTES
    kv_bytes_per_token_per_layer: int | None = None
    encoder_dim: int = 768
    encoder_layers: int = 12
    encoder_patch_size: int = 16
    encoder_image_size: int | None = None
    activation: str = "gelu"
    norm_kind: str = "layernorm"
    calibration_source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_kind", _enum_value(EncoderKind, self.encoder_kind, self.name))
        object.__setattr__(self, "connector_kind", _enum_value(ConnectorKind, self.connector_kind, self.name))
        object.__setattr__(self, "connector_dims", tuple(self.connector_dims))
        for field_name in (
            "hidden_dim",
            "num_layers",
            "num_heads",
            "head_dim",
            "ffn_dim",
            "vocab_size",
            "encoder_tokens_out",
            "element_size",
            "encoder_dim",
            "encoder_layers",
            "encoder_patch_size",
        ):
            value = getattr(self, field_name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{self.name}: {field_name} must be a positive integer, got {value!r}")
        if self.encoder_image_size is not None and self.encoder_image_size <= 0:
            raise ConfigError(f"{self.name}: encoder_image_size must be positive")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"{self.name}: hidden_dim {self.hidden_dim} != num_heads {self.num_heads} x head_dim {self.head_dim}"
            )
        if len(self.connector_dims) < 2 or any(dim <= 0 for dim in self.connector_dims):
            raise ConfigError(f"{self.name}: connector_dims needs at least two positive widths")
        if self.connector_dims[0] != self.encoder_dim:
            raise ConfigError(
                f"{self.name}: connector_dims starts at {self.connector_dims[0]}, encoder_dim is {self.encoder_dim}"
            )
        if self.connector_dims[-1] != self.hidden_dim:
            raise ConfigError(
                f"{self.name}: connector_dims ends at {self.connector_dims[-1]}, incompatible with hidden_dim {self.hidden_dim}"
            )
        if self.activation not in ("gelu", "silu", "relu"):
            raise ConfigError(f"{self.name}: unknown activation '{self.activation}'")
        if self.norm_kind not in ("layernorm", "rmsnorm"):
            raise ConfigError(f"{self.name}: unknown norm_kind '{self.norm_kind}'")
        derived = 2 * self.hidden_dim * self.element_size
        if self.kv_bytes_per_token_per_layer is None:
            object.__setattr__(self, "kv_bytes_per_token_per_layer", derived)
        elif self.kv_bytes_per_token_per_layer != derived:
            raise ConfigError(
                f"{self.name}: kv_bytes_per_token_per_layer {self.kv_bytes_per_token_per_layer} != 2 x hidden_dim x element_size ({derived})"
            )

    @property
    def ffn_weight_bytes_per_layer(self) -> int:
        return (2 * self.hidden_dim * self.ffn_dim + self.ffn_dim + self.hidden_dim) * self.element_size

    @property
    def attention_weight_bytes_per_layer(self) -> int:
        h = self.hidden_dim
        # qkv + bias, output projection, two norms
        return (3 * h * h + 3 * h + h * h + 4 * h) * self.element_size

    @property
    def embedding_bytes(self) -> int:
        return self.vocab_size * self.hidden_dim * self.element_size

    @property
    def encoder_weight_bytes(self) -> int:
        d = self.encoder_dim
        return self.encoder_layers * (12 * d * d + 4 * d) * self.element_size

    @property
    def connector_weight_bytes(self) -> int:
        if self.connector_kind is ConnectorKind.CROSS_ATTENTION:
            return (self.encoder_dim * 2 * self.hidden_dim + 2 * self.hidden_dim * self.hidden_dim) * self.element_size
        dims = self.connector_dims
        return sum(a * b + b for a, b in zip(dims, dims[1:])) * self.element_size

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["encoder_kind"] = self.encoder_kind.value
        data["connector_kind"] = self.connector_kind.value
        data["connector_dims"] = list(self.connector_dims)
        return data


def _enum_value(enum_cls: type[enum.Enum], value: object, source: str) -> enum.Enum:
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError as exc:
        choices = ", ".join(member.value for member in enum_cls)
        raise ConfigError(f"{source}: '{value}' is not one of {choices}") from exc


def model_config_from_dict(data: Mapping, source: str = "model config") -> ModelConfig:
    check_keys(data, ModelConfig, source)
    try:
        return ModelConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_model_config(path: str | Path) -> ModelConfig:
    return model_config_from_dict(read_json(path), source=str(path))


def resolve_model(name_or_path: str | Path) -> ModelConfig:
    """Accept a shipped model name (e.g. ``fastvlm-0.6b``) or a JSON path."""
    candidate = MODELS_DIR / f"{name_or_path}.json"
    if candidate.exists():
        return load_model_config(candidate)
    return load_model_config(name_or_path)


def shipped_models() -> list[str]:
    return sorted(path.stem for path in MODELS_DIR.glob("*.json"))


@dataclasses.dataclass(frozen=True)
class TensorShape:
    rows: int
    cols: int
    element_size: int = FP16_BYTES
    batch: int = 1

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.batch < 1:
            raise ConfigError(f"Tensor dims must be >= 1, got {self.batch}x{self.rows}x{self.cols}")

    @property
    def elements(self) -> int:
        return self.batch * self.rows * self.cols

    @property
    def nbytes(self) -> int:
        return self.elements * self.element_size


@functools.lru_cache(maxsize=65536)
def _shape(rows: int, cols: int, element_size: int, batch: int = 1) -> TensorShape:
    return TensorShape(rows=rows, cols=cols, element_size=element_size, batch=batch)


@dataclasses.dataclass(frozen=True, slots=True)
class KernelNode:
    id: int
    kind: KernelKind
    operand_shapes: tuple[TensorShape, ...]
    flops: int
    bytes_read: int
    bytes_written: int
    deps: tuple[int, ...]
    phase: Phase
    layer_index: int
    label: str
    step: int = 0
    weight_bytes: int = 0
    kv_bytes: int = 0
    elements: int = 0


def flops_of_gemm(m: int, n: int, k: int) -> int:
    if m < 1 or n < 1 or k < 1:
        raise ValueError(f"GEMM dims must be >= 1, got m={m} n={n} k={k}")
    return 2 * m * n * k


@dataclasses.dataclass(frozen=True)
class OperatorGraph:
    model: ModelConfig
    nodes: NodeTable
    entry_ids: tuple[int, ...]
    exit_ids: tuple[int, ...]
    prompt_text_tokens: int
    visual_tokens: int
    output_tokens: int

    @property
    def prefill_len(self) -> int:
        return self.prompt_text_tokens + self.visual_tokens

    @property
    def decode_base(self) -> int:
        return self.nodes.decode_base

    @property
    def step_size(self) -> int:
        return self.nodes.step_size

    def node(self, node_id: int) -> KernelNode:
        return self.nodes[node_id]

    def step_template(self, step: int) -> StepTemplate:
        return self.nodes.step_template(step)

    @functools.cached_property
    def consumers(self) -> dict[int, tuple[int, ...]]:
        result: dict[int, list[int]] = {node_id: [] for node_id in range(len(self.nodes))}
        for node in self.nodes:
            for dep in node.deps:
                result[dep].append(node.id)
        return {key: tuple(value) for key, value in result.items()}

    @functools.cached_property
    def phases(self) -> tuple[Phase, ...]:
        seen = {node.phase for node in self.nodes.prefix}
        if self.output_tokens:
            seen.add(Phase.DECODE_STEP)
        return tuple(phase for phase in Phase if phase in seen)

    def topological_order(self) -> list[int]:
        pending = {node.id: len(node.deps) for node in self.nodes}
        ready = deque(node_id for node_id in self.entry_ids)
        order: list[int] = []
        while ready:
            node_id = ready.popleft()
            order.append(node_id)
            for consumer in self.consumers[node_id]:
                pending[consumer] -= 1
                if pending[consumer] == 0:
                    ready.append(consumer)
        if len(order) != len(self.nodes):
            stuck = next(node_id for node_id, count in pending.items() if count > 0)
            raise SimulationError(f"Operator graph has a cycle through kernel {stuck}")
        return order

    def decode_nodes(self, step: int) -> list[KernelNode]:
        start = self.nodes.step_start(step)
        return self.nodes[start : start + self.step_size]


class _GraphBuilder:
    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        self.e = cfg.element_size
        self.nodes: list[KernelNode] = []
        self.phase = Phase.ENCODE
        self.layer = 0
        self.step = 0

    def shape(self, rows: int, cols: int, batch: int = 1) -> TensorShape:
        return _shape(rows, cols, self.e, batch)

    def _add(
        self,
        kind: KernelKind,
        label: str,
        operands: tuple[TensorShape, ...],
        output: TensorShape,
        deps: Iterable[int],
        flops: int = 0,
        weight_bytes: int = 0,
        kv_bytes: int = 0,
        elements: int = 0,
    ) -> int:
        node_id = len(self.nodes)
        self.nodes.append(
            KernelNode(
                id=node_id,
                kind=kind,
                operand_shapes=operands,
                flops=flops,
                bytes_read=sum(shape.nbytes for shape in operands),
                bytes_written=output.nbytes,
                deps=tuple(sorted(set(dep for dep in deps if dep is not None))),
                phase=self.phase,
                layer_index=self.layer,
                label=label,
                step=self.step,
                weight_bytes=weight_bytes,
                kv_bytes=kv_bytes,
                elements=elements,
            )
        )
        return node_id

    def gemm(self, label: str, a: TensorShape, b: TensorShape, deps: Iterable[int], weight: bool = True) -> int:
        if a.cols != b.rows or a.batch != b.batch:
            raise ConfigError(f"{label}: GEMM operands {a} and {b} are not conformable")
        output = self.shape(a.rows, b.cols, a.batch)
        return self._add(
            KernelKind.GEMM,
            label,
            (a, b),
            output,
            deps,
            flops=a.batch * flops_of_gemm(a.rows, b.cols, a.cols),
            weight_bytes=b.nbytes if weight else 0,
        )

    def sfpe(
        self,
        kind: KernelKind,
        label: str,
        x: TensorShape,
        deps: Iterable[int],
        params: tuple[TensorShape, ...] = (),
        output: TensorShape | None = None,
        ops_per_element: int = 1,
    ) -> int:
        return self._add(
            kind,
            label,
            (x, *params),
            output or x,
            deps,
            flops=ops_per_element * x.elements,
            weight_bytes=sum(param.nbytes for param in params),
            elements=x.elements,
        )

    def norm(self, label: str, rows: int, cols: int, deps: Iterable[int]) -> int:
        vector = self.shape(1, cols)
        return self.sfpe(KernelKind.NORM, label, self.shape(rows, cols), deps, (vector, vector), ops_per_element=5)

    def transfer(self, label: str, x: TensorShape, deps: Iterable[int]) -> int:
        return self._add(KernelKind.TRANSFER, label, (x,), x, deps)

    def attention(self, prefix: str, rows: int, ctx: int, dim: int, heads: int, q_dep: int, kv_dep: int) -> int:
        head_dim = dim // heads
        score = self.gemm(
            f"{prefix}_score",
            self.shape(rows, head_dim, heads),
            self.shape(head_dim, ctx, heads),
            (q_dep, kv_dep),
            weight=False,
        )
        probs = self.sfpe(KernelKind.SOFTMAX, f"{prefix}_softmax", self.shape(rows, ctx, heads), (score,), ops_per_element=4)
        return self.gemm(
            f"{prefix}_value",
            self.shape(rows, ctx, heads),
            self.shape(ctx, head_dim, heads),
            (probs, kv_dep),
            weight=False,
        )

    def backbone_layer(self, rows: int, ctx: int, prev: int | None) -> int:
        cfg = self.cfg
        h, f = cfg.hidden_dim, cfg.ffn_dim
        x = self.shape(rows, h)
        attn_norm = self.norm("attn_norm", rows, h, (prev,))
        qkv = self.gemm("qkv_proj", x, self.shape(h, 3 * h), (attn_norm,))
        qkv_bias = self.sfpe(
            KernelKind.ELEMENTWISE, "qkv_bias", self.shape(rows, 3 * h), (qkv,), (self.shape(1, 3 * h),)
        )
        kv_new = self.shape(rows, 2 * h)
        append = self._add(KernelKind.KV_APPEND, "kv_append", (kv_new,), kv_new, (qkv_bias,), kv_bytes=kv_new.nbytes)
        kv_all = self.shape(ctx, 2 * h)
        read = self._add(KernelKind.KV_READ, "kv_read", (kv_all,), kv_all, (append,), kv_bytes=kv_all.nbytes)
        attn = self.attention("attn", rows, ctx, h, cfg.num_heads, qkv_bias, read)
        out_proj = self.gemm("attn_out_proj", x, self.shape(h, h), (attn,))
        ffn_norm = self.norm("ffn_norm", rows, h, (out_proj,))
        attn_out = self.transfer("attn_out", x, (ffn_norm,))
        up = self.gemm("ffn_up", x, self.shape(h, f), (attn_out,))
        act = self.sfpe(
            KernelKind.ACTIVATION, "ffn_act", self.shape(rows, f), (up,), (self.shape(1, f),), ops_per_element=2
        )
        down = self.gemm("ffn_down", self.shape(rows, f), self.shape(f, h), (act,))
        ffn_bias = self.sfpe(KernelKind.ELEMENTWISE, "ffn_bias", x, (down,), (self.shape(1, h),))
        return self.transfer("ffn_out", x, (ffn_bias,))

    def lm_head(self, prev: int | None) -> int:
        # logits of the last position only
        h = self.cfg.hidden_dim
        return self.gemm("lm_head", self.shape(1, h), self.shape(h, self.cfg.vocab_size), (prev,))

    def encoder(self, tokens_in: int, tokens_out: int) -> int:
        cfg = self.cfg
        d = cfg.encoder_dim
        heads = max(1, d // 64)
        while d % heads:
            heads -= 1
        x = self.shape(tokens_in, d)
        prev: int | None = None
        for layer in range(cfg.encoder_layers):
            self.layer = layer
            norm1 = self.norm("enc_attn_norm", tokens_in, d, (prev,))
            qkv = self.gemm("enc_qkv_proj", x, self.shape(d, 3 * d), (norm1,))
            attn = self.attention("enc_attn", tokens_in, tokens_in, d, heads, qkv, qkv)
            out = self.gemm("enc_out_proj", x, self.shape(d, d), (attn,))
            norm2 = self.norm("enc_mlp_norm", tokens_in, d, (out,))
            up = self.gemm("enc_mlp_up", x, self.shape(d, 4 * d), (norm2,))
            act = self.sfpe(KernelKind.ACTIVATION, "enc_mlp_act", self.shape(tokens_in, 4 * d), (up,), ops_per_element=2)
            prev = self.gemm("enc_mlp_down", self.shape(tokens_in, 4 * d), self.shape(4 * d, d), (act,))
        if tokens_out < tokens_in:
            prev = self.sfpe(
                KernelKind.ELEMENTWISE, "enc_downsample", x, (prev,), output=self.shape(tokens_out, d)
            )
        return prev

    def connector(self, visual_tokens: int, prompt_tokens: int, prev: int) -> int:
        cfg = self.cfg
        self.layer = 0
        if cfg.connector_kind is ConnectorKind.CROSS_ATTENTION:
            h = cfg.hidden_dim
            kv = self.gemm("conn_kv_proj", self.shape(visual_tokens, cfg.encoder_dim), self.shape(cfg.encoder_dim, 2 * h), (prev,))
            q = self.gemm("conn_q_proj", self.shape(prompt_tokens, h), self.shape(h, h), (prev,))
            attn = self.attention("conn_attn", prompt_tokens, visual_tokens, h, cfg.num_heads, q, kv)
            return self.gemm("conn_out_proj", self.shape(prompt_tokens, h), self.shape(h, h), (attn,))
        dims = cfg.connector_dims
        for index, (width_in, width_out) in enumerate(zip(dims, dims[1:])):
            self.layer = index
            prev = self.gemm(f"conn_mlp_{index}", self.shape(visual_tokens, width_in), self.shape(width_in, width_out), (prev,))
            if index < len(dims) - 2:
                prev = self.sfpe(
                    KernelKind.ACTIVATION,
                    f"conn_act_{index}",
                    self.shape(visual_tokens, width_out),
                    (prev,),
                    (self.shape(1, width_out),),
                    ops_per_element=2,
                )
        return prev


@dataclasses.dataclass(frozen=True)
class StepTemplate:
    """Kernels of one decode step, instantiated once.

    ``layer`` holds layer 0 with ids local to the layer; every layer of the step repeats it.
    A template kernel without deps chains to the kernel just before it in the graph.
    """

    step: int
    layer: tuple[KernelNode, ...]
    lm_head: KernelNode


def _instantiate(node: KernelNode, node_id: int, deps: tuple[int, ...], layer: int) -> KernelNode:
    return KernelNode(
        node_id,
        node.kind,
        node.operand_shapes,
        node.flops,
        node.bytes_read,
        node.bytes_written,
        deps,
        node.phase,
        layer,
        node.label,
        node.step,
        node.weight_bytes,
        node.kv_bytes,
        node.elements,
    )


class NodeTable(Sequence[KernelNode]):
    """Kernels of a graph in id order.

    Encoder, connector and prefill kernels are stored; decode-step kernels are built on
    access from a small cache of step templates.
    """

    def __init__(self, cfg: ModelConfig, prefix: tuple[KernelNode, ...], prefill_len: int, output_tokens: int) -> None:
        self.model = cfg
        self.prefix = prefix
        self.prefill_len = prefill_len
        self.output_tokens = output_tokens
        self.decode_base = len(prefix)
        self.step_size = cfg.num_layers * LAYER_KERNELS + 1
        self._templates: dict[int, StepTemplate] = {}

    def __len__(self) -> int:
        return self.decode_base + self.output_tokens * self.step_size

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[position] for position in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(f"kernel {index} outside 0..{len(self) - 1}")
        if index < self.decode_base:
            return self.prefix[index]
        step, local = divmod(index - self.decode_base, self.step_size)
        template = self.step_template(step + 1)
        if local == self.step_size - 1:
            return _instantiate(template.lm_head, index, (index - 1,), template.lm_head.layer_index)
        layer, slot = divmod(local, LAYER_KERNELS)
        node = template.layer[slot]
        base = index - slot
        deps = tuple(dep + base for dep in node.deps) if node.deps else (index - 1,)
        return _instantiate(node, index, deps, layer)

    def __iter__(self) -> Iterator[KernelNode]:
        yield from self.prefix
        for step in range(1, self.output_tokens + 1):
            template = self.step_template(step)
            index = self.step_start(step)
            for layer in range(self.model.num_layers):
                for slot, node in enumerate(template.layer):
                    deps = tuple(dep + index - slot for dep in node.deps) if node.deps else (index - 1,)
                    yield _instantiate(node, index, deps, layer)
                    index += 1
            yield _instantiate(template.lm_head, index, (index - 1,), template.lm_head.layer_index)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NodeTable):
            return NotImplemented
        return (self.model, self.prefix, self.prefill_len, self.output_tokens) == (
            other.model,
            other.prefix,
            other.prefill_len,
            other.output_tokens,
        )

    def __hash__(self) -> int:
        return hash((self.model, self.prefix, self.prefill_len, self.output_tokens))

    def step_start(self, step: int) -> int:
        if not 1 <= step <= self.output_tokens:
            raise IndexError(f"decode step {step} outside 1..{self.output_tokens}")
        return self.decode_base + (step - 1) * self.step_size

    def step_template(self, step: int) -> StepTemplate:
        template = self._templates.get(step)
        if template is None:
            self.step_start(step)
            template = _build_step_template(self.model, self.prefill_len, step)
            if len(self._templates) >= TEMPLATE_CACHE_STEPS:
                del self._templates[next(iter(self._templates))]
            self._templates[step] = template
        return template


def _build_step_template(cfg: ModelConfig, prefill_len: int, step: int) -> StepTemplate:
    builder = _GraphBuilder(cfg)
    builder.phase = Phase.DECODE_STEP
    builder.step = step
    builder.backbone_layer(1, prefill_len + step, None)
    layer = tuple(builder.nodes)
    builder.nodes = []
    builder.layer = cfg.num_layers - 1
    builder.lm_head(None)
    return StepTemplate(step=step, layer=layer, lm_head=builder.nodes[0])


def encoder_tokens_in(cfg: ModelConfig, visual_input: tuple[int, int]) -> int:
    height, width = visual_input
    if cfg.encoder_image_size is not None:
        height = width = cfg.encoder_image_size
    patch = cfg.encoder_patch_size
    return max(1, math.ceil(height / patch)) * max(1, math.ceil(width / patch))


def build_graph(
    cfg: ModelConfig,
    prompt_tokens: int,
    visual_input: tuple[int, int] | None,
    output_tokens: int,
) -> OperatorGraph:
    """Decompose one inference into encoder, connector, prefill and decode-step kernels.

    ``visual_input`` is the image (height, width) in pixels, or ``None`` for a text-only
    prompt. Decode step ``t`` (1-based) attends over ``prefill_len + t`` cached tokens and
    ends with the ``lm_head`` projection, as does prefill.
    """
    for name, value in (("prompt_tokens", prompt_tokens), ("output_tokens", output_tokens)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
    builder = _GraphBuilder(cfg)
    prev: int | None = None
    visual_tokens = 0
    if visual_input is not None:
        if len(visual_input) != 2 or min(visual_input) < 1:
            raise ConfigError(f"Image dims must be two positive integers, got {visual_input!r}")
        tokens_in = encoder_tokens_in(cfg, visual_input)
        visual_tokens = min(cfg.encoder_tokens_out, tokens_in)
        builder.phase = Phase.ENCODE
        prev = builder.encoder(tokens_in, visual_tokens)
        builder.phase = Phase.CONNECT
        prev = builder.connector(visual_tokens, prompt_tokens, prev)

    prefill_len = prompt_tokens + visual_tokens
    builder.phase = Phase.PREFILL
    for layer in range(cfg.num_layers):
        builder.layer = layer
        prev = builder.backbone_layer(prefill_len, prefill_len, prev)
    builder.lm_head(prev)

    prefix = tuple(builder.nodes)
    nodes = NodeTable(cfg, prefix, prefill_len, output_tokens)
    has_consumer = {dep for node in prefix for dep in node.deps}
    LOGGER.debug("Built %d kernels for %s (prefill %d, decode %d)", len(nodes), cfg.name, prefill_len, output_tokens)
    return OperatorGraph(
        model=cfg,
        nodes=nodes,
        entry_ids=tuple(node.id for node in prefix if not node.deps),
        exit_ids=tuple(node.id for node in prefix[:-1] if node.id not in has_consumer) + (len(nodes) - 1,),
        prompt_text_tokens=prompt_tokens,
        visual_tokens=visual_tokens,
        output_tokens=output_tokens,
    )


def phase_fractions(graph: OperatorGraph, report: "SimReport") -> dict[Phase, float]:
    latencies = {phase: report.phase_latency_ns.get(phase.value, 0.0) for phase in graph.phases}
    total = sum(latencies.values())
    if not latencies or total <= 0:
        raise SimulationError("Cannot compute phase fractions from an empty report")
    return {phase: value / total for phase, value in latencies.items()}


def backbone_fraction(fractions: Mapping[Phase, float]) -> float:
    return sum(fractions.get(phase, 0.0) for phase in BACKBONE_PHASES)
