"""Graph transformer encoder with node-edge message interaction.

Node states attend to their directed edge states instead of to other
nodes: per head, queries/values are projected from node states and keys
from edge states, the outgoing/incoming interaction scores are row-
softmaxed and combined with the double-counted self-loop removed, and the
combined message matrix is attenuated by exp(-alpha * hops) before the
node (M @ V) and edge (M * K) updates. Layers are residual with post
layer norm; a GRU readout pools node states for graph-level heads.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .featurize import F_EDGE, F_NODE, MAX_ATOMS, FeaturizedGraph, TooManyAtoms
from .tensor import (
    GruParams,
    ShapeMismatch,
    Tensor,
    concat,
    contract_incoming,
    contract_outgoing,
    dropout,
    glorot,
    layer_norm,
    linear,
    matmul,
    narrow,
    scale,
    softmax_rows,
    zeros,
)

TASKS = ("graph_classification", "graph_regression", "node_regression")
DIAGONAL_MODES = ("identity_subtract", "softmax_diag_subtract")

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    hidden_dim: int = 128
    num_heads: int = 4
    num_layers: int = 3
    dropout: float = 0.1
    distance_cap: int = 10
    use_positions: bool = True
    use_edge_direction: bool = True
    use_diffusion: bool = True
    diagonal_mode: str = "identity_subtract"
    adjacency_mask: bool = False
    max_atoms: int = MAX_ATOMS
    task: str = "graph_regression"
    num_targets: int = 1

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout rate {self.dropout} outside [0,1]")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.diagonal_mode not in DIAGONAL_MODES:
            raise ValueError(f"unknown diagonal_mode {self.diagonal_mode!r}")
        if self.num_targets < 1:
            raise ValueError("num_targets must be positive")
        if self.distance_cap < 1:
            raise ValueError("distance_cap must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln_node_g: Tensor
    ln_node_b: Tensor
    ln_edge_g: Tensor
    ln_edge_b: Tensor
    diffusion_raw: Tensor


@dataclass
class ModelParams:
    node_w: Tensor
    node_b: Tensor
    edge_w: Tensor
    edge_b: Tensor
    position_table: Tensor
    layers: list[LayerParams]
    gru: GruParams
    head_w: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        f = config.hidden_dim
        layers = []
        for _ in range(config.num_layers):
            layers.append(LayerParams(
                w_q=glorot(rng, f, f),
                w_k=glorot(rng, f, f),
                w_v=glorot(rng, f, f),
                w_o=glorot(rng, f, f),
                ffn_w1=glorot(rng, f, 4 * f),
                ffn_b1=zeros(4 * f),
                ffn_w2=glorot(rng, 4 * f, f),
                ffn_b2=zeros(f),
                ln_node_g=Tensor(np.ones(f), requires_grad=True),
                ln_node_b=zeros(f),
                ln_edge_g=Tensor(np.ones(f), requires_grad=True),
                ln_edge_b=zeros(f),
                diffusion_raw=Tensor(np.zeros(()), requires_grad=True),
            ))
        return cls(
            node_w=glorot(rng, F_NODE, f),
            node_b=zeros(f),
            edge_w=glorot(rng, F_EDGE, f),
            edge_b=zeros(f),
            position_table=zeros(MAX_ATOMS, f),
            layers=layers,
            gru=GruParams(
                w_r=glorot(rng, 2 * f, f),
                w_z=glorot(rng, 2 * f, f),
                w_h=glorot(rng, 2 * f, f),
                b_r=zeros(f),
                b_z=zeros(f),
                b_h=zeros(f),
            ),
            head_w=glorot(rng, f, config.num_targets),
            head_b=zeros(config.num_targets),
        )

    def named(self):
        """Yield (name, tensor) pairs in a stable order."""
        yield "node_w", self.node_w
        yield "node_b", self.node_b
        yield "edge_w", self.edge_w
        yield "edge_b", self.edge_b
        yield "position_table", self.position_table
        for k, layer in enumerate(self.layers):
            for name in ("w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b1", "ffn_w2",
                         "ffn_b2", "ln_node_g", "ln_node_b", "ln_edge_g", "ln_edge_b",
                         "diffusion_raw"):
                yield f"layers.{k}.{name}", getattr(layer, name)
        for name in ("w_r", "w_z", "w_h", "b_r", "b_z", "b_h"):
            yield f"gru.{name}", getattr(self.gru, name)
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def zero_grad(self) -> None:
        for _, t in self.named():
            t.zero_grad()

    def copy_data(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def load_data(self, datas: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            src = datas[name]
            if src.shape != t.data.shape:
                raise ShapeMismatch(f"checkpoint tensor {name}: {src.shape} vs {t.data.shape}")
            t.data = src.copy()

    def alphas(self) -> list[float]:
        return [float(_sigmoid(layer.diffusion_raw.data)) for layer in self.layers]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def embed_nodes(X: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    n = X.shape[0]
    if n > config.max_atoms:
        raise TooManyAtoms(f"{n} atoms exceeds max_atoms={config.max_atoms}")
    h = linear(X, params.node_w, params.node_b)
    if config.use_positions:
        h = h + narrow(params.position_table, 0, 0, n)
    return h


def embed_edges(E: Tensor, hX: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    n, f = hX.shape
    base = linear(E, params.edge_w, params.edge_b)
    src = hX.reshape(n, 1, f)
    if config.use_edge_direction:
        return base + src
    dst = hX.reshape(1, n, f)
    return base + scale(src + dst, 0.5)


def project_qkv(hX: Tensor, hE: Tensor, layer: LayerParams, head: int,
                config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    d = config.head_dim
    start = head * d
    q = matmul(hX, narrow(layer.w_q, 1, start, d))
    v = matmul(hX, narrow(layer.w_v, 1, start, d))
    k = linear(hE, narrow(layer.w_k, 1, start, d))
    return q, k, v


def interaction_scores(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled outgoing/incoming scores. Their diagonals are the same
    self-loop product q_v . k_vv and must agree exactly."""
    d = q.shape[-1]
    m_o = scale(contract_outgoing(q, k), 1.0 / math.sqrt(d))
    m_i = scale(contract_incoming(q, k), 1.0 / math.sqrt(d))
    if not np.array_equal(np.diag(m_o.data), np.diag(m_i.data)):
        raise AssertionError("outgoing/incoming score diagonals diverged")
    return m_o, m_i


def combine_messages(m_o: Tensor, m_i: Tensor, mode: str = "identity_subtract",
                     mask: np.ndarray | None = None) -> Tensor:
    if m_o.shape != m_i.shape:
        raise ShapeMismatch(f"score matrices {m_o.shape} vs {m_i.shape}")
    s_o = softmax_rows(m_o, mask)
    s_i = softmax_rows(m_i, mask)
    eye = Tensor(np.eye(m_o.shape[0]))
    if mode == "identity_subtract":
        return s_o + s_i - eye
    if mode == "softmax_diag_subtract":
        return s_o + s_i - s_o * eye
    raise ValueError(f"unknown diagonal mode {mode!r}")


def apply_diffusion(m: Tensor, A: np.ndarray, alpha: Tensor) -> Tensor:
    """Attenuate messages by exp(-alpha * hop distance)."""
    if m.shape != A.shape:
        raise ShapeMismatch(f"message matrix {m.shape} vs distance matrix {A.shape}")
    decay = (scale(alpha, -1.0) * Tensor(A.astype(np.float64))).exp()
    return m * decay


def update_states(m: Tensor, v: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
    n = m.shape[0]
    return matmul(m, v), m.reshape(n, n, 1) * k


def _adjacency_exclusion(A: np.ndarray) -> np.ndarray:
    # exclude pairs that are neither bonded nor the diagonal
    n = A.shape[0]
    return ((A != 1) & ~np.eye(n, dtype=bool)).astype(np.float64)


def encoder_layer(hX: Tensor, hE: Tensor, A: np.ndarray, layer: LayerParams,
                  config: ModelConfig, train: bool = False,
                  rng: np.random.Generator | None = None,
                  trace: list | None = None,
                  alpha_override: float | None = None) -> tuple[Tensor, Tensor]:
    if alpha_override is None:
        alpha = layer.diffusion_raw.sigmoid()
    else:
        alpha = Tensor(np.asarray(alpha_override, dtype=np.float64))
    mask = _adjacency_exclusion(A) if config.adjacency_mask else None

    node_heads = []
    edge_heads = []
    head_trace = []
    for head in range(config.num_heads):
        q, k, v = project_qkv(hX, hE, layer, head, config)
        m_o, m_i = interaction_scores(q, k)
        m = combine_messages(m_o, m_i, config.diagonal_mode, mask)
        pre = m
        if config.use_diffusion:
            m = apply_diffusion(m, A, alpha)
        if trace is not None:
            head_trace.append({
                "diag_outgoing": np.diag(m_o.data).copy(),
                "diag_incoming": np.diag(m_i.data).copy(),
                "pre_diffusion": pre.data.copy(),
                "post_diffusion": m.data.copy(),
            })
        dx, de = update_states(m, v, k)
        node_heads.append(dx)
        edge_heads.append(de)

    node_delta = matmul(concat(node_heads, axis=-1), layer.w_o)
    edge_delta = concat(edge_heads, axis=-1)
    inner = linear(node_delta, layer.ffn_w1, layer.ffn_b1)
    node_delta = linear(inner * inner.sigmoid(), layer.ffn_w2, layer.ffn_b2)
    node_delta = dropout(node_delta, config.dropout, train, rng)
    edge_delta = dropout(edge_delta, config.dropout, train, rng)
    hX = layer_norm(hX + node_delta, layer.ln_node_g, layer.ln_node_b)
    hE = layer_norm(hE + edge_delta, layer.ln_edge_g, layer.ln_edge_b)
    if trace is not None:
        trace.append({"alpha": float(alpha.data), "heads": head_trace})
    return hX, hE


def readout(hX: Tensor, gru: GruParams) -> Tensor:
    """GRU over node states in index order from a zero state; the outputs
    of all steps are summed into one graph vector."""
    n, f = hX.shape
    h = Tensor(np.zeros(f))
    z = None
    from .tensor import gru_cell
    for t in range(n):
        h = gru_cell(narrow(hX, 0, t, 1).reshape(f), h, gru)
        z = h if z is None else z + h
    return z


def forward(graph: FeaturizedGraph, params: ModelParams, config: ModelConfig, *,
            train: bool = False, rng: np.random.Generator | None = None,
            trace: list | None = None, alpha_override: float | None = None) -> Tensor:
    """Full encoder pass; returns logits/values as a Tensor.

    Graph tasks give a (num_targets,) vector, node tasks an (n,) vector.
    """
    hX = embed_nodes(Tensor(graph.X), params, config)
    hE = embed_edges(Tensor(graph.E), hX, params, config)
    for layer in params.layers:
        hX, hE = encoder_layer(hX, hE, graph.A, layer, config, train=train,
                               rng=rng, trace=trace, alpha_override=alpha_override)
    if config.task == "node_regression":
        return linear(hX, params.head_w, params.head_b).reshape(graph.n)
    z = readout(hX, params.gru)
    return linear(z, params.head_w, params.head_b)


@dataclass
class Model:
    config: ModelConfig
    params: ModelParams

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(config=config, params=ModelParams.init(config, seed))

    def forward(self, graph: FeaturizedGraph, **kw) -> Tensor:
        return forward(graph, self.params, self.config, **kw)

    def predict(self, graph: FeaturizedGraph, trace: list | None = None) -> np.ndarray:
        return forward(graph, self.params, self.config, trace=trace).data.copy()


def predict(graph: FeaturizedGraph, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Evaluation-mode predictions as a plain array."""
    return forward(graph, params, config).data.copy()


# checkpoint io ---------------------------------------------------------------
#
# A checkpoint is one JSON header line (format version, model config, extra
# metadata, parameter names and shapes in order) followed by the raw
# little-endian float64 buffers in header order. Round-trips are bit-exact.

def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    names = [(name, list(t.data.shape)) for name, t in model.params.named()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "extra": extra or {},
        "params": names,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for _, t in model.params.named():
            fh.write(t.data.astype("<f8", copy=False).tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        config = ModelConfig.from_dict(header["model_config"])
        model = Model.init(config, seed=0)
        datas = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"checkpoint truncated at parameter {name}")
            datas[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        try:
            model.params.load_data(datas)
        except KeyError as exc:
            raise CheckpointError(f"checkpoint missing parameter {exc}") from exc
    return model, header.get("extra", {})
