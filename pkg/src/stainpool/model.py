"""Hierarchical encoder: L blocks of (projection, GAT, stain-aware pooling), MHSA, classifier."""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, FormatError
from .gat import GatLayerParams, MhsaParams, attention_mask, gat_forward, mhsa_forward
from .graph import normalized_adjacency
from .rwpe import concat_project, random_walk_pe
from .saap import saap_pool
from .tensor import add, as_tensor, concat, matmul, reshape, softmax


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    layers: int = 4
    hidden_dim: int = 32
    pe_dim: int = 20
    pool_ratio: float = 0.7
    gat_heads: int = 2
    mhsa_heads: int = 2
    dropout: float = 0.2
    num_classes: int = 2
    knn_k: int = 5
    seed: int = 42
    slope: float = 0.2
    # scale pooled features by K * softmax(score) (mean one) instead of softmax(score)
    relative_scaling: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ConfigError(f"pool_ratio must lie in (0, 1], got {self.pool_ratio}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.in_dim < 1 or self.hidden_dim < 1 or self.pe_dim < 0:
            raise ConfigError("dimensions must be positive (pe_dim may be 0)")
        if self.gat_heads < 1 or self.hidden_dim % self.gat_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.gat_heads} GAT heads")
        if self.mhsa_heads < 1 or (2 * self.hidden_dim) % self.mhsa_heads:
            raise ConfigError(f"readout dim {2 * self.hidden_dim} not divisible by {self.mhsa_heads} MHSA heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")

    @classmethod
    def ra_preset(cls, in_dim, **overrides):
        base = dict(layers=4, pe_dim=20, pool_ratio=0.7, gat_heads=2, mhsa_heads=2, dropout=0.2, seed=42)
        return cls(in_dim=in_dim, **{**base, **overrides})

    @classmethod
    def sjogren_preset(cls, in_dim, **overrides):
        base = dict(layers=4, pe_dim=20, pool_ratio=0.5, gat_heads=4, mhsa_heads=4, dropout=0.2, seed=42)
        return cls(in_dim=in_dim, **{**base, **overrides})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def readout_dim(self):
        return 2 * self.hidden_dim


def param_shapes(config):
    """Ordered ``name -> shape`` for every learnable tensor."""
    f, fh, d = config.hidden_dim, config.hidden_dim // config.gat_heads, config.readout_dim
    shapes = {}
    for b in range(config.layers):
        fin = config.in_dim if b == 0 else f
        shapes[f"block{b}.proj"] = (fin + config.pe_dim, f)
        for h in range(config.gat_heads):
            shapes[f"block{b}.gat.weight{h}"] = (f, fh)
            shapes[f"block{b}.gat.att_dst{h}"] = (fh, 1)
            shapes[f"block{b}.gat.att_src{h}"] = (fh, 1)
        shapes[f"block{b}.score"] = (f, 1)
    shapes["mhsa.token"] = (config.layers, d)
    for name in ("wq", "wk", "wv", "wo"):
        shapes[f"mhsa.{name}"] = (d, d)
    shapes["head.weight"] = (config.layers * d, config.num_classes)
    shapes["head.bias"] = (1, config.num_classes)
    return shapes


def _fan_in(name, shape):
    if ".att_" in name:
        return 2 * shape[0]  # halves of one 2*F_out attention vector
    if name == "mhsa.token":
        return shape[1]
    return shape[0]


def init_params(config, seed=None):
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases; deterministic in seed."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class LayerRecord:
    node_ids: np.ndarray
    edges: np.ndarray
    edge_types: np.ndarray
    raw_scores: np.ndarray
    layer_scores: np.ndarray  # softmax of raw scores over every node entering the layer
    retained_ids: np.ndarray
    normalized_scores: np.ndarray  # softmax over retained nodes, aligned with retained_ids
    alpha: dict
    att_dst: np.ndarray  # aggregating node u (original id)
    att_src: np.ndarray  # neighbor v (original id)
    att_beta: np.ndarray  # head-averaged, self-loops included
    pruned_edges: np.ndarray
    pruned_edge_types: np.ndarray


@dataclass
class AttentionRecord:
    layers: list = field(default_factory=list)
    mhsa_weights: np.ndarray = None
    node_stains: np.ndarray = None


def _block_params(params, b, config):
    h = range(config.gat_heads)
    gat = GatLayerParams(
        weights=[params[f"block{b}.gat.weight{i}"] for i in h],
        att_dst=[params[f"block{b}.gat.att_dst{i}"] for i in h],
        att_src=[params[f"block{b}.gat.att_src{i}"] for i in h],
        slope=config.slope,
        dropout=config.dropout,
    )
    return params[f"block{b}.proj"], gat, params[f"block{b}.score"]


def forward(graph, params, config, training=False, rng=None):
    """Logits (length num_classes) and the :class:`AttentionRecord` of one pass.

    ``params`` maps names to tensors or arrays; pass tensors with
    ``requires_grad`` inside a tape to differentiate.
    """
    if graph.num_nodes < 1:
        raise ConfigError("graph has no nodes")
    t = {k: as_tensor(v) for k, v in params.items()}
    pe = random_walk_pe(graph, config.pe_dim) if config.pe_dim else np.zeros((graph.num_nodes, 0))
    record = AttentionRecord(node_stains=graph.stains.copy())
    h = as_tensor(graph.features)
    g = graph
    readouts = []
    for b in range(config.layers):
        proj, gat_params, theta = _block_params(t, b, config)
        h = concat_project(h, pe, proj)
        h, att = gat_forward(h, g, gat_params, training=training, rng=rng, mask=attention_mask(g))
        pool = saap_pool(
            h, g, theta, config.pool_ratio,
            relative=config.relative_scaling,
            norm_adj=normalized_adjacency(g, with_self_loops=True),
        )
        dst, src, beta = att.directed(g.node_ids, include_self=True)
        pruned = pool.pruned_graph
        record.layers.append(
            LayerRecord(
                node_ids=g.node_ids.copy(),
                edges=g.node_ids[g.edges] if g.num_edges else np.zeros((0, 2), dtype=np.int64),
                edge_types=g.edge_types.copy(),
                raw_scores=pool.raw_scores,
                layer_scores=softmax(pool.raw_scores).data,
                retained_ids=pool.retained,
                normalized_scores=pool.normalized_scores,
                alpha=pool.stain_weights,
                att_dst=dst,
                att_src=src,
                att_beta=beta,
                pruned_edges=pruned.node_ids[pruned.edges] if pruned.num_edges else np.zeros((0, 2), dtype=np.int64),
                pruned_edge_types=pruned.edge_types.copy(),
            )
        )
        readouts.append(reshape(pool.readout, (1, config.readout_dim)))
        h = pool.scaled_features
        pe = pe[pool.keep]
        g = pruned
    tokens = add(concat(readouts, axis=0) if len(readouts) > 1 else readouts[0], t["mhsa.token"])
    mhsa = MhsaParams(t["mhsa.wq"], t["mhsa.wk"], t["mhsa.wv"], t["mhsa.wo"])
    context, weights = mhsa_forward(tokens, config.mhsa_heads, mhsa)
    record.mhsa_weights = weights
    flat = reshape(context, (1, config.layers * config.readout_dim))
    logits = add(matmul(flat, t["head.weight"]), t["head.bias"])
    return reshape(logits, (config.num_classes,)), record


def predict_proba(graph, params, config):
    logits, record = forward(graph, params, config, training=False)
    return softmax(logits.data).data, record


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

_MAGIC = b"BXCK1\n"


def save_checkpoint(path, config, params, extra=None):
    """Header line of JSON (config, extra) then per tensor ``name shape\\n`` + LE float64."""
    header = {"config": config.to_dict(), "extra": extra or {}, "tensors": len(params)}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            shape = "x".join(str(s) for s in arr.shape)
            fh.write(f"{name} {shape}\n".encode())
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    end = blob.index(b"\n", pos)
    try:
        header = json.loads(blob[pos:end])
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: bad header: {err}") from None
    pos = end + 1
    params = {}
    for _ in range(header["tensors"]):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated tensor header")
        name, shape_txt = blob[pos:end].decode().split(" ")
        shape = tuple(int(s) for s in shape_txt.split("x")) if shape_txt else ()
        pos = end + 1
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise FormatError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes")
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    if set(expected) != set(params) or any(params[k].shape != expected[k] for k in expected):
        raise FormatError(f"{path}: tensors do not match the stored config")
    return config, params, header.get("extra", {})
