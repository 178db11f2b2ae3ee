"""Graph attention message passing and multi-head self-attention over tokens."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    as_tensor,
    cols,
    concat,
    dropout,
    elu,
    leaky_relu,
    masked_softmax,
    matmul,
    outer_add,
    softmax,
    transpose,
)


@dataclass
class GatLayerParams:
    """Per-head projections ``weights[h]`` (F_in x F_out) and attention halves.

    ``att_dst[h]`` scores the aggregating node u, ``att_src[h]`` the neighbor v;
    together they are the 2*F_out attention vector.
    """

    weights: list
    att_dst: list
    att_src: list
    slope: float = 0.2
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.weights) < 1:
            raise ConfigError("need at least one attention head")
        if not len(self.weights) == len(self.att_dst) == len(self.att_src):
            raise ConfigError("per-head parameter lists differ in length")
        if self.slope <= 0:
            raise ConfigError("leaky-relu slope must be positive")

    @property
    def heads(self):
        return len(self.weights)


@dataclass
class EdgeAttention:
    """Attention of every directed pair ``v -> u`` (self-loops included).

    ``beta[h, u, v]`` is the weight node u gives neighbor v in head h; zero
    off the graph.
    """

    beta: np.ndarray
    mask: np.ndarray

    def entries(self):
        u, v = np.nonzero(self.mask)
        for h in range(self.beta.shape[0]):
            for a, b in zip(u, v):
                yield int(a), int(b), h, float(self.beta[h, a, b])

    def head_mean(self):
        return self.beta.mean(axis=0)

    def directed(self, node_ids=None, include_self=False):
        """Head-averaged ``(u, v, beta)`` arrays, optionally mapped to original ids."""
        mask = self.mask.copy()
        if not include_self:
            np.fill_diagonal(mask, False)
        u, v = np.nonzero(mask)
        b = self.head_mean()[u, v]
        if node_ids is not None:
            u, v = node_ids[u], node_ids[v]
        return u, v, b


def attention_mask(graph):
    return graph.adjacency(self_loops=True) > 0


def gat_forward(h, graph, params, training=False, rng=None, mask=None):
    """One GAT layer: masked attention per head, heads concatenated, then ELU."""
    h = as_tensor(h)
    if h.data.ndim != 2 or h.shape[0] != graph.num_nodes:
        raise ShapeError(f"features {h.shape} do not match a {graph.num_nodes}-node graph")
    if mask is None:
        mask = attention_mask(graph)
    outs, betas = [], []
    for w, a_dst, a_src in zip(params.weights, params.att_dst, params.att_src):
        wh = matmul(h, w)
        logits = leaky_relu(outer_add(matmul(wh, a_dst), matmul(wh, a_src)), params.slope)
        beta = masked_softmax(logits, mask)
        betas.append(beta.data)
        beta = dropout(beta, params.dropout, rng, training=training and rng is not None)
        outs.append(matmul(beta, wh))
    out = elu(concat(outs, axis=1) if len(outs) > 1 else outs[0])
    return out, EdgeAttention(np.stack(betas), mask)


@dataclass
class MhsaParams:
    """Square query/key/value/output projections (D x D)."""

    wq: object
    wk: object
    wv: object
    wo: object


def mhsa_forward(tokens, heads, params):
    """Scaled dot-product self-attention over the rows of ``tokens`` (L x D).

    Returns the L x D context and the heads x L x L attention weights.
    """
    tokens = as_tensor(tokens)
    if tokens.data.ndim != 2:
        raise ShapeError("tokens must be L x D")
    n_tok, dim = tokens.shape
    if heads < 1 or dim % heads:
        raise ConfigError(f"token dim {dim} is not divisible by {heads} heads")
    dh = dim // heads
    q = matmul(tokens, params.wq)
    k = matmul(tokens, params.wk)
    v = matmul(tokens, params.wv)
    scale = 1.0 / math.sqrt(dh)
    ctx, weights = [], []
    for i in range(heads):
        lo, hi = i * dh, (i + 1) * dh
        scores = matmul(cols(q, lo, hi), transpose(cols(k, lo, hi))) * scale
        attn = softmax(scores, axis=1)
        weights.append(attn.data)
        ctx.append(matmul(attn, cols(v, lo, hi)))
    joined = concat(ctx, axis=1) if heads > 1 else ctx[0]
    return matmul(joined, params.wo), np.stack(weights).reshape(heads, n_tok, n_tok)
