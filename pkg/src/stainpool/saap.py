"""Stain-aware attention pooling: score, keep the top fraction, weight by stain, read out."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GraphError, ShapeError
from .graph import normalized_adjacency
from .tensor import (
    as_tensor,
    concat,
    matmul,
    max_,
    mean,
    reshape,
    row_scale,
    softmax,
    take_rows,
    tanh,
    transpose,
)


@dataclass
class PoolResult:
    retained: np.ndarray  # original node ids, descending score
    raw_scores: np.ndarray
    normalized_scores: np.ndarray
    scaled_features: object  # Tensor K x F
    stain_weights: dict
    readout: object  # Tensor of length 2F
    pruned_graph: object
    keep: np.ndarray = None  # local indices into the input graph


def sag_scores(x, graph, theta, norm_adj=None):
    """``tanh(D^-1/2 (A+I) D^-1/2 X theta)`` as an N x 1 tensor."""
    x = as_tensor(x)
    if x.shape[0] != graph.num_nodes:
        raise ShapeError(f"{x.shape[0]} feature rows for a {graph.num_nodes}-node graph")
    if norm_adj is None:
        norm_adj = normalized_adjacency(graph, with_self_loops=True)
    return tanh(matmul(norm_adj, matmul(x, theta)))


def retained_count(n, ratio):
    # guard against 0.7 * 70 style products landing a ulp above an integer
    return max(1, math.ceil(ratio * n - 1e-9))


def topk_select(scores, ratio):
    """Indices of the top ``ceil(ratio * N)`` scores, descending; ties favour lower index."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"pool ratio must lie in (0, 1], got {ratio}")
    a = np.asarray(scores, dtype=np.float64).reshape(-1)
    if a.size < 1:
        raise GraphError("cannot pool an empty graph")
    order = np.lexsort((np.arange(a.size), -a))
    return order[: retained_count(a.size, ratio)]


def prune_graph(graph, retained):
    """Induced subgraph on ``retained``; edges with a dropped endpoint disappear."""
    return graph.subgraph(retained)


def stain_onehot(stains):
    labels = sorted(set(np.asarray(stains, dtype=str).tolist()))
    idx = {s: i for i, s in enumerate(labels)}
    onehot = np.zeros((len(stains), len(labels)))
    onehot[np.arange(len(stains)), [idx[str(s)] for s in stains]] = 1.0
    return labels, onehot


def stain_weights_and_scale(scores, x, stains, relative=False):
    """Normalize retained scores, scale features, and sum the mass per stain.

    Returns ``(a_norm, x_scaled, alpha)``: ``a_norm`` is the softmax of the
    retained scores (K x 1), ``alpha`` the per-stain mass (S x 1, stains in
    sorted order). With ``relative`` the feature scale is ``K * a_norm`` (mean
    one); otherwise ``a_norm`` itself.
    """
    scores, x = as_tensor(scores), as_tensor(x)
    k = x.shape[0]
    if k == 0:
        raise GraphError("no retained nodes")
    if scores.size != k or len(stains) != k:
        raise ShapeError("scores, features and stains must align over retained nodes")
    a_norm = softmax(reshape(scores, (k, 1)), axis=0)
    scale = a_norm * float(k) if relative else a_norm
    x_scaled = row_scale(x, scale)
    _, onehot = stain_onehot(stains)
    alpha = matmul(transpose(onehot), a_norm)
    return a_norm, x_scaled, alpha


def stain_pool_readout(x_scaled, alpha, stains):
    """``[column-mean(SA) || column-max(SA)]`` with ``SA_n = alpha[stain(n)] * x_scaled_n``."""
    x_scaled, alpha = as_tensor(x_scaled), as_tensor(alpha)
    labels, onehot = stain_onehot(stains)
    if alpha.size != len(labels):
        raise ShapeError(f"{alpha.size} stain weights for {len(labels)} stains")
    per_node = matmul(onehot, reshape(alpha, (alpha.size, 1)))
    sa = row_scale(x_scaled, per_node)
    return concat([mean(sa, axis=0), max_(sa, axis=0)], axis=0)


def alpha_map(alpha, stains):
    labels = sorted(set(np.asarray(stains, dtype=str).tolist()))
    values = np.asarray(alpha.data if hasattr(alpha, "data") else alpha).reshape(-1)
    return {s: float(v) for s, v in zip(labels, values)}


def saap_pool(x, graph, theta, ratio, relative=False, norm_adj=None):
    """Full pooling step on one graph; returns a :class:`PoolResult`."""
    x = as_tensor(x)
    scores = sag_scores(x, graph, theta, norm_adj=norm_adj)
    keep = topk_select(scores.data, ratio)
    kept_stains = graph.stains[keep]
    a_norm, x_scaled, alpha = stain_weights_and_scale(
        take_rows(scores, keep), take_rows(x, keep), kept_stains, relative=relative
    )
    readout = stain_pool_readout(x_scaled, alpha, kept_stains)
    return PoolResult(
        retained=graph.node_ids[keep],
        raw_scores=scores.data.reshape(-1),
        normalized_scores=a_norm.data.reshape(-1),
        scaled_features=x_scaled,
        stain_weights=alpha_map(alpha, kept_stains),
        readout=readout,
        pruned_graph=prune_graph(graph, keep),
        keep=keep,
    )
