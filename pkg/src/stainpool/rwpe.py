"""Random-walk positional encodings."""

import numpy as np

from .errors import ShapeError
from .tensor import as_tensor, concat, matmul


def transition_matrix(graph):
    """Row-stochastic ``D^-1 A`` without self-loops; isolated nodes get zero rows."""
    a = graph.adjacency(self_loops=False)
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def random_walk_pe(graph, length):
    """``pe[u, t-1] = (M^t)[u, u]`` for t = 1..length."""
    if length < 1:
        raise ValueError("walk length must be >= 1")
    m = transition_matrix(graph)
    pe = np.zeros((graph.num_nodes, length))
    power = np.eye(graph.num_nodes)
    for t in range(length):
        power = power @ m
        pe[:, t] = np.diag(power)
    # rounding can push return probabilities a hair outside [0, 1]
    return np.clip(pe, 0.0, 1.0)


def concat_project(features, pe, weight):
    """``[features || pe] @ weight``; weight is ``(d_x + l) x d``."""
    features, pe, weight = as_tensor(features), as_tensor(pe), as_tensor(weight)
    if features.shape[0] != pe.shape[0]:
        raise ShapeError(f"{features.shape[0]} feature rows but {pe.shape[0]} encoding rows")
    if weight.shape[0] != features.shape[1] + pe.shape[1]:
        raise ShapeError(
            f"projection expects {weight.shape[0]} inputs, got {features.shape[1]} + {pe.shape[1]}"
        )
    joined = concat([features, pe], axis=1) if pe.shape[1] else features
    return matmul(joined, weight)
