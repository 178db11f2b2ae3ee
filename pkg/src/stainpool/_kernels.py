"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``STAINPOOL_DISABLE_NUMBA`` is
unset (or ``0``). Both implementations are always importable under the
``*_numpy`` / ``*_numba`` names so they can be cross-checked and benchmarked.
"""

import os
import warnings

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("STAINPOOL_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag in ("", "0", "false", "no")

# bytes budget for one chunk of the broadcasted pairwise-difference tensor
_CHUNK_BYTES = 1 << 26


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def knn_select_numpy(points, candidates, k):
    """Indices of the ``k`` nearest candidate points for every row.

    ``candidates[i, j]`` marks j as eligible for i; i itself is never eligible.
    Ties are broken by lower index. Rows with fewer than ``k`` candidates are
    padded with -1.
    """
    n = points.shape[0]
    out = np.full((n, k), -1, dtype=np.int64)
    if n == 0:
        return out
    d = max(points.shape[1], 1)
    step = max(1, _CHUNK_BYTES // (8 * n * d))
    for start in range(0, n, step):
        stop = min(n, start + step)
        diff = points[start:stop, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        ok = candidates[start:stop].copy()
        ok[np.arange(stop - start), np.arange(start, stop)] = False
        d2[~ok] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        picked = np.take_along_axis(d2, order, axis=1)
        order[np.isinf(picked)] = -1
        out[start:stop, : order.shape[1]] = order
    return out


def masked_softmax_numpy(x, mask):
    z = np.where(mask, x, -np.inf)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_numpy(y, g):
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def _ap_sweep_numpy(sorted_scores, sorted_labels):
    n_pos = sorted_labels.sum()
    # last position of every run of tied scores
    last = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp = np.cumsum(sorted_labels)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def knn_select_numba(points, candidates, k):
        n, d = points.shape
        out = np.full((n, k), -1, dtype=np.int64)
        best = np.empty(k, dtype=np.float64)
        for i in range(n):
            best[:] = np.inf
            for j in range(n):
                if j == i or not candidates[i, j]:
                    continue
                dist = 0.0
                for c in range(d):
                    t = points[i, c] - points[j, c]
                    dist += t * t
                if dist >= best[k - 1]:
                    continue
                pos = k - 1
                while pos > 0 and dist < best[pos - 1]:
                    best[pos] = best[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                    pos -= 1
                best[pos] = dist
                out[i, pos] = j
        return out

    @numba.njit(cache=True)
    def masked_softmax_numba(x, mask):
        n, m = x.shape
        out = np.zeros((n, m))
        for i in range(n):
            top = -np.inf
            for j in range(m):
                if mask[i, j] and x[i, j] > top:
                    top = x[i, j]
            total = 0.0
            for j in range(m):
                if mask[i, j]:
                    e = np.exp(x[i, j] - top)
                    out[i, j] = e
                    total += e
            for j in range(m):
                out[i, j] /= total
        return out

    @numba.njit(cache=True)
    def softmax_rows_backward_numba(y, g):
        n, m = y.shape
        out = np.empty((n, m))
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += g[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(cache=True)
    def _ap_sweep_numba(sorted_scores, sorted_labels):
        n = sorted_scores.shape[0]
        n_pos = 0.0
        for i in range(n):
            n_pos += sorted_labels[i]
        tp = 0.0
        fp = 0.0
        prev_recall = 0.0
        ap = 0.0
        for i in range(n):
            if sorted_labels[i] > 0:
                tp += 1.0
            else:
                fp += 1.0
            if i == n - 1 or sorted_scores[i + 1] != sorted_scores[i]:
                recall = tp / n_pos
                ap += (recall - prev_recall) * (tp / (tp + fp))
                prev_recall = recall
        return ap

else:  # pragma: no cover
    knn_select_numba = knn_select_numpy
    masked_softmax_numba = masked_softmax_numpy
    softmax_rows_backward_numba = softmax_rows_backward_numpy
    _ap_sweep_numba = _ap_sweep_numpy
    if _flag in ("", "0", "false", "no"):
        warnings.warn("numba unavailable; using numpy kernels")


def average_precision_numpy(scores, labels):
    order = np.argsort(-scores, kind="stable")
    return _ap_sweep_numpy(scores[order], labels[order].astype(np.float64))


def average_precision_numba(scores, labels):
    order = np.argsort(-scores, kind="stable")
    return _ap_sweep_numba(
        np.ascontiguousarray(scores[order]), labels[order].astype(np.float64)
    )


if USE_NUMBA:
    knn_select = knn_select_numba
    masked_softmax = masked_softmax_numba
    softmax_rows_backward = softmax_rows_backward_numba
    average_precision_sweep = average_precision_numba
else:
    knn_select = knn_select_numpy
    masked_softmax = masked_softmax_numpy
    softmax_rows_backward = softmax_rows_backward_numpy
    average_precision_sweep = average_precision_numpy
