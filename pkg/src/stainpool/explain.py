"""Interpretability metrics derived from a forward pass's attention record."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .graph import EDGE_TYPE_NAMES


def _sorted_stains(*maps):
    return sorted({s for m in maps for s in m})


def stain_attention_summary(record):
    """Per-layer stain weights and their zero-filled, renormalized mean.

    Returns ``(per_layer, aggregate)``: ``per_layer`` is a list of dicts and
    ``aggregate`` covers every stain seen in any layer.
    """
    per_layer = [dict(layer.alpha) for layer in record.layers]
    if not per_layer:
        raise ValueError("record has no layers")
    stains = _sorted_stains(*per_layer)
    mat = np.array([[a.get(s, 0.0) for s in stains] for a in per_layer])
    mean = mat.mean(axis=0)
    total = mean.sum()
    agg = mean / total if total > 0 else np.full(len(stains), 1.0 / len(stains))
    return per_layer, {s: float(v) for s, v in zip(stains, agg)}


def stain_entropy(scores, stains):
    """Natural-log entropy of ``scores`` restricted to each stain's nodes.

    ``scores`` is the normalized (softmax) score vector of one layer. Stains
    without nodes map to None.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    stains = np.asarray(stains, dtype=str)
    if scores.shape[0] != stains.shape[0]:
        raise ShapeError("scores and stains must align")
    out = {}
    for s in sorted(set(stains.tolist())):
        p = scores[stains == s]
        if p.size == 0:
            out[s] = None
            continue
        nz = p[p > 0]
        out[s] = float(-(nz * np.log(nz)).sum())
    return out


def stain_interaction(dst, src, beta, node_stains, stain_list=None):
    """Mean attention over directed edges grouped by unordered stain pair.

    ``dst``/``src`` index ``node_stains``; self-loops are skipped. Returns
    ``(stains, matrix)`` with NaN where no edge of that pair exists.
    """
    dst = np.asarray(dst, dtype=np.int64).reshape(-1)
    src = np.asarray(src, dtype=np.int64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if not dst.shape == src.shape == beta.shape:
        raise ShapeError("dst, src and beta must have equal length")
    node_stains = np.asarray(node_stains, dtype=str)
    stains = sorted(stain_list) if stain_list is not None else sorted(set(node_stains.tolist()))
    idx = {s: i for i, s in enumerate(stains)}
    total = np.zeros((len(stains), len(stains)))
    count = np.zeros((len(stains), len(stains)), dtype=np.int64)
    keep = dst != src
    for u, v, b in zip(dst[keep], src[keep], beta[keep]):
        i, j = sorted((idx[node_stains[u]], idx[node_stains[v]]))
        total[i, j] += b
        count[i, j] += 1
    total = total + np.triu(total, 1).T
    count = count + np.triu(count, 1).T
    with np.errstate(invalid="ignore", divide="ignore"):
        mat = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return stains, mat


def record_interaction(record):
    """Interaction matrix pooled over the GAT attention of every layer."""
    n = record.node_stains.shape[0]
    dst = np.concatenate([layer.att_dst for layer in record.layers]) if record.layers else np.zeros(0, np.int64)
    src = np.concatenate([layer.att_src for layer in record.layers]) if record.layers else np.zeros(0, np.int64)
    beta = np.concatenate([layer.att_beta for layer in record.layers]) if record.layers else np.zeros(0)
    if dst.size and dst.max() >= n:
        raise ShapeError("edge endpoint outside the recorded node range")
    return stain_interaction(dst, src, beta, record.node_stains)


def layer_importance(weights):
    """Attention mass each token receives, averaged over heads and queries."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 3 or w.shape[1] != w.shape[2] or w.shape[1] < 1:
        raise ShapeError(f"expected heads x L x L weights, got {w.shape}")
    return w.mean(axis=(0, 1))


def minmax_normalize(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def cumulative_scores(record, num_nodes):
    """Sum of each node's per-layer score over the layers it entered."""
    acc = np.zeros(num_nodes)
    for layer in record.layers:
        acc[layer.node_ids] += layer.layer_scores.reshape(-1)
    return acc


@dataclass
class HeatmapEntry:
    slide_id: str
    x: float
    y: float
    score: float


def node_heatmap(record, graph):
    """Min-max normalized cumulative node scores keyed by slide and position."""
    scores = minmax_normalize(cumulative_scores(record, graph.num_nodes))
    return [
        HeatmapEntry(str(graph.slide_ids[i]), float(graph.coords[i, 0]), float(graph.coords[i, 1]), float(scores[i]))
        for i in range(graph.num_nodes)
    ]


def sparsification_trace(record):
    """Surviving node ids and typed edges before each pooling step, plus the final survivors.

    Entry 0 is the input graph; entry t+1 is what pooling at layer t kept.
    """
    trace = []
    for layer in record.layers:
        trace.append(_trace_entry(layer.node_ids, layer.edges, layer.edge_types))
    if record.layers:
        last = record.layers[-1]
        trace.append(_trace_entry(np.sort(last.retained_ids), last.pruned_edges, last.pruned_edge_types))
    return trace


def _trace_entry(nodes, edges, types):
    return {
        "nodes": [int(i) for i in nodes],
        "edges": [
            [int(u), int(v), EDGE_TYPE_NAMES.get(int(t), str(int(t)))]
            for (u, v), t in zip(np.asarray(edges).reshape(-1, 2), np.asarray(types).reshape(-1))
        ],
    }


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: NaN becomes None, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


@dataclass
class StainReport:
    patient_id: str
    label: int | None
    probability: float
    alpha_layers: list
    alpha: dict
    entropy_layers: list
    entropy: dict
    interaction_stains: list
    interaction: np.ndarray
    layer_importance: np.ndarray
    heatmap: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def to_dict(self):
        return _clean(
            {
                "patient_id": self.patient_id,
                "label": self.label,
                "probability": self.probability,
                "alpha": self.alpha,
                "alpha_layers": self.alpha_layers,
                "entropy": self.entropy,
                "entropy_layers": self.entropy_layers,
                "interaction": {"stains": self.interaction_stains, "matrix": self.interaction},
                "layer_importance": self.layer_importance,
                "sparsification": self.trace,
            }
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def heatmap_csv(self):
        lines = ["slide_id,x,y,score"]
        lines += [f"{e.slide_id},{e.x!r},{e.y!r},{e.score!r}" for e in self.heatmap]
        return "\n".join(lines) + "\n"


def build_report(graph, record, probability, label=None):
    per_layer, agg = stain_attention_summary(record)
    entropies = []
    for layer in record.layers:
        stains = record.node_stains[layer.node_ids]
        entropies.append(stain_entropy(layer.layer_scores, stains))
    stains, inter = record_interaction(record)
    return StainReport(
        patient_id=graph.patient_id,
        label=None if label is None else int(label),
        probability=float(probability),
        alpha_layers=per_layer,
        alpha=agg,
        entropy_layers=entropies,
        entropy=entropies[0],
        interaction_stains=stains,
        interaction=inter,
        layer_importance=layer_importance(record.mhsa_weights),
        heatmap=node_heatmap(record, graph),
        trace=sparsification_trace(record),
    )


def class_summary(reports):
    """Per class label: mean aggregate stain weight and mean entropy per stain."""
    groups = {}
    for r in reports:
        groups.setdefault(r.label, []).append(r)
    out = {}
    for label, group in sorted(groups.items(), key=lambda kv: (kv[0] is None, kv[0])):
        stains = _sorted_stains(*(r.alpha for r in group))
        entropy = {}
        for s in stains:
            vals = [r.entropy[s] for r in group if r.entropy.get(s) is not None]
            entropy[s] = float(np.mean(vals)) if vals else None
        out[str(label)] = {
            "patients": len(group),
            "alpha": {s: float(np.mean([r.alpha.get(s, 0.0) for r in group])) for s in stains},
            "entropy": entropy,
        }
    return out


def heatmap_pgm(entries, slide_id):
    """Binary grayscale PGM of one slide's heatmap on its integer coordinate grid."""
    pts = [e for e in entries if e.slide_id == slide_id]
    if not pts:
        raise ValueError(f"no heatmap entries for slide {slide_id!r}")
    xs = np.array([int(round(e.x)) for e in pts])
    ys = np.array([int(round(e.y)) for e in pts])
    x0, y0 = xs.min(), ys.min()
    w, h = xs.max() - x0 + 1, ys.max() - y0 + 1
    img = np.zeros((h, w), dtype=np.uint8)
    for e, x, y in zip(pts, xs, ys):
        img[y - y0, x - x0] = int(round(255 * e.score))
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
