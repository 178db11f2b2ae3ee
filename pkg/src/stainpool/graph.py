"""Per-patient joint graph: feature-space k-NN merged with region adjacency."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import GraphError

FS = 1
RA = 2
BOTH = FS | RA
EDGE_TYPE_NAMES = {FS: "FS", RA: "RA", BOTH: "BOTH"}


@dataclass(frozen=True)
class PatchRecord:
    patient_id: str
    slide_id: str
    stain: str
    stack_index: int
    x: float
    y: float
    feature: np.ndarray


@dataclass
class PatientGraph:
    """Columnar node attributes plus an undirected typed edge list.

    Each unordered pair is stored once as ``(u, v)`` with ``u < v``.
    ``node_ids`` carries original node ids through pooling.
    """

    features: np.ndarray
    stains: np.ndarray
    slide_ids: np.ndarray
    stack_index: np.ndarray
    coords: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edge_types: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    node_ids: np.ndarray = None
    patient_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.features.shape[0]
        self.stains = np.asarray(self.stains, dtype=str)
        self.slide_ids = np.asarray(self.slide_ids, dtype=str)
        self.stack_index = np.asarray(self.stack_index, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(n, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_types = np.asarray(self.edge_types, dtype=np.int8).reshape(-1)
        if self.node_ids is None:
            self.node_ids = np.arange(n, dtype=np.int64)
        else:
            self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        for name in ("stains", "slide_ids", "stack_index", "node_ids"):
            if getattr(self, name).shape[0] != n:
                raise GraphError(f"{name} has {getattr(self, name).shape[0]} entries, expected {n}")
        if self.edge_types.shape[0] != self.edges.shape[0]:
            raise GraphError("edge_types and edges differ in length")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise GraphError("edge endpoint outside node range")

    @property
    def num_nodes(self):
        return self.features.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def node(self, i):
        return PatchRecord(
            self.patient_id,
            str(self.slide_ids[i]),
            str(self.stains[i]),
            int(self.stack_index[i]),
            float(self.coords[i, 0]),
            float(self.coords[i, 1]),
            self.features[i],
        )

    def adjacency(self, self_loops=False):
        n = self.num_nodes
        a = np.zeros((n, n))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        if self_loops:
            a[np.diag_indices(n)] = 1.0
        return a

    def subgraph(self, keep):
        """Induced subgraph on ``keep`` (local indices, in the given order)."""
        keep = np.asarray(keep, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[keep] = np.arange(keep.size)
        if self.num_edges:
            mapped = local[self.edges]
            alive = (mapped >= 0).all(axis=1)
            mapped = np.sort(mapped[alive], axis=1)
            types = self.edge_types[alive]
            order = np.lexsort((mapped[:, 1], mapped[:, 0]))
            mapped, types = mapped[order], types[order]
        else:
            mapped, types = self.edges, self.edge_types
        return replace(
            self,
            features=self.features[keep],
            stains=self.stains[keep],
            slide_ids=self.slide_ids[keep],
            stack_index=self.stack_index[keep],
            coords=self.coords[keep],
            edges=mapped,
            edge_types=types,
            node_ids=self.node_ids[keep],
        )

    def permuted(self, perm):
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        g = self.subgraph(perm)
        return replace(g, node_ids=self.node_ids[perm])

    def typed_edges(self):
        return [
            (int(u), int(v), EDGE_TYPE_NAMES[int(t)])
            for (u, v), t in zip(self.edges, self.edge_types)
        ]


def _pairs_from_neighbors(nbrs):
    rows = np.repeat(np.arange(nbrs.shape[0]), nbrs.shape[1])
    cols = nbrs.reshape(-1)
    ok = cols >= 0
    pairs = np.stack([rows[ok], cols[ok]], axis=1)
    return _canonical(pairs)


def _canonical(pairs):
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(np.asarray(pairs, dtype=np.int64), axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


def build_feature_knn(features, k):
    """Symmetrized k-NN edge set in feature space, as sorted ``(u, v)`` rows with u < v."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise GraphError("features must be a non-empty N x d matrix")
    if k < 1:
        raise GraphError("k must be >= 1")
    if not np.isfinite(features).all():
        raise GraphError("features must be finite")
    n = features.shape[0]
    cand = np.ones((n, n), dtype=bool)
    nbrs = _kernels.knn_select(np.ascontiguousarray(features), cand, int(k))
    return _pairs_from_neighbors(nbrs)


def build_region_adjacency(coords, slide_ids, stack_index, k):
    """Within-slide (x, y) k-NN plus k-NN into stack-adjacent slides, symmetrized."""
    coords = np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 2)
    slide_ids = np.asarray(slide_ids, dtype=str)
    stack_index = np.asarray(stack_index, dtype=np.int64)
    if k < 1:
        raise GraphError("k must be >= 1")
    same = slide_ids[:, None] == slide_ids[None, :]
    adjacent = np.abs(stack_index[:, None] - stack_index[None, :]) == 1
    within = _kernels.knn_select(coords, same, int(k))
    across = _kernels.knn_select(coords, adjacent & ~same, int(k))
    return _canonical(
        np.concatenate([_pairs_from_neighbors(within), _pairs_from_neighbors(across)])
    )


def merge_graphs(fs_edges, ra_edges, features, stains, slide_ids, stack_index, coords, patient_id=""):
    """Union of the two edge sets with FS / RA / BOTH types (elementwise max of adjacencies)."""
    n = np.asarray(features).shape[0]
    fs = _canonical(np.asarray(fs_edges, dtype=np.int64).reshape(-1, 2))
    ra = _canonical(np.asarray(ra_edges, dtype=np.int64).reshape(-1, 2))
    for e in (fs, ra):
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphError("edge references a node that does not exist")
    types = {}
    for u, v in fs:
        types[(int(u), int(v))] = FS
    for u, v in ra:
        types[(int(u), int(v))] = types.get((int(u), int(v)), 0) | RA
    keys = sorted(types)
    edges = np.array(keys, dtype=np.int64).reshape(-1, 2)
    return PatientGraph(
        features=features,
        stains=stains,
        slide_ids=slide_ids,
        stack_index=stack_index,
        coords=coords,
        edges=edges,
        edge_types=np.array([types[key] for key in keys], dtype=np.int8),
        patient_id=patient_id,
    )


def normalized_adjacency(graph, with_self_loops=True):
    """``D^-1/2 A D^-1/2`` on the dense adjacency (self-loops included in degree if flagged)."""
    if graph.num_nodes == 0:
        raise GraphError("graph has no nodes")
    a = graph.adjacency(self_loops=with_self_loops)
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = deg[nz] ** -0.5
    return inv[:, None] * a * inv[None, :]


def build_patient_graph(sample, knn_k):
    """Graph for a :class:`~stainpool.dataset.PatientSample`.

    Samples that carry explicit edges skip k-NN construction; their edges are
    typed RA.
    """
    if sample.edges is not None:
        return merge_graphs(
            np.zeros((0, 2)), sample.edges, sample.features, sample.stains,
            sample.slide_ids, sample.stack_index, sample.coords, sample.patient_id,
        )
    fs = build_feature_knn(sample.features, knn_k)
    ra = build_region_adjacency(sample.coords, sample.slide_ids, sample.stack_index, knn_k)
    return merge_graphs(
        fs, ra, sample.features, sample.stains, sample.slide_ids,
        sample.stack_index, sample.coords, sample.patient_id,
    )
