"""Synthetic multistain patients with planted, controllable class structure."""

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, PatientSample
from .errors import ConfigError


@dataclass(frozen=True)
class SynthSpec:
    """Planted-stain task parameters.

    Class 0 features are N(0, I) for every stain. In class 1 every node of
    ``signal_stain`` is shifted by ``signal`` in every dimension, and a
    ``concentration`` fraction of them sits in one contiguous (x, y) blob.
    ``stains_per_patient`` (when set) samples that many stains per patient,
    always keeping the signal stain.
    """

    patients_per_class: int = 50
    stains: tuple = ("HE", "CD20", "CD68")
    stains_per_patient: int | None = None
    nodes_per_slide: tuple = (8, 16)
    feature_dim: int = 16
    signal_stain: str = "CD20"
    signal: float = 2.0
    concentration: float = 1.0
    grid: int = 12
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if self.signal_stain not in self.stains:
            raise ConfigError(f"signal stain {self.signal_stain!r} not in {self.stains}")
        if self.signal < 0 or not 0.0 <= self.concentration <= 1.0:
            raise ConfigError("signal must be >= 0 and concentration in [0, 1]")
        lo, hi = self.nodes_per_slide
        if not 1 <= lo <= hi or hi > self.grid * self.grid:
            raise ConfigError("nodes_per_slide must satisfy 1 <= lo <= hi <= grid^2")
        if self.stains_per_patient is not None and not 1 <= self.stains_per_patient <= len(self.stains):
            raise ConfigError("stains_per_patient out of range")
        if self.patients_per_class < 1 or self.feature_dim < 1:
            raise ConfigError("need at least one patient per class and one feature")


def _grid_cells(grid):
    yy, xx = np.divmod(np.arange(grid * grid), grid)
    return np.stack([xx, yy], axis=1).astype(np.float64)


def _blob_cells(cells, count, rng):
    """The ``count`` cells nearest a random center (ties by cell index)."""
    center = cells[rng.integers(len(cells))]
    d2 = ((cells - center) ** 2).sum(axis=1)
    return np.lexsort((np.arange(len(cells)), d2))[:count]


def generate_patient(spec, index, label):
    rng = np.random.default_rng([spec.seed, spec.stream, index])
    stains = list(spec.stains)
    if spec.stains_per_patient is not None and spec.stains_per_patient < len(stains):
        others = [s for s in stains if s != spec.signal_stain]
        picked = rng.choice(len(others), size=spec.stains_per_patient - 1, replace=False)
        keep = {spec.signal_stain, *(others[i] for i in picked)}
        stains = [s for s in stains if s in keep]
    cells = _grid_cells(spec.grid)
    pid = f"P{spec.stream:02d}{index:04d}"
    feats, coords, stain_col, slide_col, stack_col = [], [], [], [], []
    for z, stain in enumerate(stains):
        n = int(rng.integers(spec.nodes_per_slide[0], spec.nodes_per_slide[1] + 1))
        x = rng.normal(size=(n, spec.feature_dim))
        if label == 1 and stain == spec.signal_stain:
            x += spec.signal
            n_blob = int(round(spec.concentration * n))
            blob = _blob_cells(cells, n_blob, rng)
            rest = np.setdiff1d(np.arange(len(cells)), blob)
            scattered = rng.choice(rest, size=n - n_blob, replace=False)
            chosen = np.concatenate([blob, scattered])
        else:
            chosen = rng.choice(len(cells), size=n, replace=False)
        feats.append(x)
        coords.append(cells[chosen])
        stain_col += [stain] * n
        slide_col += [f"{pid}-{stain}"] * n
        stack_col += [z] * n
    return PatientSample(
        patient_id=pid,
        label=int(label),
        features=np.concatenate(feats),
        coords=np.concatenate(coords),
        stains=np.array(stain_col),
        slide_ids=np.array(slide_col),
        stack_index=np.array(stack_col, dtype=np.int64),
    )


def generate_patients(spec):
    """Balanced planted-stain dataset; patient i has label ``i % 2``."""
    n = 2 * spec.patients_per_class
    patients = [generate_patient(spec, i, i % 2) for i in range(n)]
    return Dataset(name="planted", patients=patients, label_map={0: "null", 1: "signal"})


def _cycles(n_nodes, cycle_len):
    edges = []
    for start in range(0, n_nodes, cycle_len):
        for j in range(cycle_len):
            edges.append((start + j, start + (j + 1) % cycle_len))
    return np.array(edges, dtype=np.int64)


def generate_csl_task(seed, n_patients=200, sizes=(6, 12, 18, 24), feature_dim=4, stream=0):
    """Triangle-union (class 0) vs hexagon-union (class 1) graphs.

    Every node has degree 2 and the same constant feature vector, so topology
    is the only signal. Edges are explicit; node order is shuffled per patient.
    """
    patients = []
    for i in range(n_patients):
        rng = np.random.default_rng([seed, stream, i])
        label = i % 2
        n = int(sizes[int(rng.integers(len(sizes)))])
        edges = _cycles(n, 3 if label == 0 else 6)
        perm = rng.permutation(n)
        edges = np.sort(perm[edges], axis=1)
        pid = f"C{stream:02d}{i:04d}"
        yy, xx = np.divmod(np.arange(n), 6)
        patients.append(
            PatientSample(
                patient_id=pid,
                label=label,
                features=np.ones((n, feature_dim)),
                coords=np.stack([xx, yy], axis=1).astype(np.float64),
                stains=np.array(["CSL"] * n),
                slide_ids=np.array([f"{pid}-CSL"] * n),
                stack_index=np.zeros(n, dtype=np.int64),
                edges=edges[np.lexsort((edges[:, 1], edges[:, 0]))],
            )
        )
    return Dataset(name="csl", patients=patients, label_map={0: "triangles", 1: "hexagons"})
