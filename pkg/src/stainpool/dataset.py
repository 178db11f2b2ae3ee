"""Labeled patient collections (before graph construction)."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PatientSample:
    """All patches of one patient's slide stack, row-aligned.

    ``edges`` is set only for structure-only tasks that bypass k-NN
    construction.
    """

    patient_id: str
    label: int
    features: np.ndarray
    coords: np.ndarray
    stains: np.ndarray
    slide_ids: np.ndarray
    stack_index: np.ndarray
    edges: np.ndarray | None = None

    @property
    def num_nodes(self):
        return self.features.shape[0]

    def slides(self):
        """``(slide_id, stain, stack_index, row_indices)`` in stack order."""
        out = []
        for sid in dict.fromkeys(self.slide_ids.tolist()):
            rows = np.flatnonzero(self.slide_ids == sid)
            out.append((sid, str(self.stains[rows[0]]), int(self.stack_index[rows[0]]), rows))
        return sorted(out, key=lambda s: (s[2], s[0]))


@dataclass
class Dataset:
    name: str
    patients: list
    label_map: dict = field(default_factory=lambda: {0: "class0", 1: "class1"})

    def __len__(self):
        return len(self.patients)

    @property
    def labels(self):
        return np.array([p.label for p in self.patients], dtype=np.int64)

    @property
    def stains(self):
        found = set()
        for p in self.patients:
            found.update(p.stains.tolist())
        return sorted(found)
