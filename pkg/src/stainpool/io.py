"""On-disk dataset layout: JSON manifest, BXF1 feature files, coordinate CSVs, graph cache."""

import hashlib
import json
import os
import struct

import numpy as np

from .dataset import Dataset, PatientSample
from .errors import FormatError
from .graph import PatientGraph

FEATURE_MAGIC = b"BXF1"
_HEADER = struct.Struct("<4sII")


def write_features(path, features):
    x = np.ascontiguousarray(features, dtype="<f8")
    if x.ndim != 2:
        raise FormatError("feature matrix must be 2-D")
    if not np.all(np.isfinite(x)):
        raise FormatError("feature values must be finite")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: too short for a feature header")
    magic, n, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if len(blob) - _HEADER.size != 8 * n * d:
        raise FormatError(f"{path}: payload has {len(blob) - _HEADER.size} bytes, header says {8 * n * d}")
    x = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite feature values")
    return x


def write_pairs(path, rows, fmt):
    rows = np.asarray(rows).reshape(-1, 2)
    with open(path, "w") as fh:
        for a, b in rows:
            fh.write(fmt.format(a, b) + "\n")


def read_pairs(path, dtype):
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=dtype)
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.shape[1] != 2:
        raise FormatError(f"{path}: expected two columns, got {arr.shape[1]}")
    return arr


def _float_pair(a, b):
    return f"{float(a)!r},{float(b)!r}"


def save_dataset(dataset, out_dir):
    """Write ``manifest.json`` plus per-slide feature and coordinate files."""
    for sub in ("features", "coords"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    entries = []
    for p in dataset.patients:
        slides = []
        for sid, stain, stack, rows in p.slides():
            feat = f"features/{sid}.bxf"
            crd = f"coords/{sid}.csv"
            write_features(os.path.join(out_dir, feat), p.features[rows])
            with open(os.path.join(out_dir, crd), "w") as fh:
                fh.writelines(_float_pair(x, y) + "\n" for x, y in p.coords[rows])
            slides.append(
                {"slide_id": sid, "stain": stain, "stack_index": stack, "feature_file": feat, "coords_file": crd}
            )
        entry = {"id": p.patient_id, "label": int(p.label), "slides": slides}
        if p.edges is not None:
            # edges index the patient's nodes in slide (stack) order
            order = np.concatenate([rows for *_, rows in p.slides()])
            inverse = np.empty_like(order)
            inverse[order] = np.arange(order.size)
            os.makedirs(os.path.join(out_dir, "edges"), exist_ok=True)
            edge_file = f"edges/{p.patient_id}.csv"
            e = np.sort(inverse[np.asarray(p.edges)], axis=1)
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
            write_pairs(os.path.join(out_dir, edge_file), e, "{},{}")
            entry["edges_file"] = edge_file
        entries.append(entry)
    manifest = {
        "name": dataset.name,
        "label_map": {str(k): v for k, v in sorted(dataset.label_map.items())},
        "stains": dataset.stains,
        "patients": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: {err}") from None
    for key in ("patients", "label_map"):
        if key not in manifest:
            raise FormatError(f"{path}: missing {key!r}")
    return manifest


def load_dataset(path):
    """Read a manifest and every file it references (paths relative to the manifest)."""
    manifest = load_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    declared = set(manifest.get("stains", []))
    patients = []
    for entry in manifest["patients"]:
        feats, coords, stains, slides, stacks = [], [], [], [], []
        for s in sorted(entry["slides"], key=lambda s: (int(s["stack_index"]), s["slide_id"])):
            if declared and s["stain"] not in declared:
                raise FormatError(f"patient {entry['id']}: stain {s['stain']!r} not declared")
            x = read_features(os.path.join(root, s["feature_file"]))
            c = read_pairs(os.path.join(root, s["coords_file"]), np.float64)
            if c.shape[0] != x.shape[0]:
                raise FormatError(f"slide {s['slide_id']}: {c.shape[0]} coords for {x.shape[0]} feature rows")
            n = x.shape[0]
            feats.append(x)
            coords.append(c)
            stains += [s["stain"]] * n
            slides += [s["slide_id"]] * n
            stacks += [int(s["stack_index"])] * n
        if not feats:
            raise FormatError(f"patient {entry['id']} has no slides")
        edges = None
        if entry.get("edges_file"):
            edges = read_pairs(os.path.join(root, entry["edges_file"]), np.int64)
        patients.append(
            PatientSample(
                patient_id=str(entry["id"]),
                label=int(entry["label"]),
                features=np.concatenate(feats),
                coords=np.concatenate(coords),
                stains=np.array(stains),
                slide_ids=np.array(slides),
                stack_index=np.array(stacks, dtype=np.int64),
                edges=edges,
            )
        )
    label_map = {int(k): v for k, v in manifest["label_map"].items()}
    return Dataset(name=manifest.get("name", ""), patients=patients, label_map=label_map)


# --------------------------------------------------------------------------
# graph cache
# --------------------------------------------------------------------------


def dataset_digest(manifest_path):
    """sha256 over the manifest and every file it references."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    h = hashlib.sha256()
    with open(manifest_path, "rb") as fh:
        h.update(fh.read())
    manifest = load_manifest(manifest_path)
    for entry in manifest["patients"]:
        refs = [f for s in entry["slides"] for f in (s["feature_file"], s["coords_file"])]
        if entry.get("edges_file"):
            refs.append(entry["edges_file"])
        for rel in refs:
            with open(os.path.join(root, rel), "rb") as fh:
                h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


def cache_key(digest, knn_k):
    return hashlib.sha256(f"{digest}:knn_k={int(knn_k)}".encode()).hexdigest()[:24]


def graph_to_dict(g):
    return {
        "patient_id": g.patient_id,
        "features": g.features.tolist(),
        "stains": g.stains.tolist(),
        "slide_ids": g.slide_ids.tolist(),
        "stack_index": g.stack_index.tolist(),
        "coords": g.coords.tolist(),
        "edges": g.edges.tolist(),
        "edge_types": g.edge_types.tolist(),
    }


def graph_from_dict(d):
    return PatientGraph(
        features=np.asarray(d["features"], dtype=np.float64).reshape(len(d["stains"]), -1),
        stains=np.asarray(d["stains"], dtype=str),
        slide_ids=np.asarray(d["slide_ids"], dtype=str),
        stack_index=np.asarray(d["stack_index"], dtype=np.int64),
        coords=np.asarray(d["coords"], dtype=np.float64).reshape(-1, 2),
        edges=np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
        edge_types=np.asarray(d["edge_types"], dtype=np.int8),
        patient_id=d["patient_id"],
    )


def load_cached_graphs(cache_dir, key):
    path = os.path.join(cache_dir, f"graphs-{key}.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return [graph_from_dict(d) for d in json.load(fh)]


def store_cached_graphs(cache_dir, key, graphs):
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"graphs-{key}.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump([graph_to_dict(g) for g in graphs], fh)
    os.replace(tmp, path)
    return path
