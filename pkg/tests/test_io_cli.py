import json
import os

import numpy as np
import pytest

from stainpool.cli import main
from stainpool.dataset import Dataset, PatientSample
from stainpool.errors import FormatError
from stainpool.graph import build_patient_graph
from stainpool.io import (
    cache_key,
    dataset_digest,
    graph_from_dict,
    graph_to_dict,
    load_dataset,
    read_features,
    save_dataset,
    write_features,
)
from stainpool.model import ModelConfig, init_params, param_shapes, save_checkpoint
from stainpool.synth import SynthSpec, generate_csl_task, generate_patients

SMALL_GEN = ["--patients", "20", "--feature-dim", "4", "--nodes-min", "3", "--nodes-max", "5", "--grid", "4"]
SMALL_TRAIN = ["--layers", "1", "--hidden-dim", "4", "--pe-dim", "2", "--gat-heads", "1", "--mhsa-heads", "1",
               "--folds", "2", "--max-epochs", "2", "--patience", "2", "--dropout", "0"]


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


class TestFeatureFile:
    def test_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(5, 3))
        write_features(tmp_path / "f.bxf", x)
        blob = (tmp_path / "f.bxf").read_bytes()
        assert blob[:4] == b"BXF1" and len(blob) == 12 + 8 * 15
        assert read_features(tmp_path / "f.bxf").tobytes() == x.tobytes()

    def test_truncated(self, tmp_path):
        write_features(tmp_path / "f.bxf", np.ones((2, 2)))
        (tmp_path / "g.bxf").write_bytes((tmp_path / "f.bxf").read_bytes()[:-1])
        with pytest.raises(FormatError):
            read_features(tmp_path / "g.bxf")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.bxf").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(FormatError):
            read_features(tmp_path / "f.bxf")

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_features(tmp_path / "f.bxf", np.array([[np.nan]]))


class TestDatasetFiles:
    def test_planted_round_trip(self, tmp_path):
        ds = generate_patients(SynthSpec(patients_per_class=3, feature_dim=4))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path / "manifest.json")
        assert back.label_map == ds.label_map and back.name == ds.name
        for p, q in zip(ds.patients, back.patients):
            assert p.patient_id == q.patient_id and p.label == q.label
            np.testing.assert_array_equal(p.features, q.features)
            np.testing.assert_array_equal(p.coords, q.coords)
            np.testing.assert_array_equal(p.stains, q.stains)

    def test_explicit_edges_round_trip(self, tmp_path):
        ds = generate_csl_task(0, n_patients=4)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path / "manifest.json")
        for p, q in zip(ds.patients, back.patients):
            assert build_patient_graph(p, 5).edges.tolist() == build_patient_graph(q, 5).edges.tolist()

    def test_undeclared_stain(self, tmp_path):
        save_dataset(generate_patients(SynthSpec(patients_per_class=1)), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["stains"] = ["HE"]
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "manifest.json")

    def test_cache_key_covers_content_and_k(self, tmp_path):
        save_dataset(generate_patients(SynthSpec(patients_per_class=2)), tmp_path)
        digest = dataset_digest(tmp_path / "manifest.json")
        assert cache_key(digest, 5) != cache_key(digest, 6)
        f = next((tmp_path / "features").iterdir())
        write_features(f, read_features(f) + 1.0)
        assert dataset_digest(tmp_path / "manifest.json") != digest

    def test_graph_dict_round_trip(self, rng):
        g = build_patient_graph(generate_patients(SynthSpec(patients_per_class=1)).patients[1], 5)
        h = graph_from_dict(json.loads(json.dumps(graph_to_dict(g))))
        assert h.edges.tolist() == g.edges.tolist() and h.features.tobytes() == g.features.tobytes()


@pytest.fixture
def planted(tmp_path):
    assert main(["generate", *SMALL_GEN, "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data" / "manifest.json"


class TestGenerate:
    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["generate", "--patients", "100", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert len(a) == 1 + 2 * 300 and a == b

    def test_csl(self, tmp_path, capsys):
        assert main(["generate", "--task", "csl", "--patients", "8", "--out", str(tmp_path)]) == 0
        assert len(load_dataset(tmp_path / "manifest.json")) == 8
        assert "csl" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv",
        [["--task", "csl", "--signal", "2"], ["--patients", "7"], ["--bogus"], ["--task", "nope"]],
    )
    def test_invalid_combination_exit_1(self, tmp_path, capsys, argv):
        assert_exit(["generate", *argv, "--out", str(tmp_path)], 1)
        assert "usage" in capsys.readouterr().err


def assert_exit(argv, code):
    try:
        rc = main(argv)
    except SystemExit as e:
        rc = e.code
    assert rc == code


class TestTrain:
    def test_report_shape_and_artifacts(self, tmp_path, planted):
        out = tmp_path / "run"
        assert main(["train", str(planted), *SMALL_TRAIN, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        for part in ("validation", "holdout"):
            assert set(report[part]) == {"accuracy", "f1", "precision", "recall", "auc", "ap"}
            assert all(set(v) == {"mean", "se"} for v in report[part].values())
        for k in (0, 1):
            assert (out / f"fold{k}" / "checkpoint.bxck").exists()
            assert (out / f"fold{k}" / "history.txt").read_text().count("\n") >= 1
        assert len(list((out / "graphs").glob("graphs-*.json"))) == 1

    def test_cache_rebuilt_for_new_k(self, tmp_path, planted):
        out = tmp_path / "run"
        for k in ("5", "3"):
            assert main(["train", str(planted), *SMALL_TRAIN, "--knn-k", k, "--out", str(out)]) == 0
        assert len(list((out / "graphs").glob("graphs-*.json"))) == 2

    def test_reference_flags_accepted(self, tmp_path, planted):
        argv = ["train", str(planted), "--pool-ratio", "0.7", "--layers", "4", "--pe-dim", "20", "--heads", "2",
                "--dropout", "0.2", "--hidden-dim", "8", "--folds", "2", "--max-epochs", "1", "--out", str(tmp_path)]
        assert main(argv) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())["model"]
        assert (cfg["gat_heads"], cfg["mhsa_heads"], cfg["pe_dim"], cfg["layers"]) == (2, 2, 20, 4)

    def test_bad_pool_ratio(self, tmp_path, planted):
        assert_exit(["train", str(planted), "--pool-ratio", "1.5", "--out", str(tmp_path)], 1)

    def test_too_small_to_stratify(self, tmp_path):
        main(["generate", "--patients", "4", "--out", str(tmp_path / "d")])
        assert_exit(["train", str(tmp_path / "d" / "manifest.json"), "--out", str(tmp_path / "r")], 1)

    def test_missing_manifest(self, tmp_path):
        assert_exit(["train", str(tmp_path / "none.json"), "--out", str(tmp_path / "r")], 2)


def separable_dataset(root, n=12):
    """One-feature patients: class 1 strictly positive, class 0 strictly negative."""
    rng = np.random.default_rng(0)
    patients = []
    for i in range(n):
        y = i % 2
        x = rng.uniform(1.0, 2.0, size=(4, 1)) * (1 if y else -1)
        patients.append(PatientSample(f"T{i}", y, x, rng.integers(0, 3, size=(4, 2)).astype(float),
                                      np.array(["A"] * 4), np.array([f"T{i}-A"] * 4), np.zeros(4, dtype=np.int64)))
    return save_dataset(Dataset("toy", patients), root)


def sign_reader(path):
    """Hand-set weights whose logit margin is the mean pooled feature."""
    c = ModelConfig(in_dim=1, layers=1, hidden_dim=1, pe_dim=0, gat_heads=1, mhsa_heads=1, dropout=0.0)
    p = {k: np.zeros(s) for k, s in param_shapes(c).items()}
    p["block0.proj"][:] = 1.0
    p["block0.gat.weight0"][:] = 1.0
    p["mhsa.wv"] = np.eye(2)
    p["mhsa.wo"] = np.eye(2)
    p["head.weight"][0] = [-1.0, 1.0]
    save_checkpoint(path, c, p)


class TestEval:
    def test_perfect_toy_checkpoint(self, tmp_path, capsys):
        manifest = separable_dataset(tmp_path / "d")
        sign_reader(tmp_path / "m.bxck")
        assert main(["eval", manifest, "--checkpoint", str(tmp_path / "m.bxck"), "--out", str(tmp_path / "e")]) == 0
        res = json.loads((tmp_path / "e" / "eval.json").read_text())
        assert res["metrics"]["accuracy"] == 1.0 and res["metrics"]["auc"] == 1.0
        assert json.loads(capsys.readouterr().out) == res

    def test_random_params_near_chance(self, tmp_path, capsys):
        main(["generate", "--patients", "40", "--feature-dim", "4", "--signal", "0", "--out", str(tmp_path / "d")])
        capsys.readouterr()
        manifest = str(tmp_path / "d" / "manifest.json")
        accs = []
        for seed in range(5):
            c = ModelConfig(in_dim=4, layers=2, hidden_dim=8, pe_dim=4, dropout=0.0, seed=seed)
            save_checkpoint(tmp_path / f"m{seed}", c, init_params(c))
            assert main(["eval", manifest, "--checkpoint", str(tmp_path / f"m{seed}")]) == 0
            accs.append(json.loads(capsys.readouterr().out)["metrics"]["accuracy"])
        assert 0.3 <= np.mean(accs) <= 0.7

    def test_empty_split(self, tmp_path, planted):
        sign_reader(tmp_path / "m.bxck")
        c = ModelConfig(in_dim=4, layers=1, hidden_dim=4, pe_dim=0, dropout=0.0)
        save_checkpoint(tmp_path / "m4", c, init_params(c))
        split = {"holdout": [], "folds": [{"train": list(range(10)), "val": list(range(10, 20))}] * 2}
        (tmp_path / "split.json").write_text(json.dumps(split))
        argv = ["eval", str(planted), "--checkpoint", str(tmp_path / "m4"), "--split-file", str(tmp_path / "split.json")]
        assert_exit([*argv, "--split", "holdout"], 1)
        assert_exit([*argv, "--split", "val:9"], 1)
        assert main([*argv, "--split", "val:1"]) == 0

    def test_wrong_feature_width(self, tmp_path, planted):
        sign_reader(tmp_path / "m.bxck")
        assert_exit(["eval", str(planted), "--checkpoint", str(tmp_path / "m.bxck")], 1)


class TestExplain:
    @pytest.fixture
    def trained(self, tmp_path, planted):
        assert main(["train", str(planted), *SMALL_TRAIN, "--out", str(tmp_path / "run")]) == 0
        return planted, tmp_path / "run" / "fold0" / "checkpoint.bxck"

    def test_single_patient(self, tmp_path, trained):
        manifest, ckpt = trained
        pid = load_dataset(manifest).patients[1].patient_id
        out = tmp_path / "x"
        assert main(["explain", str(manifest), "--checkpoint", str(ckpt), "--patients", pid, "--raster",
                     "--out", str(out)]) == 0
        report = json.loads((out / pid / "report.json").read_text())
        assert sum(report["alpha"].values()) == pytest.approx(1.0, abs=1e-12)
        assert (out / pid / "heatmap.csv").read_text().startswith("slide_id,x,y,score\n")
        assert len(list((out / pid).glob("*.pgm"))) == 3
        assert not (out / "class_summary.json").exists()

    def test_all_patients_class_summary(self, tmp_path, trained):
        manifest, ckpt = trained
        assert main(["explain", str(manifest), "--checkpoint", str(ckpt), "--out", str(tmp_path / "x")]) == 0
        summary = json.loads((tmp_path / "x" / "class_summary.json").read_text())
        assert set(summary) == {"0", "1"}
        for part in summary.values():
            assert part["patients"] == 10
            assert set(part["alpha"]) == {"HE", "CD20", "CD68"}
            assert set(part["entropy"]) == {"HE", "CD20", "CD68"}

    def test_unknown_patient(self, tmp_path, trained, capsys):
        manifest, ckpt = trained
        assert_exit(["explain", str(manifest), "--checkpoint", str(ckpt), "--patients", "nobody",
                     "--out", str(tmp_path / "x")], 1)
        err = capsys.readouterr().err
        assert "nobody" in err and load_dataset(manifest).patients[0].patient_id in err

    def test_missing_checkpoint(self, tmp_path, planted):
        assert_exit(["explain", str(planted), "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path)], 2)
