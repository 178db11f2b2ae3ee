"""``stainpool`` command line: generate, train, eval, explain."""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import explain as ex
from .errors import ConfigError, FormatError, StainPoolError, TrainingError
from .graph import build_patient_graph
from .io import (
    cache_key,
    dataset_digest,
    load_cached_graphs,
    load_dataset,
    save_dataset,
    store_cached_graphs,
)
from .model import ModelConfig, load_checkpoint, predict_proba, save_checkpoint
from .synth import SynthSpec, generate_csl_task, generate_patients
from .training import (
    FoldPlan,
    TrainConfig,
    aggregate_metrics,
    evaluate,
    format_history_line,
    stratified_split,
    train_fold,
)

log = logging.getLogger("stainpool")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors exit 1 (validation), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

_PLANTED_ONLY = ("signal", "signal_stain", "stains", "concentration", "stains_per_patient", "nodes_min", "nodes_max", "grid")


def cmd_generate(args):
    if args.task == "csl":
        given = [f"--{k.replace('_', '-')}" for k in _PLANTED_ONLY if getattr(args, k) is not None]
        if given:
            raise UsageError(f"{', '.join(given)} not valid with --task csl")
        ds = generate_csl_task(args.seed, n_patients=args.patients, stream=args.stream)
    else:
        if args.patients % 2:
            raise UsageError("--patients must be even for the balanced planted task")
        base = SynthSpec()
        lo = args.nodes_min if args.nodes_min is not None else base.nodes_per_slide[0]
        hi = args.nodes_max if args.nodes_max is not None else base.nodes_per_slide[1]
        spec = SynthSpec(
            patients_per_class=args.patients // 2,
            stains=tuple(args.stains.split(",")) if args.stains else base.stains,
            stains_per_patient=args.stains_per_patient,
            nodes_per_slide=(lo, hi),
            feature_dim=args.feature_dim,
            signal_stain=args.signal_stain or base.signal_stain,
            signal=base.signal if args.signal is None else args.signal,
            concentration=base.concentration if args.concentration is None else args.concentration,
            grid=args.grid or base.grid,
            seed=args.seed,
            stream=args.stream,
        )
        ds = generate_patients(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, args.out)
    counts = np.bincount(ds.labels, minlength=2)
    nodes = sum(p.num_nodes for p in ds.patients)
    print(f"{ds.name}: {len(ds)} patients ({counts[0]} / {counts[1]}), {nodes} nodes, stains {','.join(ds.stains)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _build_one(args):
    sample, k = args
    return build_patient_graph(sample, k)


def load_graphs(manifest, knn_k, jobs=1, cache_dir=None):
    """Dataset plus one graph per patient, reusing the on-disk cache when its key matches."""
    ds = load_dataset(manifest)
    if not ds.patients:
        raise ConfigError(f"{manifest} lists no patients")
    key = None
    if cache_dir is not None:
        key = cache_key(dataset_digest(manifest), knn_k)
        cached = load_cached_graphs(cache_dir, key)
        if cached is not None and [g.patient_id for g in cached] == [p.patient_id for p in ds.patients]:
            log.info("graph cache hit %s", key)
            return ds, cached
    work = [(p, knn_k) for p in ds.patients]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            graphs = list(pool.map(_build_one, work))
    else:
        graphs = [_build_one(w) for w in work]
    if cache_dir is not None:
        store_cached_graphs(cache_dir, key, graphs)
    return ds, graphs


def _model_config(args, in_dim):
    gat_heads = args.heads if args.heads is not None else args.gat_heads
    mhsa_heads = args.heads if args.heads is not None else args.mhsa_heads
    return ModelConfig(
        in_dim=in_dim,
        layers=args.layers,
        hidden_dim=args.hidden_dim,
        pe_dim=args.pe_dim,
        pool_ratio=args.pool_ratio,
        gat_heads=gat_heads,
        mhsa_heads=mhsa_heads,
        dropout=args.dropout,
        knn_k=args.knn_k,
        seed=args.seed,
    )


def _train_config(args):
    return TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        max_epochs=args.max_epochs,
        patience=args.patience,
        folds=args.folds,
        holdout_fraction=args.holdout,
        seed=args.seed,
    )


def _run_fold(job):
    graphs, labels, fold, k, mc, tc, holdout = job
    params, history = train_fold(graphs, labels, fold, mc, tc, fold_index=k)
    val, _ = evaluate([graphs[i] for i in fold[1]], labels[fold[1]], params, mc)
    hold = None
    if holdout.size:
        hold, _ = evaluate([graphs[i] for i in holdout], labels[holdout], params, mc)
    return params, history, val, hold


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args):
    tc = _train_config(args)
    _model_config(args, 1)  # reject bad model flags before touching the data
    ds, graphs = load_graphs(args.manifest, args.knn_k, args.jobs, cache_dir=os.path.join(args.out, "graphs"))
    mc = _model_config(args, graphs[0].features.shape[1])
    labels = ds.labels
    plan = stratified_split(labels, tc.folds, tc.holdout_fraction, tc.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "split.json"), plan.to_dict())
    _write_json(os.path.join(args.out, "config.json"), {"model": mc.to_dict(), "train": tc.to_dict()})

    jobs = [(graphs, labels, fold, k, mc, tc, plan.holdout) for k, fold in enumerate(plan.folds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]

    fold_reports = []
    for k, (params, history, val, hold) in enumerate(results):
        fdir = os.path.join(args.out, f"fold{k}")
        os.makedirs(fdir, exist_ok=True)
        best = history[-1]["best_epoch"] if history else 0
        save_checkpoint(os.path.join(fdir, "checkpoint.bxck"), mc, params, {"fold": k, "best_epoch": best})
        with open(os.path.join(fdir, "history.txt"), "w") as fh:
            fh.writelines(format_history_line(e) + "\n" for e in history)
        entry = {"fold": k, "best_epoch": best, "epochs": len(history), "validation": val, "holdout": hold}
        _write_json(os.path.join(fdir, "metrics.json"), entry)
        fold_reports.append(entry)
        print(f"fold {k}: best epoch {best}, val acc {val['accuracy']:.4f}"
              + (f", holdout acc {hold['accuracy']:.4f}" if hold else ""))

    report = {
        "dataset": ds.name,
        "patients": len(ds),
        "folds": fold_reports,
        "validation": aggregate_metrics([r["validation"] for r in fold_reports]),
    }
    if plan.holdout.size:
        report["holdout"] = aggregate_metrics([r["holdout"] for r in fold_reports])
    _write_json(os.path.join(args.out, "report.json"), report)
    summary = report.get("holdout", report["validation"])
    print("accuracy {mean:.4f} +/- {se:.4f}".format(**summary["accuracy"]))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / explain
# --------------------------------------------------------------------------


def _load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_compat(mc, graphs):
    d = graphs[0].features.shape[1]
    if d != mc.in_dim:
        raise ConfigError(f"checkpoint expects {mc.in_dim} input features, data has {d}")


def _select_split(args, n):
    if args.split_file is None:
        if args.split != "all":
            raise UsageError("--split other than 'all' needs --split-file")
        return np.arange(n)
    with open(args.split_file) as fh:
        plan = FoldPlan.from_dict(json.load(fh))
    name = args.split
    if name == "all":
        return np.arange(n)
    if name == "holdout":
        return plan.holdout
    kind, _, k = name.partition(":")
    if kind in ("train", "val") and k.isdigit() and int(k) < len(plan.folds):
        return plan.folds[int(k)][0 if kind == "train" else 1]
    raise UsageError(f"unknown split {name!r}; use all, holdout, train:K or val:K")


def cmd_eval(args):
    mc, params, _ = _load_model(args.checkpoint)
    ds, graphs = load_graphs(args.manifest, mc.knn_k, args.jobs)
    _check_compat(mc, graphs)
    idx = _select_split(args, len(graphs))
    if idx.size == 0:
        raise UsageError(f"split {args.split!r} is empty")
    metrics, _ = evaluate([graphs[i] for i in idx], ds.labels[idx], params, mc)
    text = json.dumps({"split": args.split, "patients": int(idx.size), "metrics": metrics}, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_explain(args):
    mc, params, _ = _load_model(args.checkpoint)
    ds, graphs = load_graphs(args.manifest, mc.knn_k, args.jobs)
    _check_compat(mc, graphs)
    ids = [p.patient_id for p in ds.patients]
    if args.patients:
        wanted = [s for s in args.patients.split(",") if s]
        unknown = [s for s in wanted if s not in ids]
        if unknown:
            raise UsageError(f"unknown patient id(s) {', '.join(unknown)}; valid ids: {', '.join(ids)}")
    else:
        wanted = ids
    os.makedirs(args.out, exist_ok=True)
    reports = []
    for pid in wanted:
        i = ids.index(pid)
        probs, record = predict_proba(graphs[i], params, mc)
        report = ex.build_report(graphs[i], record, probs[1], ds.patients[i].label)
        pdir = os.path.join(args.out, pid)
        os.makedirs(pdir, exist_ok=True)
        with open(os.path.join(pdir, "report.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(pdir, "heatmap.csv"), "w") as fh:
            fh.write(report.heatmap_csv())
        if args.raster:
            for sid in dict.fromkeys(e.slide_id for e in report.heatmap):
                with open(os.path.join(pdir, f"{sid}.pgm"), "wb") as fh:
                    fh.write(ex.heatmap_pgm(report.heatmap, sid))
        reports.append(report)
    if not args.patients:
        _write_json(os.path.join(args.out, "class_summary.json"), ex.class_summary(reports))
    print(f"wrote {len(reports)} report(s) to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_model_flags(p):
    d = ModelConfig(in_dim=1)
    t = TrainConfig()
    p.add_argument("--knn-k", type=int, default=d.knn_k)
    p.add_argument("--pool-ratio", type=float, default=d.pool_ratio)
    p.add_argument("--layers", type=int, default=d.layers)
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    p.add_argument("--pe-dim", type=int, default=d.pe_dim)
    p.add_argument("--gat-heads", type=int, default=d.gat_heads)
    p.add_argument("--mhsa-heads", type=int, default=d.mhsa_heads)
    p.add_argument("--heads", type=int, default=None, help="set both GAT and MHSA head counts")
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--patience", type=int, default=t.patience)
    p.add_argument("--max-epochs", type=int, default=t.max_epochs)
    p.add_argument("--folds", type=int, default=t.folds)
    p.add_argument("--holdout", type=float, default=t.holdout_fraction)


def build_parser():
    parser = _Parser(prog="stainpool", description="Multistain graph attention with stain-aware pooling.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--task", choices=("planted", "csl"), default="planted")
    g.add_argument("--patients", type=int, default=200)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--stream", type=int, default=0)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--signal", type=float)
    g.add_argument("--signal-stain")
    g.add_argument("--stains", help="comma-separated stain names")
    g.add_argument("--stains-per-patient", type=int)
    g.add_argument("--concentration", type=float)
    g.add_argument("--nodes-min", type=int)
    g.add_argument("--nodes-max", type=int)
    g.add_argument("--grid", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="cross-validated training")
    t.add_argument("manifest")
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--out", required=True)
    _add_model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a split")
    e.add_argument("manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split-file")
    e.add_argument("--split", default="all", help="all, holdout, train:K or val:K")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="per-patient stain reports and heatmaps")
    x.add_argument("manifest")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--patients", help="comma-separated ids (default: all, plus a per-class summary)")
    x.add_argument("--raster", action="store_true", help="also write one PGM image per slide")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"stainpool: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, TrainingError) as err:
        print(f"stainpool: error: {err}", file=sys.stderr)
        return EXIT_IO
    except (StainPoolError, ValueError) as err:
        print(f"stainpool: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
