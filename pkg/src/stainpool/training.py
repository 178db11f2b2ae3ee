"""Optimizer, stratified splits, the per-fold training loop and evaluation metrics."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import _kernels
from .errors import ConfigError, DomainError, TrainingError
from .model import forward, init_params, predict_proba
from .tensor import Tape, Tensor, cross_entropy

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "f1", "precision", "recall", "auc", "ap")
IMPROVEMENT = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    max_epochs: int = 200
    patience: int = 15
    folds: int = 5
    holdout_fraction: float = 0.2
    seed: int = 42

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, t, config):
    """One AdamW update in place: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""
    if t < 1:
        raise ValueError("step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p -= config.lr * update + config.lr * config.weight_decay * p
    return params


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


@dataclass
class FoldPlan:
    holdout: np.ndarray
    folds: list  # [(train_idx, val_idx), ...]

    def to_dict(self):
        return {
            "holdout": self.holdout.tolist(),
            "folds": [{"train": tr.tolist(), "val": va.tolist()} for tr, va in self.folds],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["holdout"], dtype=np.int64),
            [(np.asarray(f["train"], dtype=np.int64), np.asarray(f["val"], dtype=np.int64)) for f in d["folds"]],
        )


def stratified_split(labels, folds, holdout_fraction, seed):
    """Label-stratified hold-out set plus ``folds`` stratified (train, val) partitions."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("stratification needs at least two classes")
    rng = np.random.default_rng(seed)
    holdout, chunks = [], [[] for _ in range(folds)]
    # rotate the chunk offset per class so remainders spread across folds
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_hold = int(round(holdout_fraction * idx.size))
        holdout.extend(idx[:n_hold].tolist())
        rest = idx[n_hold:]
        if rest.size < folds:
            raise ConfigError(
                f"class {c!r} has {rest.size} samples after hold-out, fewer than {folds} folds"
            )
        for j, part in enumerate(np.array_split(rest, folds)):
            chunks[(j + offset) % folds].extend(part.tolist())
        offset += rest.size % folds
    plan = []
    for f in range(folds):
        val = np.array(sorted(chunks[f]), dtype=np.int64)
        train = np.array(sorted(i for g, ch in enumerate(chunks) if g != f for i in ch), dtype=np.int64)
        plan.append((train, val))
    return FoldPlan(np.array(sorted(holdout), dtype=np.int64), plan)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def roc_auc(scores, labels):
    """Mann-Whitney AUC with half credit for ties; None when a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels):
    """Step-wise area ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.any(labels == 1) or np.all(labels == 1):
        return None
    return _kernels.average_precision_sweep(scores, (labels == 1).astype(np.int64))


def eval_metrics(scores, labels):
    """Accuracy at 0.5, macro F1/precision/recall, AUC and AP for binary labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.size == 0:
        raise ValueError("no samples to evaluate")
    pred = (scores >= 0.5).astype(np.int64)
    precisions, recalls, f1s = [], [], []
    for c in (0, 1):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return {
        "accuracy": float(np.mean(pred == labels)),
        "f1": float(np.mean(f1s)),
        "precision": float(np.mean(precisions)),
        "recall": float(np.mean(recalls)),
        "auc": roc_auc(scores, labels),
        "ap": average_precision(scores, labels),
    }


def aggregate_metrics(per_fold):
    """Mean and standard error (sample std / sqrt(n)) of each metric across folds."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([m[name] for m in per_fold if m.get(name) is not None], dtype=np.float64)
        if vals.size == 0:
            out[name] = {"mean": None, "se": None}
            continue
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[name] = {"mean": float(vals.mean()), "se": se}
    return out


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def evaluate(graphs, labels, params, model_config):
    """Mean loss, class-1 probabilities and metrics over ``graphs`` in eval mode."""
    probs, losses = [], []
    for g, y in zip(graphs, labels):
        logits, _ = forward(g, params, model_config, training=False)
        losses.append(cross_entropy(logits, int(y)).item())
        p = np.exp(logits.data - logits.data.max())
        probs.append(p[1] / p.sum())
    probs = np.array(probs)
    metrics = eval_metrics(probs, labels)
    metrics["loss"] = float(np.mean(losses))
    return metrics, probs


def train_step(graph, label, params, state, t, model_config, train_config, rng):
    with Tape() as tape:
        tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        logits, _ = forward(graph, tensors, model_config, training=True, rng=rng)
        loss = cross_entropy(logits, int(label))
    grads = tape.gradient(loss, list(tensors.values()))
    adamw_step(params, dict(zip(tensors, grads)), state, t, train_config)
    return loss.item()


def train_fold(graphs, labels, fold, model_config, train_config, fold_index=0, on_epoch=None):
    """Train on ``fold = (train_idx, val_idx)``; returns (best params, history).

    Params are kept from the epoch with the best validation accuracy (earliest
    on ties). Training stops once validation loss, accuracy and AUC have all
    failed to improve by more than 1e-6 for ``patience`` consecutive epochs.
    """
    train_idx, val_idx = (np.asarray(i, dtype=np.int64) for i in fold)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation sets must be non-empty")
    labels = np.asarray(labels)
    rng = np.random.default_rng([train_config.seed, fold_index])
    params = init_params(model_config)
    state = AdamState()
    val_graphs = [graphs[i] for i in val_idx]
    val_labels = labels[val_idx]

    best = {"loss": math.inf, "accuracy": -math.inf, "auc": -math.inf}
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0
    history = []
    wait = 0
    step = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(train_idx)
        total = 0.0
        for i in order:
            step += 1
            try:
                loss = train_step(graphs[i], labels[i], params, state, step, model_config, train_config, rng)
            except DomainError as err:
                raise TrainingError(str(err), epoch) from err
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            total += loss
        try:
            val, _ = evaluate(val_graphs, val_labels, params, model_config)
        except DomainError as err:
            raise TrainingError(str(err), epoch) from err
        if not all(math.isfinite(a) for a in params_norms(params)):
            raise TrainingError("non-finite parameters", epoch)
        entry = {
            "epoch": epoch,
            "train_loss": total / train_idx.size,
            "val_loss": val["loss"],
            "val_acc": val["accuracy"],
            "val_auc": val["auc"],
        }
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)

        improved = False
        if val["loss"] < best["loss"] - IMPROVEMENT:
            best["loss"] = val["loss"]
            improved = True
        if val["accuracy"] > best["accuracy"] + IMPROVEMENT:
            best["accuracy"] = val["accuracy"]
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
            improved = True
        if val["auc"] is not None and val["auc"] > best["auc"] + IMPROVEMENT:
            best["auc"] = val["auc"]
            improved = True
        wait = 0 if improved else wait + 1
        if wait >= train_config.patience:
            log.debug("early stop at epoch %d (best accuracy epoch %d)", epoch, best_epoch)
            break
    for entry in history:
        entry["best_epoch"] = best_epoch
    return best_params, history


def params_norms(params):
    return [float(np.linalg.norm(v)) for v in params.values()]


def format_history_line(entry):
    auc = "nan" if entry["val_auc"] is None else repr(entry["val_auc"])
    return (
        f"epoch={entry['epoch']} train_loss={entry['train_loss']!r} "
        f"val_loss={entry['val_loss']!r} val_acc={entry['val_acc']!r} val_auc={auc}"
    )


def predict(graphs, params, model_config):
    return np.array([predict_proba(g, params, model_config)[0][1] for g in graphs])
