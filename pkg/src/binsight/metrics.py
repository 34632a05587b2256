"""Confusion matrices, per-class recall/precision/F1, and training history."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .model import ModelConfig, build_model, predict_batch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[true][predicted]
    classes: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_from_labels(y_true, y_pred, classes: Sequence[str]) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    k = len(classes)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"{y_true.shape} true labels vs {y_pred.shape} predictions")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= k):
        raise DataError(f"labels must lie in [0, {k})")
    counts = np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, tuple(classes))


def confusion(model, dataset) -> ConfusionMatrix:
    if len(dataset.classes) != model.config.num_classes:
        raise ShapeError(f"dataset has {len(dataset.classes)} classes, model {model.config.num_classes}")
    probs = predict_batch(model, dataset.images)
    return confusion_from_labels(dataset.labels, probs.argmax(axis=1), dataset.classes)


def accuracy(matrix: ConfusionMatrix) -> float:
    if matrix.total == 0:
        raise DataError("accuracy of an empty confusion matrix")
    return float(np.trace(matrix.counts) / matrix.total)


# --------------------------------------------------------------------------
# scores
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassScore:
    name: str
    tp_rate: float
    fp_rate: float
    fn_rate: float
    recall: float
    precision: float
    f1: float
    degenerate: bool = False


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf_from_rates(tp: float, fp: float, fn: float, name: str = "") -> ClassScore:
    """Recall, precision and F1 from true-positive / false-positive / false-negative rates.

    A zero denominator scores 0 and sets ``degenerate``.
    """
    degenerate = False
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    return ClassScore(name, tp, fp, fn, recall, precision, f1_score(precision, recall), degenerate)


def class_scores(matrix: ConfusionMatrix) -> list:
    """Counts-based scores; the rate fields are counts divided by the class's support."""
    c = matrix.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    support = c.sum(axis=1)
    scores = []
    for i, name in enumerate(matrix.classes):
        s = prf_from_rates(tp[i], fp[i], fn[i], name)
        scale = support[i] if support[i] > 0 else 1.0
        scores.append(ClassScore(name, tp[i] / scale, fp[i] / scale, fn[i] / scale,
                                 s.recall, s.precision, s.f1, s.degenerate or support[i] == 0))
    return scores


def macro_summary(scores: Sequence[ClassScore]) -> tuple[float, float, float]:
    """Unweighted mean recall, mean precision, and the harmonic mean of those two."""
    if not scores:
        raise DataError("no class scores to summarise")
    mean_recall = float(np.mean([s.recall for s in scores]))
    mean_precision = float(np.mean([s.precision for s in scores]))
    return mean_recall, mean_precision, f1_score(mean_precision, mean_recall)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _tp_fp_fn(scores, matrix: Optional[ConfusionMatrix]):
    if matrix is None:
        return [(s.tp_rate, s.fp_rate, s.fn_rate) for s in scores]
    c = matrix.counts
    tp = np.diag(c)
    return [(int(tp[i]), int(c[:, i].sum() - tp[i]), int(c[i].sum() - tp[i])) for i in range(len(tp))]


def report_table(scores: Sequence[ClassScore], matrix: Optional[ConfusionMatrix] = None) -> str:
    rows = _tp_fp_fn(scores, matrix)
    lines = [f"{'Class':<12}{'TP':>10}{'FP':>10}{'FN':>10}{'Recall':>11}{'Precision':>11}{'F1':>11}"]
    for s, (tp, fp, fn) in zip(scores, rows):
        flag = "  (degenerate)" if s.degenerate else ""
        lines.append(f"{s.name:<12}{tp:>10}{fp:>10}{fn:>10}{s.recall:>11.6f}{s.precision:>11.6f}{s.f1:>11.6f}{flag}")
    r, p, f = macro_summary(scores)
    lines.append(f"{'macro':<12}{'':>30}{r:>11.6f}{p:>11.6f}{f:>11.6f}")
    if matrix is not None:
        lines.append(f"accuracy {accuracy(matrix):.6f} over {matrix.total} samples")
    return "\n".join(lines)


def report_csv(scores: Sequence[ClassScore], matrix: Optional[ConfusionMatrix] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "tp", "fp", "fn", "recall", "precision", "f1"])
    for s, (tp, fp, fn) in zip(scores, _tp_fp_fn(scores, matrix)):
        w.writerow([s.name, tp, fp, fn, f"{s.recall:.6f}", f"{s.precision:.6f}", f"{s.f1:.6f}"])
    r, p, f = macro_summary(scores)
    w.writerow(["macro", "", "", "", f"{r:.6f}", f"{p:.6f}", f"{f:.6f}"])
    return buf.getvalue()


# --------------------------------------------------------------------------
# training history
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: Optional[float]
    seconds: float


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def table(self) -> str:
        lines = [f"{'epoch':>5}{'loss':>10}{'train_acc':>11}{'val_acc':>9}{'secs':>8}"]
        for r in self.records:
            val = f"{r.val_accuracy:.4f}" if r.val_accuracy is not None else "-"
            lines.append(f"{r.epoch:>5}{r.train_loss:>10.4f}{r.train_accuracy:>11.4f}{val:>9}{r.seconds:>8.1f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# accuracy vs training-set size
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    fraction: float
    mode: str
    mean_accuracy: float
    spread: float
    accuracies: tuple


def accuracy_vs_trainsize(entries, fractions: Sequence[float], seeds: Sequence[int],
                          modes: Sequence[str] = ("gray", "entropy"), epochs: int = 5,
                          batch_size: int = 32, holdout_fraction: float = 0.3, holdout_seed: int = 0,
                          kernel_size: int = 1, workers: int = 1) -> list:
    """Train one fresh model per (fraction, mode, seed) and score it on a fixed held-out set.

    ``fraction`` is the share of the whole corpus used for training; it must
    not exceed ``1 - holdout_fraction``.  ``spread`` is max - min accuracy
    over seeds.
    """
    from .data import SplitSpec, TrainConfig, encode_corpus, split_dataset, train_count
    from .train import fit

    n = len(entries)
    pool_share = 1.0 - holdout_fraction
    rows = []
    for mode in modes:
        ds = encode_corpus(entries, mode, workers=workers)
        pool, held_out = split_dataset(ds, SplitSpec(pool_share, holdout_seed))
        for fraction in fractions:
            k = train_count(n, fraction)
            if k < 1 or k > len(pool):
                raise DataError(f"fraction {fraction} needs {k} training samples; pool has {len(pool)}")
            accs = []
            for seed in seeds:
                pick = np.random.default_rng((seed, 1)).permutation(len(pool))[:k]
                train = pool.subset(pick)
                h, w, c = ds.images.shape[1:]
                model = build_model(ModelConfig(h, w, c, len(ds.classes), kernel_size, seed=seed),
                                    class_names=ds.classes)
                fit(model, train, TrainConfig(batch_size, epochs, seed, mode))
                accs.append(accuracy(confusion(model, held_out)))
            rows.append(SweepRow(fraction, mode, float(np.mean(accs)), float(np.ptp(accs)), tuple(accs)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "mode", "mean_accuracy", "spread", "runs"])
    for r in rows:
        w.writerow([f"{r.fraction:g}", r.mode, f"{r.mean_accuracy:.6f}", f"{r.spread:.6f}", len(r.accuracies)])
    return buf.getvalue()
