"""Evaluation: mask resampling, classification scores, agreement, ranking curves.

Predictions come out of the network at mask resolution (one step per 2^B
samples); ground truth lives at sample resolution for arousals and at
30-second-epoch resolution for stages. Everything here brings the two sides
onto common grids and scores them.

Headline arousal AUPRC/AUROC are pooled over all test samples; per-record
scores are reported separately for distribution plots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import STAGE_NAMES, UNSCORED, Record, epochs_for, samples_per_epoch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                       # [C, C] of (true, predicted) counts
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if not self.labels:
            self.labels = tuple(str(i) for i in range(self.counts.shape[0]))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True
    f1_defined: bool = True


@dataclass
class ClassificationReport:
    per_class: list[ClassScores]
    accuracy: float
    macro_f1: float


def epoch_stage_probabilities(stage_mask: np.ndarray, factor: int, valid_len: int,
                              fs: float) -> np.ndarray:
    """Mean stage-probability row per 30-second epoch, [n_epochs, C].

    Each mask step is assigned to the epoch containing its center sample; an
    epoch without any step center borrows the nearest step's row.
    """
    stage_mask = np.asarray(stage_mask)
    steps, n_classes = stage_mask.shape
    if valid_len > steps * factor:
        raise ValueError(f"valid_len {valid_len} exceeds mask coverage {steps * factor}")
    spe = samples_per_epoch(fs)
    n_epochs = epochs_for(valid_len, fs)
    centers = np.arange(steps) * factor + factor // 2
    usable = centers < valid_len
    epoch_idx = (centers[usable] / spe).astype(np.int64)
    sums = np.zeros((n_epochs, n_classes))
    counts = np.zeros(n_epochs)
    np.add.at(sums, epoch_idx, stage_mask[usable])
    np.add.at(counts, epoch_idx, 1.0)
    rows = np.empty((n_epochs, n_classes))
    for e in range(n_epochs):
        if counts[e] > 0:
            rows[e] = sums[e] / counts[e]
        else:
            nearest = min(steps - 1, int((e + 0.5) * spe) // factor)
            rows[e] = stage_mask[nearest]
    return rows


def resample_prediction_masks(
    arousal_mask: np.ndarray,
    stage_mask: np.ndarray,
    factor: int,
    valid_len: int,
    fs: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Bring the two prediction masks to their label resolutions.

    The arousal mask is upsampled by repeating each step value `factor` times
    and truncating to valid_len. The per-epoch stage prediction is the argmax
    of the mean probability row over the steps whose centers fall inside that
    epoch (ties resolve to the lowest class index).
    """
    arousal_mask = np.asarray(arousal_mask).reshape(-1)
    steps = np.asarray(stage_mask).shape[0]
    if valid_len > steps * factor:
        raise ValueError(f"valid_len {valid_len} exceeds mask coverage {steps * factor}")
    arousal_samples = np.repeat(arousal_mask, factor)[:valid_len]
    rows = epoch_stage_probabilities(stage_mask, factor, valid_len, fs)
    stage_codes = rows.argmax(axis=1).astype(np.uint8)
    return arousal_samples, stage_codes


def confusion_matrix(true_codes, predicted_codes, num_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs; unscored (255) true items are skipped."""
    t = np.asarray(true_codes, dtype=np.int64)
    p = np.asarray(predicted_codes, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    keep = t != UNSCORED
    t, p = t[keep], p[keep]
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ValueError("true codes out of range")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError("predicted codes out of range")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    labels = STAGE_NAMES if num_classes == len(STAGE_NAMES) else ()
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), labels)


def classification_scores(cm: ConfusionMatrix) -> ClassificationReport:
    """One-vs-rest precision/recall/F1 per class, overall accuracy, macro F1.

    A zero denominator yields a 0 score with its `defined` flag cleared, so
    the macro average always exists.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class = []
    for i in range(counts.shape[0]):
        tp = float(counts[i, i])
        fp = float(counts[:, i].sum() - counts[i, i])
        fn = float(counts[i, :].sum() - counts[i, i])
        p_def = tp + fp > 0
        r_def = tp + fn > 0
        precision = tp / (tp + fp) if p_def else 0.0
        recall = tp / (tp + fn) if r_def else 0.0
        f_def = precision + recall > 0
        f1 = 2.0 * precision * recall / (precision + recall) if f_def else 0.0
        per_class.append(ClassScores(precision, recall, f1, p_def, r_def, f_def))
    accuracy = float(np.trace(counts)) / total
    macro_f1 = float(np.mean([c.f1 for c in per_class]))
    return ClassificationReport(per_class, accuracy, macro_f1)


def cohens_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement between the two axes of a confusion matrix."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(counts) / total
    p_e = float((counts.sum(axis=1) * counts.sum(axis=0)).sum()) / (total * total)
    if p_e >= 1.0:
        raise ValueError("degenerate single-class matrix: chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


# ranking metrics ------------------------------------------------------------------

def _sorted_by_score(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    order = np.argsort(-s, kind="stable")
    return s[order], y[order]


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC curve vertices (fpr, tpr, threshold), one per distinct score, plus origin."""
    s, y = _sorted_by_score(scores, labels)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("roc needs at least one positive and one negative label")
    cum_tp = np.cumsum(y)
    cum_fp = np.cumsum(1 - y)
    last_of_group = np.nonzero(np.append(np.diff(s) != 0, True))[0]
    tpr = np.concatenate([[0.0], cum_tp[last_of_group] / pos])
    fpr = np.concatenate([[0.0], cum_fp[last_of_group] / neg])
    thresholds = np.concatenate([[np.inf], s[last_of_group]])
    return fpr, tpr, thresholds


def auroc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (tie-corrected)."""
    fpr, tpr, _ = roc_points(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def pr_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision-recall curve vertices (recall, precision, threshold)."""
    s, y = _sorted_by_score(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise ValueError("precision-recall needs at least one positive label")
    ranks = np.arange(1, y.size + 1)
    cum_tp = np.cumsum(y)
    last_of_group = np.nonzero(np.append(np.diff(s) != 0, True))[0]
    recall = cum_tp[last_of_group] / pos
    precision = cum_tp[last_of_group] / ranks[last_of_group]
    return recall, precision, s[last_of_group]


def auprc(scores, labels) -> float:
    """Average precision: precision at each positive's rank, weighted by 1/P.

    Descending stable sort; no trapezoidal interpolation.
    """
    s, y = _sorted_by_score(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise ValueError("average precision needs at least one positive label")
    ranks = np.arange(1, y.size + 1)
    precision_at_rank = np.cumsum(y) / ranks
    return float(precision_at_rank[y == 1].sum() / pos)


def arousal_epoch_labels(values, fs: float, threshold: float = 0.5,
                         min_duration_s: float = 0.0) -> np.ndarray:
    """Presence/absence per 30-second epoch: 1 iff any sample >= threshold.

    min_duration_s > 0 instead requires a contiguous run of at least that many
    seconds above threshold (off by default).
    """
    v = np.asarray(values).reshape(-1)
    n = v.shape[0]
    spe = samples_per_epoch(fs)
    n_epochs = epochs_for(n, fs)
    above = v >= threshold
    out = np.zeros(n_epochs, dtype=np.uint8)
    min_run = int(round(min_duration_s * fs))
    for e in range(n_epochs):
        lo = int(e * spe)
        hi = min(int((e + 1) * spe), n)
        seg = above[lo:hi]
        if min_run <= 1:
            out[e] = 1 if seg.any() else 0
        else:
            padded = np.concatenate([[0], seg.astype(np.int8), [0]])
            edges = np.flatnonzero(np.diff(padded))
            runs = edges[1::2] - edges[0::2]
            out[e] = 1 if runs.size and runs.max() >= min_run else 0
    return out


# pooled evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    stage_confusion: ConfusionMatrix
    stage_scores: ClassificationReport
    stage_kappa: float
    arousal_sample: dict
    arousal_epoch: dict
    per_record: list[dict]
    threshold: float = 0.5

    def to_dict(self) -> dict:
        stage_classes = {
            name: {
                "precision": c.precision, "recall": c.recall, "f1": c.f1,
                "precision_defined": c.precision_defined,
                "recall_defined": c.recall_defined,
                "f1_defined": c.f1_defined,
            }
            for name, c in zip(self.stage_confusion.labels, self.stage_scores.per_class)
        }
        return {
            "threshold": self.threshold,
            "stage": {
                "confusion": self.stage_confusion.counts.tolist(),
                "labels": list(self.stage_confusion.labels),
                "per_class": stage_classes,
                "accuracy": self.stage_scores.accuracy,
                "macro_f1": self.stage_scores.macro_f1,
                "kappa": self.stage_kappa,
            },
            "arousal_sample": self.arousal_sample,
            "arousal_epoch": self.arousal_epoch,
            "per_record": self.per_record,
        }


def _binary_block(true_binary: np.ndarray, pred_binary: np.ndarray) -> dict:
    cm = confusion_matrix(true_binary, pred_binary, 2)
    report = classification_scores(cm)
    positive = report.per_class[1]
    return {
        "precision": positive.precision,
        "recall": positive.recall,
        "f1": positive.f1,
        "accuracy": report.accuracy,
        "kappa": cohens_kappa(cm),
    }


def evaluate(records: list[Record], predictions: list[tuple[np.ndarray, np.ndarray]],
             threshold: float = 0.5) -> EvalReport:
    """Pool label-resolution predictions over records and score both tasks.

    `predictions[i]` is (arousal probability per sample, stage code per epoch)
    for records[i], already resampled via resample_prediction_masks. Stage
    metrics skip unscored epochs; per-record AUPRC/AUROC entries are None when
    a record has only one class.
    """
    if not records:
        raise ValueError("no records to evaluate")
    if len(records) != len(predictions):
        raise ValueError("records and predictions differ in length")

    arousal_true = np.concatenate([r.arousal for r in records]).astype(np.int64)
    arousal_score = np.concatenate([np.asarray(p[0]).reshape(-1) for p in predictions])
    if arousal_true.shape != arousal_score.shape:
        raise ValueError("arousal predictions do not cover the records sample-for-sample")
    stage_true = np.concatenate([r.stages for r in records]).astype(np.int64)
    stage_pred = np.concatenate([np.asarray(p[1]).reshape(-1) for p in predictions]).astype(np.int64)

    stage_cm = confusion_matrix(stage_true, stage_pred, len(STAGE_NAMES))
    stage_report = classification_scores(stage_cm)
    stage_kappa = cohens_kappa(stage_cm)

    sample_block = _binary_block(arousal_true, (arousal_score >= threshold).astype(np.int64))
    sample_block["auprc"] = auprc(arousal_score, arousal_true)
    sample_block["auroc"] = auroc(arousal_score, arousal_true)

    epoch_true = np.concatenate([
        arousal_epoch_labels(r.arousal, r.sampling_rate_hz, threshold=0.5) for r in records
    ])
    epoch_pred = np.concatenate([
        arousal_epoch_labels(p[0], r.sampling_rate_hz, threshold=threshold)
        for r, p in zip(records, predictions)
    ])
    epoch_block = _binary_block(epoch_true.astype(np.int64), epoch_pred.astype(np.int64))

    per_record = []
    for r, (prob, _) in zip(records, predictions):
        labels = r.arousal.astype(np.int64)
        entry = {"id": r.id, "auprc": None, "auroc": None}
        if labels.any():
            entry["auprc"] = auprc(prob, labels)
            if not labels.all():
                entry["auroc"] = auroc(prob, labels)
        per_record.append(entry)

    return EvalReport(
        stage_confusion=stage_cm,
        stage_scores=stage_report,
        stage_kappa=stage_kappa,
        arousal_sample=sample_block,
        arousal_epoch=epoch_block,
        per_record=per_record,
        threshold=threshold,
    )
