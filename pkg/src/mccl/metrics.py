"""Multi-label and multi-class evaluation metrics.

Conventions, fixed here because they move reported numbers:

* F1 uses a hard threshold (default 0.5) and the 0/0 -> 0 rule, so a class
  with neither predictions nor positives scores 0, not 1.
* Average precision is the mean of precision evaluated at each positive in
  score-descending order, with ties broken by sample index and no
  interpolation.
* AUC is the Mann-Whitney pairwise-concordance form with ties counting
  0.5; classes lacking positives or negatives are skipped and logged.
* Accuracy is the rate at which the top-scoring class is a true positive,
  which reduces to standard accuracy for one-hot truths.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    macro_f1: float
    micro_f1: float
    samples_f1: float
    mean_ap: float
    accuracy: float
    macro_auc: float
    per_class_f1: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    per_class_ap: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def scalar_items(self) -> list[tuple[str, float]]:
        return [
            ("macro_f1", self.macro_f1),
            ("micro_f1", self.micro_f1),
            ("samples_f1", self.samples_f1),
            ("mean_ap", self.mean_ap),
            ("accuracy", self.accuracy),
            ("macro_auc", self.macro_auc),
        ]

    def as_text(self) -> str:
        """Machine-readable key: value lines."""
        lines = [f"{key}: {value:.6f}" for key, value in self.scalar_items()]
        lines += [f"class_f1.{c}: {v:.6f}" for c, v in enumerate(self.per_class_f1)]
        lines += [f"class_ap.{c}: {v:.6f}" for c, v in enumerate(self.per_class_ap)]
        return "\n".join(lines) + "\n"

    def as_table(self) -> str:
        names = [key for key, _ in self.scalar_items()]
        values = [f"{value:8.4f}" for _, value in self.scalar_items()]
        widths = [max(len(n), len(v)) for n, v in zip(names, values)]
        head = "  ".join(n.rjust(w) for n, w in zip(names, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
        return head + "\n" + row


def _f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    denom = 2.0 * tp + fp + fn
    return np.divide(2.0 * tp, denom, out=np.zeros_like(denom, dtype=np.float64), where=denom > 0)


def f1_suite(
    scores: np.ndarray, truths: np.ndarray, threshold: float = 0.5
) -> tuple[float, float, float, np.ndarray]:
    """(macro, micro, samples) F1 plus the per-class vector.

    ``scores`` may be probabilities (thresholded at ``threshold``) or an
    already-binary matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.shape != truths.shape or scores.ndim != 2:
        raise DataError(f"f1_suite: shape mismatch {scores.shape} vs {truths.shape}")
    if scores.shape[0] == 0:
        raise DataError("f1_suite: no samples")
    preds = (scores >= threshold).astype(np.int64)
    pos = truths.astype(np.int64)

    tp = (preds & pos).sum(axis=0).astype(np.float64)
    fp = (preds & ~pos.astype(bool)).sum(axis=0).astype(np.float64)
    fn = ((1 - preds) & pos).sum(axis=0).astype(np.float64)

    per_class = _f1_from_counts(tp, fp, fn)
    macro = float(per_class.mean())
    micro = float(_f1_from_counts(tp.sum(), fp.sum(), fn.sum()))

    s_tp = (preds & pos).sum(axis=1).astype(np.float64)
    s_fp = (preds & ~pos.astype(bool)).sum(axis=1).astype(np.float64)
    s_fn = ((1 - preds) & pos).sum(axis=1).astype(np.float64)
    samples = float(_f1_from_counts(s_tp, s_fp, s_fn).mean())
    return macro, micro, samples, per_class


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Mean of precision at each positive, ranked by descending score.

    Ties are broken by sample index (stable sort), matching the documented
    evaluation convention.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    order = np.argsort(-scores, kind="stable")
    ranked = truth[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(scores) + 1)
    precisions = hits[ranked] / ranks[ranked]
    return float(precisions.mean())


def mean_average_precision(
    scores: np.ndarray, truths: np.ndarray
) -> tuple[float, np.ndarray]:
    """mAP over classes that have at least one positive; others get NaN."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    per_class = np.full(truths.shape[1], np.nan)
    for c in range(truths.shape[1]):
        if truths[:, c].sum() == 0:
            logger.warning("mAP: class %d has no positives; skipped", c)
            continue
        per_class[c] = average_precision(scores[:, c], truths[:, c])
    evaluated = ~np.isnan(per_class)
    if not evaluated.any():
        raise DataError("mAP: no class has a positive sample")
    return float(per_class[evaluated].mean()), per_class


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.arange(1, len(values) + 1)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    sums = np.zeros(len(counts))
    np.add.at(sums, inverse, ranks)
    return sums[inverse] / counts[inverse]


def binary_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC: need both positives and negatives")
    ranks = _average_ranks(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy_and_auc(scores: np.ndarray, truths: np.ndarray) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.shape != truths.shape or scores.ndim != 2 or scores.shape[0] == 0:
        raise DataError("accuracy_and_auc: bad or empty score matrix")
    top = np.argmax(scores, axis=1)
    accuracy = float(truths[np.arange(len(top)), top].astype(bool).mean())

    aucs = []
    for c in range(truths.shape[1]):
        n_pos = int(truths[:, c].sum())
        if n_pos == 0 or n_pos == len(truths):
            logger.warning("AUC: class %d lacks positives or negatives; skipped", c)
            continue
        aucs.append(binary_auc(scores[:, c], truths[:, c]))
    macro_auc = float(np.mean(aucs)) if aucs else float("nan")
    if not aucs:
        logger.warning("AUC: no class had both positives and negatives")
    return accuracy, macro_auc


def evaluate_predictions(
    scores: np.ndarray, truths: np.ndarray, threshold: float = 0.5
) -> MetricsReport:
    """Full metric suite over a score matrix and binary ground truth."""
    macro, micro, samples, per_class_f1 = f1_suite(scores, truths, threshold)
    mean_ap, per_class_ap = mean_average_precision(scores, truths)
    accuracy, macro_auc = accuracy_and_auc(scores, truths)
    return MetricsReport(
        macro_f1=macro,
        micro_f1=micro,
        samples_f1=samples,
        mean_ap=mean_ap,
        accuracy=accuracy,
        macro_auc=macro_auc,
        per_class_f1=per_class_f1,
        per_class_ap=per_class_ap,
    )
