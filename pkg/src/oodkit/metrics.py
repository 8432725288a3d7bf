"""OOD evaluation metrics: ID accuracy, FPR@95, AUROC, AUPR_IN, AUPR_OUT.

Conventions are fixed for cross-run reproducibility: ties get 0.5 credit in
AUROC, the TPR threshold uses the lower (no interpolation) percentile, and
AUPR uses step interpolation over the distinct score thresholds.
"""

from dataclasses import dataclass

import numpy as np


class EmptyClass(Exception):
    pass


class LengthMismatch(Exception):
    pass


@dataclass
class MetricSummary:
    id_acc: float
    fpr_at_95: float
    auroc: float
    aupr_in: float
    aupr_out: float

    def to_dict(self):
        return {"id_acc": self.id_acc, "fpr_at_95": self.fpr_at_95,
                "auroc": self.auroc, "aupr_in": self.aupr_in,
                "aupr_out": self.aupr_out}


def _average_ranks(values):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(id_scores, ood_scores):
    """P(random ID score > random OOD score), ties counted 0.5."""
    id_scores = np.asarray(id_scores, dtype=float)
    ood_scores = np.asarray(ood_scores, dtype=float)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EmptyClass("auroc needs nonempty ID and OOD scores")
    ranks = _average_ranks(np.concatenate([id_scores, ood_scores]))
    n_id, n_ood = id_scores.size, ood_scores.size
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return u / (n_id * n_ood)


def pick_threshold(id_scores, tpr=0.95):
    """Score threshold keeping at least `tpr` of the ID scores above it.

    Lower-interpolation percentile: the ceil((1-tpr)*n)-th smallest score.
    """
    id_scores = np.asarray(id_scores, dtype=float)
    if id_scores.size == 0:
        raise EmptyClass("pick_threshold needs nonempty scores")
    # the small backoff keeps e.g. ceil(0.05 * 100) at 5 despite float noise
    k = max(1, int(np.ceil((1.0 - tpr) * id_scores.size - 1e-9)))
    return float(np.sort(id_scores)[k - 1])


def fpr_at_tpr(id_scores, ood_scores, tpr=0.95):
    """Fraction of OOD scores at or above the TPR threshold of the ID scores."""
    ood_scores = np.asarray(ood_scores, dtype=float)
    if ood_scores.size == 0:
        raise EmptyClass("fpr_at_tpr needs nonempty OOD scores")
    thr = pick_threshold(id_scores, tpr)
    return float(np.mean(ood_scores >= thr))


def aupr(pos_scores, neg_scores):
    """Area under precision-recall by step interpolation over all thresholds.

    A sample is predicted positive when its score >= threshold; thresholds
    sweep the distinct scores from high to low.
    """
    pos_scores = np.asarray(pos_scores, dtype=float)
    neg_scores = np.asarray(neg_scores, dtype=float)
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise EmptyClass("aupr needs nonempty positive and negative scores")
    thresholds = np.unique(np.concatenate([pos_scores, neg_scores]))[::-1]
    area = 0.0
    prev_recall = 0.0
    for thr in thresholds:
        tp = int(np.sum(pos_scores >= thr))
        fp = int(np.sum(neg_scores >= thr))
        recall = tp / pos_scores.size
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def aupr_in(id_scores, ood_scores):
    return aupr(id_scores, ood_scores)


def aupr_out(id_scores, ood_scores):
    """AUPR with OOD as the positive class (scores negated)."""
    return aupr(-np.asarray(ood_scores, dtype=float),
                -np.asarray(id_scores, dtype=float))


def id_accuracy(pred_labels, true_labels, restricted_to_id=True, n_id_classes=None):
    """Fraction correct; optionally restricted to rows with ID true labels."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise LengthMismatch(
            f"{pred_labels.shape} vs {true_labels.shape}")
    mask = np.ones(true_labels.shape, dtype=bool)
    if restricted_to_id and n_id_classes is not None:
        mask = true_labels <= n_id_classes
    if not mask.any():
        raise EmptyClass("no ID-labeled samples")
    return float(np.mean(pred_labels[mask] == true_labels[mask]))
