"""
Classification metrics for fine-tuned models.

This module provides:
1. accuracy and macro F1 (one-vs-rest, zero-division counted as 0)
2. AUROC from the rank-sum statistic, macro-averaged over classes that have
   both positives and negatives; ties earn half credit
3. EvalResult with per-class precision/recall/F1 and one-vs-rest TP/TN/FP/FN
4. JSON output and mean/std aggregation across split repeats
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import json
import logging

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import accuracy_score, f1_score, multilabel_confusion_matrix, precision_recall_fscore_support

from utils.error_handling import ContractError, DimensionError, MLEvaluationError

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("accuracy", "macro_f1", "auroc")


def _check_pair(preds, labels):
    preds = np.asarray(preds).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    if preds.size == 0 or labels.size == 0:
        raise ContractError("Metrics need at least one sample")
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DimensionError("Predictions and labels must be 1-D and equally long",
                             {"preds": preds.shape, "labels": labels.shape})
    return preds, labels


def accuracy(preds, labels) -> float:
    """Fraction of exact matches."""
    preds, labels = _check_pair(preds, labels)
    return float(accuracy_score(labels, preds))


def _absent_classes(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> List[int]:
    seen = set(preds.tolist()) | set(labels.tolist())
    return [c for c in range(n_classes) if c not in seen]


def macro_f1(preds, labels, n_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class F1 over classes 0..n_classes-1.

    A class with precision + recall = 0 contributes 0; so does a class that
    appears in neither predictions nor labels (with a warning).
    """
    preds, labels = _check_pair(preds, labels)
    n_classes = n_classes or int(max(preds.max(), labels.max())) + 1
    absent = _absent_classes(preds, labels, n_classes)
    if absent:
        logger.warning(f"Classes {absent} occur in neither predictions nor labels; counted as F1 = 0")
    return float(f1_score(labels, preds, labels=list(range(n_classes)), average="macro", zero_division=0))


def binary_auroc(scores, positives) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MLEvaluationError("AUROC needs both positives and negatives",
                                metrics={"n_pos": n_pos, "n_neg": n_neg})
    ranks = rankdata(scores, method="average")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auroc(scores, positives) -> float:
    """Brute-force concordance over every positive/negative pair; the reference for `binary_auroc`."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    pos, neg = scores[positives], scores[~positives]
    if pos.size == 0 or neg.size == 0:
        raise MLEvaluationError("AUROC needs both positives and negatives")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def per_class_auroc(scores, labels, n_classes: Optional[int] = None) -> Dict[int, Optional[float]]:
    """One-vs-rest AUROC per class; None for classes without positives or negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.ndim == 1:
        scores = np.stack([-scores, scores], axis=1)
    if scores.shape[0] != labels.shape[0]:
        raise DimensionError("Scores and labels disagree on the sample count",
                             {"scores": scores.shape, "labels": labels.shape})
    n_classes = n_classes or scores.shape[1]
    out: Dict[int, Optional[float]] = {}
    for c in range(n_classes):
        positives = labels == c
        if positives.all() or not positives.any():
            out[c] = None
            continue
        out[c] = binary_auroc(scores[:, c], positives)
    return out


def auroc(scores, labels, n_classes: Optional[int] = None) -> float:
    """Macro one-vs-rest AUROC.

    1-D scores are read as the positive-class score of a binary problem.
    Classes lacking positives or negatives are skipped with a warning.
    """
    scores_arr = np.asarray(scores, dtype=np.float64)
    labels_arr = np.asarray(labels).astype(np.int64)
    if labels_arr.size < 2:
        raise ContractError("AUROC needs at least two samples")
    if scores_arr.ndim == 1:
        if np.unique(labels_arr).size != 2 or set(labels_arr.tolist()) - {0, 1}:
            raise MLEvaluationError("1-D scores need binary 0/1 labels with both classes present")
        return binary_auroc(scores_arr, labels_arr == 1)
    values = per_class_auroc(scores_arr, labels_arr, n_classes)
    skipped = [c for c, v in values.items() if v is None]
    if skipped:
        logger.warning(f"AUROC skipped classes {skipped}: no positives or no negatives")
    valid = [v for v in values.values() if v is not None]
    if not valid:
        raise MLEvaluationError("AUROC is undefined: every class was skipped",
                                metrics={"skipped": skipped})
    return float(np.mean(valid))


@dataclass
class ClassStats:
    label: int
    precision: float
    recall: float
    f1: float
    support: int
    tp: int
    tn: int
    fp: int
    fn: int
    auroc: Optional[float] = None


@dataclass
class EvalResult:
    """Summary metrics plus per-class one-vs-rest statistics."""
    accuracy: float
    macro_f1: float
    auroc: Optional[float]
    n_samples: int
    per_class: List[ClassStats] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in SUMMARY_METRICS}


def evaluate(scores, labels, n_classes: Optional[int] = None) -> EvalResult:
    """Metrics of class scores (e.g. softmax probabilities) against integer labels.

    AUROC is reported as None when every class is skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DimensionError("evaluate expects (N, n_classes) scores and (N,) labels",
                             {"scores": scores.shape, "labels": labels.shape})
    n_classes = n_classes or scores.shape[1]
    preds = scores.argmax(axis=1)
    classes = list(range(n_classes))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, preds, labels=classes, zero_division=0)
    confusion = multilabel_confusion_matrix(labels, preds, labels=classes)
    try:
        auc = auroc(scores, labels, n_classes) if labels.size >= 2 else None
    except MLEvaluationError as e:
        logger.warning(f"{e.message}; AUROC reported as null")
        auc = None
    class_auc = per_class_auroc(scores, labels, n_classes) if labels.size >= 2 else {}
    per_class = []
    for c in classes:
        (tn, fp), (fn, tp) = confusion[c]
        per_class.append(ClassStats(label=c, precision=float(precision[c]), recall=float(recall[c]),
                                    f1=float(f1[c]), support=int(support[c]), tp=int(tp), tn=int(tn),
                                    fp=int(fp), fn=int(fn), auroc=class_auc.get(c)))
    return EvalResult(accuracy=accuracy(preds, labels), macro_f1=macro_f1(preds, labels, n_classes),
                      auroc=auc, n_samples=int(labels.size), per_class=per_class)


def write_eval_json(result: EvalResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.to_json() + "\n")
    return path


def aggregate_results(results: Sequence[EvalResult]) -> Dict[str, float]:
    """{metric_mean, metric_std} over repeats (population std; NaN-aware for AUROC)."""
    if not results:
        raise ContractError("Nothing to aggregate")
    frame = pd.DataFrame([r.summary() for r in results], columns=list(SUMMARY_METRICS), dtype=float)
    row: Dict[str, float] = {"repeats": len(results)}
    for name in SUMMARY_METRICS:
        row[f"{name}_mean"] = float(frame[name].mean())
        row[f"{name}_std"] = float(frame[name].std(ddof=0))
    return row


def write_aggregate_csv(results: Sequence[EvalResult], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([aggregate_results(results)]).to_csv(path, index=False)
    return path


__all__ = [
    "accuracy", "macro_f1", "binary_auroc", "pairwise_auroc", "per_class_auroc", "auroc",
    "ClassStats", "EvalResult", "evaluate", "write_eval_json", "aggregate_results", "write_aggregate_csv",
    "SUMMARY_METRICS",
]
