"""Full-ranking top-K metrics and classification metrics."""
from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np


def rank_items(scores: np.ndarray, exclude: Iterable[int] = ()) -> np.ndarray:
    """Item indices by descending score; ties go to the lower index; ``exclude`` removed."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    excl = np.fromiter(exclude, dtype=np.int64)
    if excl.size:
        order = order[~np.isin(order, excl)]
    return order


def recall_at_k(ranked: Sequence[int], positives: set[int], k: int) -> float:
    hits = sum(1 for i in ranked[:k] if int(i) in positives)
    return hits / len(positives)


def ndcg_at_k(ranked: Sequence[int], positives: set[int], k: int) -> float:
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(ranked[:k]) if int(i) in positives)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(positives))))
    return dcg / idcg


def evaluate_ranking(
    scores: np.ndarray,
    train_pos: Mapping[int, set[int]],
    test_pos: Mapping[int, set[int]],
    recall_ks: Sequence[int] = (5, 20),
    ndcg_ks: Sequence[int] = (5,),
) -> dict[str, float]:
    """Average per-user metrics over users that have at least one test positive."""
    users = [u for u, pos in test_pos.items() if pos]
    if not users:
        raise ValueError("no users with test positives")
    acc = {f"Recall@{k}": 0.0 for k in recall_ks} | {f"NDCG@{k}": 0.0 for k in ndcg_ks}
    for u in users:
        ranked = rank_items(scores[u], train_pos.get(u, ()))
        pos = test_pos[u]
        for k in recall_ks:
            acc[f"Recall@{k}"] += recall_at_k(ranked, pos, k)
        for k in ndcg_ks:
            acc[f"NDCG@{k}"] += ndcg_at_k(ranked, pos, k)
    return {k: v / len(users) for k, v in acc.items()}


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_labels: int) -> np.ndarray:
    cm = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def classification_metrics(y_true: Sequence[int], y_pred: Sequence[int], n_labels: int) -> dict[str, float]:
    """Accuracy, macro-F1 (a class with no true or predicted members scores 0)
    and micro-F1; binary tasks add P/R/F1 for the positive class 1."""
    cm = confusion_matrix(y_true, y_pred, n_labels)
    total = cm.sum()
    tp = np.diag(cm).astype(float)
    out = {"Acc": _div(tp.sum(), total)}
    if n_labels == 2:
        p = _div(cm[1, 1], cm[:, 1].sum())
        r = _div(cm[1, 1], cm[1, :].sum())
        out |= {"P": p, "R": r, "F1": _div(2 * p * r, p + r)}
    f1s = []
    for c in range(n_labels):
        p = _div(tp[c], cm[:, c].sum())
        r = _div(tp[c], cm[c, :].sum())
        f1s.append(_div(2 * p * r, p + r))
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    micro_p = _div(tp.sum(), tp.sum() + fp.sum())
    micro_r = _div(tp.sum(), tp.sum() + fn.sum())
    out |= {"macro-F1": float(np.mean(f1s)), "micro-F1": _div(2 * micro_p * micro_r, micro_p + micro_r)}
    return {k: float(v) for k, v in out.items()}
