"""Precision / recall bookkeeping against generated ground truth."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

from relmatch.model import RelationVerdict

NA = "n/a"

Triple = tuple[str, str, str]


def _ratio(num: int, den: int) -> float | str:
    return num / den if den else NA


def f1(precision: float | str, recall: float | str) -> float:
    if isinstance(precision, str) or isinstance(recall, str) or precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def compute_metrics(
    verdicts: Iterable[RelationVerdict],
    truth: Iterable[Triple],
    retrieved: Mapping[tuple[str, str], Iterable[str]],
    relations: Sequence[str] | None = None,
    sources: Iterable[str] | None = None,
) -> dict:
    """Per-relation precision, recall, F1 and retrieval figures.

    ``retrieved`` maps (relation_id, source_id) to the targets examined for
    that pair. Truth is restricted to ``sources`` when given. Undefined ratios
    are reported as ``"n/a"``.
    """
    verdicts = list(verdicts)
    truth = set(truth)
    if sources is not None:
        keep = set(sources)
        truth = {t for t in truth if t[1] in keep}
    retrieved_sets = {key: set(targets) for key, targets in retrieved.items()}
    predicted = {v.key for v in verdicts if v.decision}
    if relations is None:
        relations = sorted({t[0] for t in truth} | {p[0] for p in predicted})

    per_relation = {}
    total_truth = total_retrieved = 0
    for rel in relations:
        truth_r = {t for t in truth if t[0] == rel}
        pred_r = {p for p in predicted if p[0] == rel}
        tp = len(truth_r & pred_r)
        in_reach = {t for t in truth_r if t[2] in retrieved_sets.get((rel, t[1]), ())}
        precision = _ratio(tp, len(pred_r))
        recall = _ratio(tp, len(truth_r))
        per_relation[rel] = {
            "truth": len(truth_r),
            "predicted": len(pred_r),
            "true_positives": tp,
            "precision": precision,
            "recall": recall,
            "f1": f1(precision, recall),
            "retrieval_bounded_recall": _ratio(len(in_reach & pred_r), len(in_reach)),
            "retrieval_recall": _ratio(len(in_reach), len(truth_r)),
        }
        total_truth += len(truth_r)
        total_retrieved += len(in_reach)
    return {
        "relations": per_relation,
        "retrieval_recall": _ratio(total_retrieved, total_truth),
    }
