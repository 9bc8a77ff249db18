"""Evaluation metrics: simple accuracy, the 10-choose-3 consensus accuracy
for ten-annotator gold lists, mean-per-type (MPT) over question families, and
normalized mean-per-type (N-MPT), which averages per-answer accuracies within
each family first and therefore rewards performance on rare answers.

All functions are pure and order-invariant over their record lists.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional, Union


@dataclass(frozen=True)
class PredictionRecord:
    question_id: int
    family: str
    predicted_answer: str
    gold: Union[str, tuple]  # one answer, or a tuple of 10 annotator answers

    def gold_list(self):
        return (self.gold,) if isinstance(self.gold, str) else tuple(self.gold)


@dataclass
class MetricsReport:
    overall_simple: float
    mpt: float
    nmpt: float
    vqa10c3: Optional[float]
    per_family: dict
    counts: dict
    harmonic_mpt: Optional[float] = None

    def to_json(self) -> str:
        overall = {"simple": self.overall_simple, "mpt": self.mpt, "nmpt": self.nmpt}
        if self.vqa10c3 is not None:
            overall["vqa10c3"] = self.vqa10c3
        if self.harmonic_mpt is not None:
            overall["harmonic_mpt"] = self.harmonic_mpt
        return json.dumps(
            {"overall": overall, "per_family": self.per_family}, indent=2, sort_keys=True
        )


def _norm(answer: str) -> str:
    return answer.strip().lower()


def _canonical_gold(record: PredictionRecord) -> str:
    """The single gold answer, or the plurality answer of a 10-gold list
    (ties break lexicographically) so simple/MPT metrics stay total."""
    golds = record.gold_list()
    if len(golds) == 1:
        return _norm(golds[0])
    counts = {}
    for g in golds:
        g = _norm(g)
        counts[g] = counts.get(g, 0) + 1
    return min(counts, key=lambda a: (-counts[a], a))


def _matches(record: PredictionRecord) -> bool:
    return _norm(record.predicted_answer) == _canonical_gold(record)


def simple_accuracy(records) -> float:
    """Fraction of exact matches (after lowercasing and trimming)."""
    records = list(records)
    if not records:
        raise ValueError("no records to score")
    return sum(1 for r in records if _matches(r)) / len(records)


def vqa_10choose3(records) -> float:
    """Mean of min(times the prediction appears among 10 golds / 3, 1)."""
    records = list(records)
    if not records:
        raise ValueError("no records to score")
    total = 0.0
    for r in records:
        golds = r.gold_list()
        if len(golds) != 10:
            raise ValueError(
                f"record {r.question_id} has {len(golds)} gold answers, expected 10"
            )
        pred = _norm(r.predicted_answer)
        hits = sum(1 for g in golds if _norm(g) == pred)
        total += min(hits / 3.0, 1.0)
    return total / len(records)


def _by_family(records) -> dict:
    out = {}
    for r in records:
        out.setdefault(r.family, []).append(r)
    return out


def mean_per_type(records) -> float:
    """Unweighted arithmetic mean of per-family simple accuracies."""
    groups = _by_family(records)
    if not groups:
        raise ValueError("no records to score")
    return sum(simple_accuracy(g) for g in groups.values()) / len(groups)


def harmonic_mean_per_type(records) -> float:
    """Harmonic counterpart of mean_per_type; 0 if any family scores 0."""
    groups = _by_family(records)
    if not groups:
        raise ValueError("no records to score")
    accs = [simple_accuracy(g) for g in groups.values()]
    if any(a == 0.0 for a in accs):
        return 0.0
    return len(accs) / sum(1.0 / a for a in accs)


def per_answer_accuracies(records) -> dict:
    """Accuracy for each distinct gold answer among `records`."""
    totals, hits = {}, {}
    for r in records:
        gold = _canonical_gold(r)
        totals[gold] = totals.get(gold, 0) + 1
        hits[gold] = hits.get(gold, 0) + (1 if _matches(r) else 0)
    return {a: hits[a] / totals[a] for a in totals}


def normalized_mean_per_type(records) -> float:
    """Within each family, average accuracy equally over distinct gold
    answers (answers never predicted correctly score 0), then average the
    family scores equally."""
    groups = _by_family(records)
    if not groups:
        raise ValueError("no records to score")
    family_scores = []
    for g in groups.values():
        per_answer = per_answer_accuracies(g)
        family_scores.append(sum(per_answer.values()) / len(per_answer))
    return sum(family_scores) / len(family_scores)


def build_report(records, include_harmonic: bool = False) -> MetricsReport:
    """Score a record list with every applicable metric.

    Families with no records never appear; the caller is warned when a family
    it expected is missing by comparing `counts`. The 10-choose-3 score is
    included only when every record carries a 10-answer gold list.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to score")
    groups = _by_family(records)
    empty = [fam for fam, g in groups.items() if not g]
    if empty:
        warnings.warn(f"families without records excluded from MPT: {empty}")
        groups = {fam: g for fam, g in groups.items() if g}
    multi_gold = all(len(r.gold_list()) == 10 for r in records)
    per_family = {}
    for fam, g in sorted(groups.items()):
        per_family[fam] = {
            "simple": simple_accuracy(g),
            "count": len(g),
            "per_answer": per_answer_accuracies(g),
        }
    return MetricsReport(
        overall_simple=simple_accuracy(records),
        mpt=mean_per_type(records),
        nmpt=normalized_mean_per_type(records),
        vqa10c3=vqa_10choose3(records) if multi_gold else None,
        per_family=per_family,
        counts={fam: len(g) for fam, g in groups.items()},
        harmonic_mpt=harmonic_mean_per_type(records) if include_harmonic else None,
    )
