"""Retrieval evaluation: Average Precision, MAP over queries, and a paired
two-sided t-test at the 95% confidence level between two runs.

AP is accumulated in exact rational arithmetic and converted to float once,
so results are reproducible and match hand enumeration digit for digit.
Queries without relevant judgments are excluded from MAP and reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from scipy import stats

from .store import Qrels


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    dof: int
    significant: bool
    degenerate: bool = False    # zero variance of the paired differences


@dataclass
class EvalReport:
    per_query_ap: dict[str, float]
    map_score: float
    skipped: tuple[str, ...] = ()                 # queries with no relevant docs
    failures: dict[str, str] = field(default_factory=dict)
    ttest: TTestResult | None = None


def average_precision(ranked: Sequence[str], relevant: set[str]) -> float:
    """Mean of precision at each relevant rank, divided by the total number
    of relevant documents; unretrieved relevant documents contribute zero.

    The ranked list must not contain duplicates.
    """
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicate documents")
    if not relevant:
        raise ValueError("query has no relevant documents")
    hits = 0
    total = Fraction(0)
    for rank, doc_id in enumerate(ranked, start=1):
        if doc_id in relevant:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / len(relevant))


def evaluate_run(run: Mapping[str, Sequence[tuple[str, float]]], qrels: Qrels) -> EvalReport:
    """Score a run against binary judgments.

    Judged queries missing from the run (or answered with an empty list)
    score zero; queries with no relevant documents are skipped and listed.
    """
    per_query: dict[str, float] = {}
    skipped: list[str] = []
    for query_id in qrels.query_ids():
        relevant = qrels.relevant[query_id]
        if not relevant:
            skipped.append(query_id)
            continue
        ranked = [doc_id for doc_id, _ in run.get(query_id, ())]
        per_query[query_id] = average_precision(ranked, relevant)
    map_score = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return EvalReport(per_query, map_score, tuple(skipped))


def paired_ttest(ap_a: Mapping[str, float], ap_b: Mapping[str, float],
                 confidence: float = 0.95) -> TTestResult:
    """Two-sided paired t-test on per-query AP differences.

    Zero variance of the differences is degenerate (the statistic is
    undefined); it is reported as not significant rather than an error.
    """
    if set(ap_a) != set(ap_b):
        raise ValueError("per-query AP maps cover different query sets")
    n = len(ap_a)
    if n < 2:
        raise ValueError(f"need at least 2 paired queries, got {n}")
    diffs = [ap_a[q] - ap_b[q] for q in sorted(ap_a)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    dof = n - 1
    if var == 0.0:
        return TTestResult(0.0, dof, significant=False, degenerate=True)
    statistic = mean / math.sqrt(var / n)
    critical = float(stats.t.ppf(0.5 + confidence / 2.0, dof))
    return TTestResult(statistic, dof, significant=abs(statistic) > critical)
