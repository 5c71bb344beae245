"""IR effectiveness metrics, paired randomization test and robustness counts.

Metric conventions:
    * unjudged documents are non-relevant;
    * a query with no relevant judgment cannot be scored and is excluded
      from the means (``MetricReport.excluded`` lists it);
    * NDCG uses linear gain (the relevance grade) and 1/log2(rank + 1)
      discounts, normalised by the ideal DCG over all judged documents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .types import Qrels, Run

MAP_DEPTH = 100
MRR_DEPTH = 10
NDCG_DEPTH = 10

METRICS = ("map100", "mrr10", "ndcg10")
_PER_QUERY_KEYS = {"map100": "ap100", "mrr10": "rr10", "ndcg10": "ndcg10"}


def _gains(ranking: Sequence[str], judgments: Mapping[str, int], k: int) -> np.ndarray:
    return np.array([judgments.get(d, 0) for d in ranking[:k]], dtype=np.float64)


def _require_relevant(judgments: Mapping[str, int]) -> int:
    n_rel = sum(1 for r in judgments.values() if r > 0)
    if n_rel == 0:
        raise ValueError("query has no judged-relevant documents")
    return n_rel


def ap_from_gains(gains: np.ndarray, n_relevant: int) -> float:
    hits = gains > 0
    if not hits.any():
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, gains.shape[0] + 1)
    return float(precision[hits].sum() / n_relevant)


def rr_from_gains(gains: np.ndarray) -> float:
    hits = np.flatnonzero(gains > 0)
    return 0.0 if hits.size == 0 else 1.0 / (hits[0] + 1)


def _dcg(gains: np.ndarray) -> float:
    # exactly rounded sum, so an ideal ranking (extra zero gains or not) scores exactly 1
    return math.fsum(gains / np.log2(np.arange(2, gains.shape[0] + 2)))


def ndcg_from_gains(gains: np.ndarray, ideal_gains: np.ndarray) -> float:
    ideal = _dcg(ideal_gains)
    return 0.0 if ideal == 0.0 else _dcg(gains) / ideal


def ideal_gains(judgments: Mapping[str, int], k: int) -> np.ndarray:
    return np.array(sorted((r for r in judgments.values() if r > 0), reverse=True)[:k], dtype=np.float64)


def average_precision_at(ranking: Sequence[str], judgments: Mapping[str, int], k: int = MAP_DEPTH) -> float:
    """AP@k, divided by the total number of relevant documents (not by hits)."""
    n_rel = _require_relevant(judgments)
    return ap_from_gains(_gains(ranking, judgments, k), n_rel)


def reciprocal_rank_at(ranking: Sequence[str], judgments: Mapping[str, int], k: int = MRR_DEPTH) -> float:
    _require_relevant(judgments)
    return rr_from_gains(_gains(ranking, judgments, k))


def ndcg_at(ranking: Sequence[str], judgments: Mapping[str, int], k: int = NDCG_DEPTH) -> float:
    _require_relevant(judgments)
    return ndcg_from_gains(_gains(ranking, judgments, k), ideal_gains(judgments, k))


@dataclass
class MetricReport:
    per_query: Dict[str, Dict[str, float]] = field(default_factory=dict)
    means: Dict[str, float] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)

    def values(self, metric: str, query_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        """Per-query values of ``metric`` (map100/mrr10/ndcg10) in ``query_ids`` order."""
        key = _PER_QUERY_KEYS.get(metric, metric)
        qids = list(self.per_query) if query_ids is None else query_ids
        return np.array([self.per_query[q][key] for q in qids])


def evaluate(run: Run, qrels: Qrels, query_ids: Optional[Sequence[str]] = None) -> MetricReport:
    """Score every query of ``run`` (or ``query_ids``) that has a relevant judgment.

    A query listed in ``query_ids`` but absent from the run scores 0 on
    every metric, as an empty ranking would.
    """
    report = MetricReport()
    qids = run.query_ids() if query_ids is None else list(query_ids)
    for qid in qids:
        judgments = qrels.get(qid, {})
        if not any(r > 0 for r in judgments.values()):
            report.excluded.append(qid)
            continue
        ranking = run.ranking(qid)
        report.per_query[qid] = {
            "ap100": average_precision_at(ranking, judgments, MAP_DEPTH),
            "rr10": reciprocal_rank_at(ranking, judgments, MRR_DEPTH),
            "ndcg10": ndcg_at(ranking, judgments, NDCG_DEPTH),
        }
    for metric, key in _PER_QUERY_KEYS.items():
        vals = [v[key] for v in report.per_query.values()]
        report.means[metric] = float(np.mean(vals)) if vals else 0.0
    return report


@dataclass(frozen=True)
class SignificanceResult:
    metric: str
    p_value: float
    corrected_alpha: float
    significant: bool
    iterations: int
    mean_difference: float


# Relative slack when comparing permuted |mean difference| to the observed
# one, so sign patterns that tie mathematically are not lost to rounding.
_TIE_RTOL = 1e-12


def fisher_randomization_test(
    per_query_a,
    per_query_b,
    iterations: int = 100_000,
    alpha: float = 0.05,
    comparisons: int = 1,
    seed: int = 0,
    metric: str = "",
    chunk: int = 8192,
) -> SignificanceResult:
    """Two-sided paired randomization (sign-flip) test.

    The p-value is the fraction of ``iterations`` random sign assignments
    to the per-query differences whose absolute mean is at least the
    observed absolute mean. Significance uses the Bonferroni-corrected
    level alpha / comparisons.
    """
    a = np.asarray(per_query_a, dtype=np.float64)
    b = np.asarray(per_query_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("need at least one paired observation")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if comparisons < 1:
        raise ValueError("comparisons must be >= 1")
    diff = a - b
    n = diff.shape[0]
    observed = abs(diff.sum())
    cutoff = observed - _TIE_RTOL * np.abs(diff).sum()
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < iterations:
        size = min(chunk, iterations - done)
        signs = rng.integers(0, 2, size=(size, n), dtype=np.int8) * 2 - 1
        hits += int(np.count_nonzero(np.abs(signs @ diff) >= cutoff))
        done += size
    p = hits / iterations
    corrected = alpha / comparisons
    return SignificanceResult(metric, p, corrected, p < corrected, iterations, float(diff.mean()))


def degradation_count(baseline_per_query, system_per_query) -> Tuple[int, float]:
    """Queries where the system scores strictly below the baseline, and their share."""
    base = np.asarray(baseline_per_query, dtype=np.float64)
    sys_ = np.asarray(system_per_query, dtype=np.float64)
    if base.shape != sys_.shape:
        raise ValueError(f"paired samples differ in shape: {base.shape} vs {sys_.shape}")
    if base.size == 0:
        return 0, 0.0
    count = int(np.count_nonzero(sys_ < base))
    return count, count / base.size


def format_ratio(ratio: float) -> str:
    return f"{round(100 * ratio):d}%"
