"""Grid search over the fusion weight lambda and the Denoising threshold.

User models do not depend on lambda, so personalized scores are computed
once per threshold and every lambda on the grid re-uses them. Metrics are
computed from per-candidate relevance gains aligned with the candidate
lists, which avoids rebuilding ranked doc-id lists for each grid cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import build_user_model
from .evaluation import (
    MAP_DEPTH,
    MRR_DEPTH,
    NDCG_DEPTH,
    ap_from_gains,
    ideal_gains,
    ndcg_from_gains,
    rr_from_gains,
)
from .rerank import FusionConfig, fuse_and_rank, id_ranks, parallel_map, personalized_scores
from .types import AttentionConfig, Dataset, Run, Variant

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))
THRESHOLD_VARIANTS = (Variant.DENOISING, Variant.DENOISING_SOFTMAX)


@dataclass
class PreparedQuery:
    query_id: str
    gains: np.ndarray
    n_relevant: int
    ideal: np.ndarray
    id_rank: np.ndarray


def prepare(dataset: Dataset) -> List[PreparedQuery]:
    """Per-query gain vectors for every query that has at least one relevant judgment."""
    out = []
    for q in dataset.queries:
        judgments = dataset.qrels.get(q.query_id, {})
        n_rel = sum(1 for r in judgments.values() if r > 0)
        if n_rel == 0 or q.query_id not in dataset.candidates:
            continue
        cands = dataset.candidates[q.query_id]
        gains = np.array([judgments.get(d, 0) for d in cands.doc_ids], dtype=np.float64)
        out.append(PreparedQuery(
            q.query_id, gains, n_rel, ideal_gains(judgments, NDCG_DEPTH), id_ranks(cands.doc_ids),
        ))
    return out


def personalized_table(dataset: Dataset, attn: AttentionConfig, query_ids: Sequence[str]) -> Dict[str, np.ndarray]:
    """Personalized score b for every candidate of every listed query."""
    by_id = {q.query_id: q for q in dataset.queries}

    def one(qid):
        q = by_id[qid]
        um = build_user_model(q, dataset.profiles[q.user_id], attn)
        return qid, personalized_scores(dataset.candidates[qid], um)

    return dict(parallel_map(one, query_ids))


def metric_rows(dataset: Dataset, prepared: Sequence[PreparedQuery], b_table: Dict[str, np.ndarray],
                fusion: FusionConfig) -> Dict[str, Dict[str, float]]:
    out = {}
    for pq in prepared:
        cands = dataset.candidates[pq.query_id]
        order, _ = fuse_and_rank(cands, b_table[pq.query_id], fusion, pq.id_rank)
        g = pq.gains[order]
        out[pq.query_id] = {
            "ap100": ap_from_gains(g[:MAP_DEPTH], pq.n_relevant),
            "rr10": rr_from_gains(g[:MRR_DEPTH]),
            "ndcg10": ndcg_from_gains(g[:NDCG_DEPTH], pq.ideal),
        }
    return out


_KEY = {"map100": "ap100", "mrr10": "rr10", "ndcg10": "ndcg10"}


def mean_metric(rows: Dict[str, Dict[str, float]], metric: str) -> float:
    key = _KEY.get(metric, metric)
    return float(np.mean([r[key] for r in rows.values()])) if rows else 0.0


@dataclass
class GridResult:
    best_lambda: float
    best_threshold: Optional[float]
    best_score: float
    table: List[Tuple[float, Optional[float], float]] = field(default_factory=list)

    def to_tsv(self, metric: str = "map100") -> str:
        lines = [f"lambda\tthreshold\t{metric}"]
        for lam, thr, score in self.table:
            lines.append(f"{lam:g}\t{'-' if thr is None else f'{thr:g}'}\t{score:.6f}")
        return "\n".join(lines) + "\n"


def uses_threshold(attn: AttentionConfig) -> bool:
    return attn.variant in THRESHOLD_VARIANTS


def grid_search(
    dataset: Dataset,
    grid_lambda: Sequence[float] = DEFAULT_GRID,
    grid_threshold: Sequence[float] = DEFAULT_GRID,
    attn: AttentionConfig = AttentionConfig(),
    metric: str = "map100",
    normalize_first_stage: bool = True,
) -> GridResult:
    """Exhaustive search; ties go to the smaller lambda, then the smaller threshold.

    The threshold grid holds values of sigmoid(t) and is only consulted for
    thresholded variants; for the rest the table's threshold column is None.
    """
    if not dataset.queries:
        raise ValueError("empty validation set")
    if not grid_lambda:
        raise ValueError("empty lambda grid")
    lambdas = sorted(set(float(x) for x in grid_lambda))
    if uses_threshold(attn):
        if not grid_threshold:
            raise ValueError("empty threshold grid")
        thresholds: List[Optional[float]] = sorted(set(float(x) for x in grid_threshold))
    else:
        thresholds = [None]
    prepared = prepare(dataset)
    if not prepared:
        raise ValueError("no validation query has a relevant judgment")
    qids = [pq.query_id for pq in prepared]
    table = []
    best = None
    for thr in thresholds:
        cfg = attn if thr is None else attn.with_threshold(thr)
        b_table = personalized_table(dataset, cfg, qids)
        for lam in lambdas:
            rows = metric_rows(dataset, prepared, b_table, FusionConfig(lam, normalize_first_stage))
            score = mean_metric(rows, metric)
            table.append((lam, thr, score))
    # lexicographic tie-break: highest score, then smallest lambda, then smallest threshold
    for lam, thr, score in sorted(table, key=lambda r: (r[0], -1.0 if r[1] is None else r[1])):
        if best is None or score > best[2]:
            best = (lam, thr, score)
    return GridResult(best[0], best[1], best[2], table)


def run_for(dataset: Dataset, attn: AttentionConfig, fusion: FusionConfig,
            query_ids: Optional[Sequence[str]] = None, tag: str = "run") -> Run:
    """Full re-ranked run (every candidate) for the given queries."""
    qids = [q.query_id for q in dataset.queries if q.query_id in dataset.candidates] \
        if query_ids is None else list(query_ids)
    b_table = personalized_table(dataset, attn, qids)
    rows = {}
    for qid in qids:
        cands = dataset.candidates[qid]
        order, final = fuse_and_rank(cands, b_table[qid], fusion)
        rows[qid] = [(cands.doc_ids[i], float(final[i])) for i in order]
    return Run(rows, tag)
