"""Personalized re-ranking: fuse first-stage scores with user-model scores."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Tuple, TypeVar

import numpy as np

from .attention import UserModel, build_user_model
from .types import AttentionConfig, CandidateList, Query, UserProfile

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.5
    normalize_first_stage: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class RankedResult:
    doc_id: str
    final_score: float
    first_stage_score: float
    personalized_score: float
    rank: int


def personalized_score(candidate_vector, user_model: UserModel) -> float:
    """Cosine between a candidate and the user model; 0.0 for a zero user model."""
    c = np.asarray(candidate_vector, dtype=np.float64)
    if c.shape != user_model.vector.shape:
        raise ValueError(f"dimension mismatch: {c.shape} vs {user_model.vector.shape}")
    if user_model.is_zero:
        return 0.0
    return float(_cosine_to(user_model.vector, c[None, :])[0])


def _cosine_to(u: np.ndarray, C: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u)
    nc = np.linalg.norm(C, axis=1)
    out = np.zeros(C.shape[0])
    ok = (nc > 0) & (nu > 0)
    out[ok] = (C[ok] @ u) / (nc[ok] * nu)
    return np.clip(out, -1.0, 1.0)


def personalized_scores(candidates: CandidateList, user_model: UserModel) -> np.ndarray:
    """Vectorized ``personalized_score`` over every candidate."""
    if user_model.is_zero:
        return np.zeros(len(candidates))
    if candidates.vectors.shape[1] != user_model.vector.shape[0]:
        raise ValueError("candidate and user-model dimensions differ")
    return _cosine_to(user_model.vector, candidates.vectors)


def fuse_scores(a, b, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * a + lam * b


def minmax(scores: np.ndarray) -> np.ndarray:
    """Per-query min-max scaling to [0, 1]; a constant list maps to zeros."""
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def ranking_order(final: np.ndarray, first_stage: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    """Indices sorted by final score desc, then first-stage desc, then doc_id asc."""
    return np.lexsort((id_rank, -first_stage, -final))


def id_ranks(doc_ids: Sequence[str]) -> np.ndarray:
    return np.argsort(np.argsort(np.array(doc_ids, dtype=object), kind="stable"), kind="stable")


def fuse_and_rank(
    candidates: CandidateList, b: np.ndarray, fusion: FusionConfig, id_rank=None
) -> Tuple[np.ndarray, np.ndarray]:
    """Candidate indices in re-ranked order, and the fused scores, given ``b``."""
    a = candidates.scores
    a_used = minmax(a) if fusion.normalize_first_stage else a
    final = fuse_scores(a_used, b, fusion.lam)
    if id_rank is None:
        id_rank = id_ranks(candidates.doc_ids)
    return ranking_order(final, a, id_rank), final


def rerank(
    candidates: CandidateList,
    query: Query,
    profile: UserProfile,
    attn: AttentionConfig,
    fusion: FusionConfig,
) -> List[RankedResult]:
    if len(candidates) == 0:
        raise ValueError(f"no candidates for query {query.query_id!r}")
    if profile is None:
        raise ValueError(f"missing profile for user {query.user_id!r}")
    user_model = build_user_model(query, profile, attn)
    b = personalized_scores(candidates, user_model)
    order, final = fuse_and_rank(candidates, b, fusion)
    return [
        RankedResult(
            candidates.doc_ids[i],
            float(final[i]),
            float(candidates.scores[i]),
            float(b[i]),
            rank,
        )
        for rank, i in enumerate(order, start=1)
    ]


def thread_count() -> int:
    """Worker cap from DENOISE_RANK_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("DENOISE_RANK_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        log.warning("ignoring non-integer DENOISE_RANK_THREADS=%r", raw)
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Order-preserving map over a thread pool sized by ``thread_count``."""
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def rerank_all(
    queries: Sequence[Query],
    profiles: Mapping[str, UserProfile],
    candidates: Mapping[str, CandidateList],
    attn: AttentionConfig,
    fusion: FusionConfig,
) -> Dict[str, List[RankedResult]]:
    """Re-rank every query that has candidates, in parallel across queries."""

    def one(q: Query):
        if q.user_id not in profiles:
            raise ValueError(f"missing profile for user {q.user_id!r} (query {q.query_id})")
        return q.query_id, rerank(candidates[q.query_id], q, profiles[q.user_id], attn, fusion)

    todo = [q for q in queries if q.query_id in candidates]
    return dict(parallel_map(one, todo))
