"""Alignment models a(q, d): how well a user document matches the query.

Single-pair functions return a float. ``align`` scores a query against a
(k, m) matrix of document vectors in one call and is what the attention
module uses; the two routes share no code beyond numpy.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .types import AdditiveParams, Alignment


def _pair(q, d):
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if q.shape != d.shape or q.ndim != 1:
        raise ValueError(f"dimension mismatch: {q.shape} vs {d.shape}")
    return q, d


def dot(q, d) -> float:
    q, d = _pair(q, d)
    return float(q @ d)


def scaled_dot(q, d) -> float:
    q, d = _pair(q, d)
    return float(q @ d) / math.sqrt(q.shape[0])


def cosine(q, d) -> float:
    """Cosine similarity; 0.0 when either vector is all zeros."""
    q, d = _pair(q, d)
    nq = np.linalg.norm(q)
    nd = np.linalg.norm(d)
    if nq == 0.0 or nd == 0.0:
        return 0.0
    # rounding can push |cos| a hair past 1 for parallel vectors
    return float(np.clip((q @ d) / (nq * nd), -1.0, 1.0))


def shifted_cosine(q, d) -> float:
    """Cosine mapped onto [0, 1]: (cos + 1) / 2."""
    return (cosine(q, d) + 1.0) / 2.0


def additive(q, d, params: AdditiveParams) -> float:
    q, d = _pair(q, d)
    if q.shape[0] != params.dim:
        raise ValueError(f"additive params expect dimension {params.dim}, got {q.shape[0]}")
    return float(params.v @ np.tanh(params.W_q @ q + params.W_d @ d))


def _cosine_rows(q: np.ndarray, D: np.ndarray) -> np.ndarray:
    nq = np.linalg.norm(q)
    nd = np.linalg.norm(D, axis=1)
    denom = nq * nd
    out = np.zeros(D.shape[0])
    ok = denom > 0
    out[ok] = (D[ok] @ q) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def align(
    q: np.ndarray,
    D: np.ndarray,
    alignment: Alignment,
    additive_params: Optional[AdditiveParams] = None,
) -> np.ndarray:
    """Alignment scores of query ``q`` against each row of ``D``."""
    q = np.asarray(q, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: query {q.shape} vs documents {D.shape}")
    if alignment is Alignment.DOT:
        return D @ q
    if alignment is Alignment.SCALED_DOT:
        return (D @ q) / math.sqrt(q.shape[0])
    if alignment is Alignment.COSINE:
        return _cosine_rows(q, D)
    if alignment is Alignment.SHIFTED_COSINE:
        return (_cosine_rows(q, D) + 1.0) / 2.0
    if alignment is Alignment.ADDITIVE:
        if additive_params is None:
            raise ValueError("additive alignment needs AdditiveParams")
        if additive_params.dim != q.shape[0]:
            raise ValueError(
                f"additive params expect dimension {additive_params.dim}, got {q.shape[0]}"
            )
        hidden = np.tanh(additive_params.W_q @ q + D @ additive_params.W_d.T)
        return hidden @ additive_params.v
    raise ValueError(f"unsupported alignment {alignment!r}")
