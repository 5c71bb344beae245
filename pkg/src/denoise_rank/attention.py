"""Query-aware user models: scoring, normalization and aggregation.

A user model is built in three steps. Each user document is scored against
the query by an alignment model, the scores are turned into weights, and
the weighted document vectors are summed. Variants differ in the second
step:

* ``softmax_weights`` can never zero a document out.
* ``denoising_weights`` subtracts a threshold, clips at zero and divides by
  the (guarded) sum, so documents below the threshold get exactly zero
  weight and the whole user model collapses to the zero vector when none
  survive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import alignment as al
from .types import Alignment, AttentionConfig, MultiHeadParams, Query, UserProfile, Variant


@dataclass(frozen=True)
class UserModel:
    vector: np.ndarray
    is_zero: bool
    weights: np.ndarray
    filtered_count: int


def _scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] == 0:
        raise ValueError("need at least one alignment score")
    return s


def softmax_weights(scores) -> np.ndarray:
    s = _scores(scores)
    e = np.exp(s - s.max())
    return e / e.sum()


def filter_scores(scores, threshold: float) -> np.ndarray:
    """Shift scores down by ``threshold`` and clip negatives to zero."""
    return np.maximum(0.0, _scores(scores) - threshold)


def safe_normalize(filtered, epsilon: float) -> np.ndarray:
    """Divide by max(sum, epsilon); an all-zero input stays all zero."""
    f = np.asarray(filtered, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return f / max(f.sum(), epsilon)


def denoising_weights(scores, threshold: float, epsilon: float = 1e-9) -> np.ndarray:
    """Thresholded, ReLU-filtered, plainly normalized attention weights.

    ``threshold`` is the already-squashed value sigmoid(t), not t itself.
    """
    return safe_normalize(filter_scores(scores, threshold), epsilon)


def zero_attention_weights(scores, zero_score: float) -> np.ndarray:
    """Softmax over the scores plus one extra slot for an all-zeros document.

    Only the weights of the real documents are returned; the mass left on
    the zero slot (1 - sum) multiplies a zero vector during aggregation.
    """
    s = _scores(scores)
    return softmax_weights(np.append(s, zero_score))[:-1]


def aggregate(weights, profile: UserProfile) -> UserModel:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(profile),):
        raise ValueError(f"{w.shape[0]} weights for {len(profile)} user documents")
    vector = w @ profile.vectors
    is_zero = not np.any(w)
    if is_zero:
        vector = np.zeros(profile.dim)
    w = w.copy()
    w.setflags(write=False)
    vector.setflags(write=False)
    return UserModel(vector, is_zero, w, int(np.count_nonzero(w == 0.0)))


def multi_head_user_model(query: Query, profile: UserProfile, params: MultiHeadParams, heads: int) -> UserModel:
    """Scaled-dot softmax attention in ``heads`` projected subspaces.

    Per head the query goes through W_Q[i], documents through W_K[i] as keys
    and W_V[i] as values; head outputs are concatenated and mapped by W_O.
    The weights recorded on the model are the head-averaged distributions.
    """
    m = query.dim
    if heads < 1 or m % heads:
        raise ValueError(f"dimension {m} is not divisible by {heads} heads")
    if params.heads != heads or params.dim != m:
        raise ValueError("multi-head parameters do not match heads/dimension")
    D = profile.vectors
    if len(profile) == 0:
        raise ValueError("cannot build a user model from an empty profile")
    dk = m // heads
    Q = params.W_Q @ query.vector  # (heads, dk)
    K = np.einsum("hjm,km->hkj", params.W_K, D)  # (heads, k, dk)
    V = np.einsum("hjm,km->hkj", params.W_V, D)
    logits = np.einsum("hkj,hj->hk", K, Q) / math.sqrt(dk)
    logits -= logits.max(axis=1, keepdims=True)
    A = np.exp(logits)
    A /= A.sum(axis=1, keepdims=True)
    heads_out = np.einsum("hk,hkj->hj", A, V)
    vector = params.W_O @ heads_out.reshape(m)
    weights = A.mean(axis=0)
    vector.setflags(write=False)
    weights.setflags(write=False)
    return UserModel(vector, False, weights, int(np.count_nonzero(weights == 0.0)))


def attention_weights(query: Query, profile: UserProfile, config: AttentionConfig) -> np.ndarray:
    """Normalized weights for every non-multi-head variant."""
    variant = config.variant
    if len(profile) == 0:
        raise ValueError(f"profile of user {profile.user_id!r} is empty")
    if query.dim != profile.dim:
        raise ValueError(f"query dimension {query.dim} != profile dimension {profile.dim}")
    D = profile.vectors
    if variant is Variant.MEAN:
        return np.full(len(profile), 1.0 / len(profile))
    if variant is Variant.SOFTMAX:
        e = al.align(query.vector, D, config.alignment, config.additive_params)
        return softmax_weights(e)
    if variant is Variant.ZERO_ATTENTION:
        e = al.align(query.vector, D, config.alignment, config.additive_params)
        zero = al.align(query.vector, np.zeros((1, query.dim)), config.alignment, config.additive_params)
        return zero_attention_weights(e, float(zero[0]))
    if variant is Variant.DENOISING:
        e = al.align(query.vector, D, Alignment.SHIFTED_COSINE)
        return denoising_weights(e, config.threshold, config.epsilon)
    if variant is Variant.FILTER_ATTENTION:
        e = al.align(query.vector, D, Alignment.SCALED_DOT)
        return safe_normalize(filter_scores(e, 0.0), config.epsilon)
    if variant is Variant.DENOISING_SOFTMAX:
        e = al.align(query.vector, D, Alignment.SHIFTED_COSINE)
        return softmax_weights(filter_scores(e, config.threshold))
    raise ValueError(f"no weight rule for variant {variant.value}")


def build_user_model(query: Query, profile: UserProfile, config: AttentionConfig) -> UserModel:
    if config.variant is Variant.MULTI_HEAD:
        if len(profile) == 0:
            raise ValueError(f"profile of user {profile.user_id!r} is empty")
        return multi_head_user_model(query, profile, config.multihead_params, config.heads)
    return aggregate(attention_weights(query, profile, config), profile)


def count_filtered(query: Query, profile: UserProfile, config: AttentionConfig) -> int:
    """Number of user documents that end up with exactly zero weight."""
    if config.variant not in (Variant.DENOISING, Variant.FILTER_ATTENTION):
        raise ValueError(f"filtering is undefined for variant {config.variant.value}")
    return int(np.count_nonzero(attention_weights(query, profile, config) == 0.0))
