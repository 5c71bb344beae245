"""Random non-kink triplets for gradient checks."""

import numpy as np

from denoise_rank.experiment import default_attention
from denoise_rank.training import Triplet, kink_distance, triplet_loss
from denoise_rank.types import (
    AdditiveParams,
    Alignment,
    AttentionConfig,
    Candidate,
    MultiHeadParams,
    Query,
    UserProfile,
    Variant,
)

KINK_CLEARANCE = 1e-3


def _seed(rng):
    return int(rng.integers(2**31))


FAMILIES = {
    "threshold": lambda rng, m: default_attention(Variant.DENOISING, dim=m, threshold=rng.uniform(0.3, 0.7)),
    "threshold_softmax": lambda rng, m: default_attention(
        Variant.DENOISING_SOFTMAX, dim=m, threshold=rng.uniform(0.3, 0.7)),
    "additive": lambda rng, m: AttentionConfig(
        Variant.SOFTMAX, Alignment.ADDITIVE, additive_params=AdditiveParams.init(m, seed=_seed(rng))),
    "additive_zero": lambda rng, m: AttentionConfig(
        Variant.ZERO_ATTENTION, Alignment.ADDITIVE, additive_params=AdditiveParams.init(m, seed=_seed(rng))),
    "multihead": lambda rng, m: AttentionConfig(
        Variant.MULTI_HEAD, Alignment.SCALED_DOT, heads=4,
        multihead_params=MultiHeadParams.init(m, 4, seed=_seed(rng), noise=0.5)),
}


def random_points(family, n, seed=0, m=8, k=6, margin=0.1):
    """``n`` (attn, triplet, profile) points with an active hinge, clear of every kink."""
    rng = np.random.default_rng(seed)
    make = FAMILIES[family]
    out = []
    while len(out) < n:
        attn = make(rng, m)
        q = Query("q", "u", rng.standard_normal(m))
        prof = UserProfile("u", tuple(f"d{i}" for i in range(k)), rng.standard_normal((k, m)))
        trip = Triplet(q, Candidate("pos", 0.0, rng.standard_normal(m)), Candidate("neg", 0.0, rng.standard_normal(m)))
        loss = triplet_loss(q.vector, prof.vectors, trip.positive.vector, trip.negative.vector,
                            attn, margin, with_grad=False)[0]
        if loss <= 0.0 or kink_distance(attn, trip, prof, margin) < KINK_CLEARANCE:
            continue
        out.append((attn, trip, prof))
    return out
