"""Triplet-loss training of user-model parameters with AdamW.

Embeddings are frozen: the only parameters that move are the threshold
logit t (Denoising, DenoisingSoftmax), the additive alignment weights, or
the multi-head projections.

During training a document is scored as cos(q + u, d) rather than
cos(u, d). Adding the query keeps gradients flowing when every user
document has been filtered out and u is the zero vector.

Randomness: epoch ``e`` of a run seeded with ``seed`` draws everything
(shuffling, positives, user-document subsamples, negatives) from
``np.random.default_rng([seed, e])``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gradients as gr
from .types import AttentionConfig, Candidate, CandidateList, Dataset, Qrels, Query, UserProfile, Variant

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    margin: float = 0.1
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 20
    user_docs_sampled: int = 20
    weight_decay: float = 0.01
    seed: int = 0
    hard_negatives: int = 1
    in_batch_negatives: int = 1
    hard_depth: int = 20

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be >= 0")
        for name in ("batch_size", "epochs", "user_docs_sampled", "hard_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hard_negatives < 0 or self.in_batch_negatives < 0:
            raise ValueError("negative counts must be >= 0")
        if self.hard_negatives + self.in_batch_negatives == 0:
            raise ValueError("need at least one negative per positive")


@dataclass(frozen=True)
class Triplet:
    query: Query
    positive: Candidate
    negative: Candidate

    def __post_init__(self):
        if self.positive.doc_id == self.negative.doc_id:
            raise ValueError("positive and negative must be different documents")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: List[float]):
        super().__init__(message)
        self.trace = trace


def training_score(query, user_model, doc) -> float:
    """cos(q + u, d); accepts a Query/UserModel or raw vectors."""
    q = getattr(query, "vector", query)
    u = getattr(user_model, "vector", user_model)
    d = np.asarray(doc, dtype=np.float64)
    z = np.asarray(q, dtype=np.float64) + np.asarray(u, dtype=np.float64)
    if z.shape != d.shape:
        raise ValueError(f"dimension mismatch: {z.shape} vs {d.shape}")
    return gr.cosine_and_grad(z, d)[0]


def hinge_loss(s_pos: float, s_neg: float, margin: float = 0.1) -> float:
    return max(0.0, margin - s_pos + s_neg)


def triplet_loss(
    q: np.ndarray,
    D: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    attn: AttentionConfig,
    margin: float,
    params: Optional[gr.Params] = None,
    with_grad: bool = True,
) -> Tuple[float, gr.Params, np.ndarray]:
    """Hinge loss of one triplet, parameter gradients, and dL/dq via the q + u path."""
    if params is None:
        params = gr.trainable_params(attn)
    u, cache = gr.forward(q, D, attn, params)
    z = q + u
    s_pos, g_pos = gr.cosine_and_grad(z, pos)
    s_neg, g_neg = gr.cosine_and_grad(z, neg)
    loss = margin - s_pos + s_neg
    if loss <= 0.0:
        zero = {k: np.zeros_like(v) for k, v in params.items()}
        return 0.0, zero, np.zeros_like(q)
    if not with_grad:
        return loss, {}, np.zeros_like(q)
    g_z = g_neg - g_pos
    return loss, gr.backward(g_z, cache, attn, params), g_z


def _flatten(params: gr.Params) -> Tuple[np.ndarray, Callable[[np.ndarray], gr.Params]]:
    keys = sorted(params)
    shapes = [np.shape(params[k]) for k in keys]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.concatenate([np.ravel(params[k]) for k in keys]) if keys else np.zeros(0)

    def unflatten(x: np.ndarray) -> gr.Params:
        out, i = {}, 0
        for k, shape, size in zip(keys, shapes, sizes):
            out[k] = x[i : i + size].reshape(shape)
            i += size
        return out

    return flat, unflatten


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def central_differences(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = f(x)
        x.flat[i] = orig - h
        fm = f(x)
        x.flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError("loss is not finite at the finite-difference probe")
        grad.flat[i] = (fp - fm) / (2 * h)
    return grad


# Central differences carry ~1e-11 absolute roundoff at h = 1e-5, so relative
# errors are taken against at least this magnitude; entries whose gradient is
# below it are compared almost absolutely.
GRAD_CHECK_FLOOR = 1e-6


def check_gradient(f, grad_f, x, h: float = 1e-5, floor: float = GRAD_CHECK_FLOOR) -> float:
    """Worst elementwise relative error between ``grad_f(x)`` and central differences."""
    x = np.asarray(x, dtype=np.float64)
    if not math.isfinite(f(x)):
        raise ValueError("loss is not finite at the checked point")
    numeric = central_differences(f, x, h)
    errors = relative_errors(grad_f(x), numeric, floor)
    return float(errors.max()) if errors.size else 0.0


def grad_check(
    attn: AttentionConfig,
    triplet: Triplet,
    profile: UserProfile,
    margin: float = 0.1,
    h: float = 1e-5,
    floor: float = GRAD_CHECK_FLOOR,
) -> float:
    """Compare analytic parameter gradients of one triplet's loss to finite differences.

    The caller is responsible for choosing a point away from the hinge and
    ReLU kinks (see ``kink_distance``).
    """
    params = gr.trainable_params(attn)
    if not params:
        raise ValueError(f"{attn.variant.value} has no trainable parameters")
    q = triplet.query.vector
    D = profile.vectors
    pos, neg = triplet.positive.vector, triplet.negative.vector
    x0, unflatten = _flatten(params)

    def f(x):
        return triplet_loss(q, D, pos, neg, attn, margin, unflatten(x), with_grad=False)[0]

    def grad_f(x):
        g = triplet_loss(q, D, pos, neg, attn, margin, unflatten(x))[1]
        return _flatten(g)[0]

    return check_gradient(f, grad_f, x0, h, floor)


def kink_distance(attn: AttentionConfig, triplet: Triplet, profile: UserProfile, margin: float = 0.1) -> float:
    """Distance of the pre-activation closest to a non-differentiable point.

    Covers the hinge (margin - s_pos + s_neg) and, for thresholded
    variants, every shifted score e - sigmoid(t).
    """
    params = gr.trainable_params(attn)
    q = triplet.query.vector
    u, cache = gr.forward(q, profile.vectors, attn, params)
    z = q + u
    s_pos = gr.cosine_and_grad(z, triplet.positive.vector)[0]
    s_neg = gr.cosine_and_grad(z, triplet.negative.vector)[0]
    dist = abs(margin - s_pos + s_neg)
    if "s" in cache:
        from .alignment import align
        from .types import Alignment

        e = align(q, profile.vectors, Alignment.SHIFTED_COSINE)
        dist = min(dist, float(np.min(np.abs(e - cache["s"]))))
        if attn.variant is Variant.DENOISING:
            dist = min(dist, abs(cache["total"] - attn.epsilon))
    return dist


def sample_negatives(
    query: Query,
    first_stage: CandidateList,
    batch: Sequence[Tuple[str, Candidate]],
    qrels: Qrels,
    seed,
    n_hard: int = 1,
    n_in_batch: int = 1,
    hard_depth: int = 20,
) -> List[Candidate]:
    """Hard negatives from the top of the first-stage list plus in-batch negatives.

    Hard negatives are drawn from the ``hard_depth`` best-scored candidates
    not judged relevant. In-batch negatives are the positives of the other
    queries in ``batch`` (pairs of query_id, positive candidate), skipping
    any that are relevant to this query. With no eligible hard negative the
    sample is in-batch only.
    """
    rng = np.random.default_rng(seed)
    relevant = set(qrels.relevant(query.query_id))
    hard_pool = [c for c in first_stage.candidates[:hard_depth] if c.doc_id not in relevant]
    in_pool = []
    seen = set()
    for qid, cand in batch:
        if qid == query.query_id or cand.doc_id in relevant or cand.doc_id in seen:
            continue
        seen.add(cand.doc_id)
        in_pool.append(cand)
    if not hard_pool and not in_pool:
        raise ValueError(f"no eligible negatives for query {query.query_id!r}")
    out: List[Candidate] = []
    if hard_pool and n_hard:
        idx = rng.choice(len(hard_pool), size=min(n_hard, len(hard_pool)), replace=False)
        out.extend(hard_pool[i] for i in idx)
    if in_pool and n_in_batch:
        idx = rng.choice(len(in_pool), size=min(n_in_batch, len(in_pool)), replace=False)
        out.extend(in_pool[i] for i in idx)
    if not out:
        raise ValueError(f"no eligible negatives for query {query.query_id!r}")
    return out


class AdamW:
    """Adam with decoupled weight decay, canonical beta/eps defaults."""

    def __init__(self, params: gr.Params, lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.steps = 0

    def step(self, grads: gr.Params) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            self.params[k] = p * (1.0 - self.lr * self.weight_decay) - self.lr * update


@dataclass
class TrainResult:
    attn: AttentionConfig
    loss_trace: List[float] = field(default_factory=list)


def _positive_candidates(cands: CandidateList, qrels: Qrels, qid: str) -> List[Candidate]:
    rel = set(qrels.relevant(qid))
    return [c for c in cands.candidates if c.doc_id in rel]


def make_triplets(dataset: Dataset, config: TrainingConfig, seed: int = 0) -> List[Tuple[Triplet, UserProfile]]:
    """A fixed set of (triplet, sampled profile) pairs, one positive per query."""
    rng = np.random.default_rng(seed)
    eligible = [q for q in dataset.queries
                if q.query_id in dataset.candidates
                and _positive_candidates(dataset.candidates[q.query_id], dataset.qrels, q.query_id)]
    out = []
    for start in range(0, len(eligible), config.batch_size):
        batch_q = eligible[start : start + config.batch_size]
        out.extend(_batch_triplets(batch_q, dataset, config, rng))
    return out


def _batch_triplets(batch_q, dataset: Dataset, config: TrainingConfig, rng):
    positives = []
    for q in batch_q:
        pos = _positive_candidates(dataset.candidates[q.query_id], dataset.qrels, q.query_id)
        positives.append((q.query_id, pos[rng.integers(len(pos))]))
    out = []
    for q, (_, pos) in zip(batch_q, positives):
        profile = dataset.profiles[q.user_id]
        if len(profile) > config.user_docs_sampled:
            idx = np.sort(rng.choice(len(profile), size=config.user_docs_sampled, replace=False))
            profile = profile.subset(idx)
        try:
            negs = sample_negatives(
                q, dataset.candidates[q.query_id], positives, dataset.qrels, rng,
                config.hard_negatives, config.in_batch_negatives, config.hard_depth,
            )
        except ValueError:
            log.debug("skipping query %s: no negatives", q.query_id)
            continue
        out.extend((Triplet(q, pos, neg), profile) for neg in negs)
    return out


def mean_loss(triplets, attn: AttentionConfig, margin: float = 0.1) -> float:
    """Average hinge loss of ``attn`` over (triplet, profile) pairs."""
    params = gr.trainable_params(attn)
    losses = [
        triplet_loss(t.query.vector, p.vectors, t.positive.vector, t.negative.vector,
                     attn, margin, params, with_grad=False)[0]
        for t, p in triplets
    ]
    return float(np.mean(losses)) if losses else 0.0


def train(dataset: Dataset, config: TrainingConfig, attn: AttentionConfig) -> TrainResult:
    """Minibatch AdamW on the triplet hinge loss; returns updated config and loss trace.

    ``dataset`` should already be restricted to the training queries.
    """
    params = gr.trainable_params(attn)
    if not params:
        raise ValueError(f"{attn.variant.value} with {attn.alignment.value} has nothing to train")
    if not dataset.queries:
        raise ValueError("empty training set")
    opt = AdamW(params, config.learning_rate, config.weight_decay)
    eligible = [q for q in dataset.queries
                if q.query_id in dataset.candidates
                and _positive_candidates(dataset.candidates[q.query_id], dataset.qrels, q.query_id)]
    if not eligible:
        raise ValueError("no training query has a relevant candidate")
    trace: List[float] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(eligible))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_q = [eligible[i] for i in order[start : start + config.batch_size]]
            triplets = _batch_triplets(batch_q, dataset, config, rng)
            if not triplets:
                continue
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for t, prof in triplets:
                loss, g, _ = triplet_loss(
                    t.query.vector, prof.vectors, t.positive.vector, t.negative.vector,
                    attn, config.margin, opt.params,
                )
                batch_loss += loss
                for k in grads:
                    grads[k] += g[k]
            batch_loss /= len(triplets)
            if not math.isfinite(batch_loss):
                trace.append(batch_loss)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", trace)
            opt.step({k: g / len(triplets) for k, g in grads.items()})
            epoch_losses.append(batch_loss)
        trace.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, trace[-1])
    return TrainResult(gr.with_params(attn, opt.params), trace)
