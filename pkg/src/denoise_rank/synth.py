"""Synthetic topic-clustered personalization benchmarks.

Geometry
--------
``topics`` orthonormal anchors live in R^dimension. Every topic has
``subtopics`` random unit directions; a document about (topic k, subtopic s)
is ``anchor_k + subtopic_weight * dir_ks + doc_noise * noise``, rescaled to
norm ``embedding_norm``. Queries carry only their topic anchor (plus
noise), so they are ambiguous between subtopics; which subtopic is
relevant is a property of the user.

Users
-----
Each user has ``interests_per_user`` topics, each with a preferred
subtopic, and issues queries only on those topics. A fraction
``on_topic_fraction`` of their documents is drawn from their interests
(on the preferred subtopic with probability ``loyalty``); the rest is
noise drawn from topics the user never queries.

Candidates
----------
Per query: ``relevant_per_query`` corpus documents from the user's
preferred subtopic, ``hard_negatives_per_query`` documents from the same
topic but other subtopics, and off-topic documents filling the list to
``candidates_per_query``. First-stage score = cos(query, doc) + Gaussian
noise with std ``noise_std``.

Seeds: the corpus and topic geometry use ``default_rng([seed, 0])``, user
``i`` uses ``default_rng([seed, 1, i])``, and split assignment uses
``default_rng([seed, 2])``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List

import numpy as np

from .types import CandidateList, Dataset, Qrels, Query, UserProfile


@dataclass(frozen=True)
class SynthConfig:
    dimension: int = 64
    topics: int = 32
    users: int = 400
    queries_per_user: int = 4
    user_docs_per_user: float = 34.0
    on_topic_fraction: float = 0.5
    candidates_per_query: int = 250
    relevant_per_query: int = 1
    noise_std: float = 0.1
    seed: int = 0
    user_docs_std: float = 0.0
    user_docs_min: int = 1
    interests_per_user: int = 2
    subtopics: int = 4
    subtopic_weight: float = 0.7
    doc_noise: float = 1.0
    query_noise: float = 0.3
    loyalty: float = 0.7
    hard_negatives_per_query: int = 20
    docs_per_subtopic: int = 40
    embedding_norm: float = 8.0
    train_fraction: float = 0.4
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.on_topic_fraction <= 1.0:
            raise ValueError("on_topic_fraction must lie in [0, 1]")
        if not 0.0 <= self.loyalty <= 1.0:
            raise ValueError("loyalty must lie in [0, 1]")
        if self.topics < 2:
            raise ValueError("need at least 2 topics")
        if self.topics > self.dimension:
            raise ValueError(
                f"{self.topics} topics cannot be near-orthogonal in dimension {self.dimension}"
            )
        if self.relevant_per_query < 1:
            raise ValueError("need at least one relevant document per query")
        if self.relevant_per_query + self.hard_negatives_per_query > self.candidates_per_query:
            raise ValueError("relevant + hard negatives exceed candidates_per_query")
        if self.relevant_per_query > self.docs_per_subtopic:
            raise ValueError("docs_per_subtopic too small for relevant_per_query")
        if not 1 <= self.interests_per_user < self.topics:
            raise ValueError("interests_per_user must be in [1, topics)")
        if self.subtopics < 2:
            raise ValueError("need at least 2 subtopics for hard negatives")
        if self.hard_negatives_per_query > (self.subtopics - 1) * self.docs_per_subtopic:
            raise ValueError("not enough same-topic documents for hard negatives")
        off_topic_pool = (self.topics - 1) * self.subtopics * self.docs_per_subtopic
        if self.candidates_per_query - self.relevant_per_query - self.hard_negatives_per_query > off_topic_pool:
            raise ValueError("corpus too small for candidates_per_query")
        if self.user_docs_per_user < max(1, self.user_docs_min):
            raise ValueError("user_docs_per_user must be >= max(1, user_docs_min)")
        if self.user_docs_std < 0 or self.noise_std < 0 or self.doc_noise < 0:
            raise ValueError("standard deviations must be >= 0")
        if self.train_fraction < 0 or self.val_fraction < 0 or self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train + val fractions must leave room for a test split")
        for name in ("dimension", "users", "queries_per_user", "candidates_per_query", "docs_per_subtopic"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_mapping(cls, values: Dict[str, object]) -> "SynthConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown synth option {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(raw) if not isinstance(default, bool) else raw
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


# Per-user document counts reported for the two collections the presets mimic.
WEB_USER_DOCS = (136.62, 134.17)
ACADEMIC_USER_DOCS = (53.59, 50.94)
MIN_USER_DOCS = 20
FULL_CANDIDATES = 1000
DESK_SCALE = 0.25


def _scaled(config: SynthConfig, scale: float) -> SynthConfig:
    return replace(
        config,
        user_docs_per_user=config.user_docs_per_user * scale,
        user_docs_std=config.user_docs_std * scale,
        user_docs_min=max(1, int(round(config.user_docs_min * scale))),
        candidates_per_query=int(round(config.candidates_per_query * scale)),
    )


def web_like_preset(scale: float = DESK_SCALE, **overrides) -> SynthConfig:
    """Many interests per user and noisy profiles, ~137 user docs at scale 1."""
    base = SynthConfig(
        user_docs_per_user=WEB_USER_DOCS[0],
        user_docs_std=WEB_USER_DOCS[1],
        user_docs_min=MIN_USER_DOCS,
        candidates_per_query=FULL_CANDIDATES,
        interests_per_user=6,
        on_topic_fraction=0.4,
        relevant_per_query=1,
    )
    return replace(_scaled(base, scale), **overrides)


def academic_like_preset(scale: float = DESK_SCALE, **overrides) -> SynthConfig:
    """Few focused interests and clean profiles, ~54 user docs at scale 1."""
    base = SynthConfig(
        user_docs_per_user=ACADEMIC_USER_DOCS[0],
        user_docs_std=ACADEMIC_USER_DOCS[1],
        user_docs_min=MIN_USER_DOCS,
        candidates_per_query=FULL_CANDIDATES,
        interests_per_user=2,
        on_topic_fraction=0.9,
        relevant_per_query=5,
    )
    return replace(_scaled(base, scale), **overrides)


PRESETS = {"web_like": web_like_preset, "academic_like": academic_like_preset}


def sample_doc_counts(config: SynthConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """Counts >= user_docs_min with the configured mean and (approximately) std.

    The excess over the minimum is negative-binomial (gamma-Poisson) when the
    requested variance exceeds the mean, Poisson otherwise.
    """
    lo = max(1, config.user_docs_min)
    excess_mean = config.user_docs_per_user - lo
    if excess_mean <= 0:
        return np.full(size, lo, dtype=int)
    var = config.user_docs_std**2
    if var > excess_mean:
        shape = excess_mean**2 / (var - excess_mean)
        lam = rng.gamma(shape, excess_mean / shape, size=size)
    else:
        lam = np.full(size, excess_mean)
    return lo + rng.poisson(lam)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class _Geometry:
    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        m, T, S = config.dimension, config.topics, config.subtopics
        basis, _ = np.linalg.qr(rng.standard_normal((m, T)))
        self.anchors = basis.T  # (T, m) orthonormal rows
        self.subdirs = _unit(rng.standard_normal((T, S, m)))
        self.config = config

    def docs(self, topic: int, subtopic, rng, n: int) -> np.ndarray:
        c = self.config
        sub = np.atleast_1d(subtopic)
        noise = rng.standard_normal((n, c.dimension)) / math.sqrt(c.dimension)
        raw = self.anchors[topic] + c.subtopic_weight * self.subdirs[topic, sub] + c.doc_noise * noise
        return c.embedding_norm * _unit(raw)

    def query(self, topic: int, rng) -> np.ndarray:
        c = self.config
        noise = rng.standard_normal(c.dimension) / math.sqrt(c.dimension)
        return c.embedding_norm * _unit(self.anchors[topic] + c.query_noise * noise)


def generate(config: SynthConfig) -> Dataset:
    c = config
    geo_rng = np.random.default_rng([c.seed, 0])
    geo = _Geometry(c, geo_rng)
    T, S, P = c.topics, c.subtopics, c.docs_per_subtopic
    # corpus[t, s] holds P documents; id = corpus index
    corpus = np.stack([
        np.stack([geo.docs(t, s, geo_rng, P) for s in range(S)]) for t in range(T)
    ])  # (T, S, P, m)
    corpus_ids = np.array([f"d{t:03d}_{s}_{p:03d}" for t in range(T) for s in range(S) for p in range(P)])
    corpus_flat = corpus.reshape(T * S * P, c.dimension)

    def cell(t, s):
        return (t * S + s) * P + np.arange(P)

    profiles: Dict[str, UserProfile] = {}
    queries: List[Query] = []
    candidates: Dict[str, CandidateList] = {}
    judgments: Dict[str, Dict[str, int]] = {}
    count_rng = np.random.default_rng([c.seed, 3])
    counts = sample_doc_counts(c, count_rng, c.users)
    for ui in range(c.users):
        rng = np.random.default_rng([c.seed, 1, ui])
        uid = f"u{ui:05d}"
        interests = rng.choice(T, size=c.interests_per_user, replace=False)
        preferred = rng.integers(0, S, size=c.interests_per_user)
        others = np.setdiff1d(np.arange(T), interests)
        n_docs = int(counts[ui])
        useful = rng.random(n_docs) < c.on_topic_fraction
        vecs = np.empty((n_docs, c.dimension))
        for j in range(n_docs):
            if useful[j]:
                slot = rng.integers(c.interests_per_user)
                topic = interests[slot]
                sub = preferred[slot] if rng.random() < c.loyalty else rng.integers(S)
            else:
                topic = others[rng.integers(others.size)]
                sub = rng.integers(S)
            vecs[j] = geo.docs(topic, sub, rng, 1)[0]
        profiles[uid] = UserProfile(uid, tuple(f"{uid}_doc{j:04d}" for j in range(n_docs)), vecs)

        for qi in range(c.queries_per_user):
            qid = f"{uid}_q{qi}"
            slot = rng.integers(c.interests_per_user)
            topic, sub = int(interests[slot]), int(preferred[slot])
            qvec = geo.query(topic, rng)
            rel_idx = rng.choice(cell(topic, sub), size=c.relevant_per_query, replace=False)
            same_topic = np.concatenate([cell(topic, s) for s in range(S) if s != sub])
            hard_idx = rng.choice(same_topic, size=c.hard_negatives_per_query, replace=False)
            n_off = c.candidates_per_query - c.relevant_per_query - c.hard_negatives_per_query
            off_pool_size = (T - 1) * S * P
            off_pos = rng.choice(off_pool_size, size=n_off, replace=False)
            # map positions in the off-topic pool back to corpus indices (skip the query topic)
            off_idx = off_pos + np.where(off_pos >= topic * S * P, S * P, 0)
            idx = np.concatenate([rel_idx, hard_idx, off_idx])
            vec = corpus_flat[idx]
            cos = (vec @ qvec) / (np.linalg.norm(vec, axis=1) * np.linalg.norm(qvec))
            scores = cos + c.noise_std * rng.standard_normal(idx.size)
            queries.append(Query(qid, uid, qvec))
            candidates[qid] = CandidateList(qid, tuple(corpus_ids[idx]), scores, vec)
            judgments[qid] = {str(corpus_ids[i]): 1 for i in rel_idx}

    split_rng = np.random.default_rng([c.seed, 2])
    order = split_rng.permutation(len(queries))
    n_train = int(round(c.train_fraction * len(queries)))
    n_val = int(round(c.val_fraction * len(queries)))
    splits = {}
    for rank, i in enumerate(order):
        name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        splits[queries[i].query_id] = name
    return Dataset(profiles, tuple(queries), candidates, Qrels(judgments), splits)


def profile_stats(dataset: Dataset) -> Dict[str, float]:
    """Mean and std of user-document counts, over users and over queries."""
    per_user = np.array([len(p) for p in dataset.profiles.values()], dtype=float)
    per_query = np.array([len(dataset.profiles[q.user_id]) for q in dataset.queries], dtype=float)
    return {
        "users": float(per_user.size),
        "user_docs_mean": float(per_user.mean()),
        "user_docs_std": float(per_user.std()),
        "query_user_docs_mean": float(per_query.mean()),
        "queries": float(len(dataset.queries)),
    }
