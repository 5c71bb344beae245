"""Shared data model: embeddings, profiles, queries, candidates, judgments, configs.

Every container here is a frozen dataclass whose numpy arrays are marked
read-only at construction, so instances can be shared between workers.
Vectors are plain 1-D float64 arrays; a set of vectors is a 2-D array with
one row per item, aligned index-wise with a tuple of ids.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


def as_vector(values, dim: Optional[int] = None) -> np.ndarray:
    """Coerce ``values`` to a finite, read-only float64 vector."""
    vec = np.array(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("vector contains NaN or Inf")
    vec.setflags(write=False)
    return vec


def _as_matrix(rows, n_rows: int) -> np.ndarray:
    mat = np.array(rows, dtype=np.float64)
    if n_rows == 0:
        mat = mat.reshape(0, mat.shape[-1] if mat.ndim == 2 else 0)
    if mat.ndim != 2 or mat.shape[0] != n_rows:
        raise ValueError(f"expected {n_rows} row vectors, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("vectors contain NaN or Inf")
    mat.setflags(write=False)
    return mat


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise ValueError(f"duplicate {what} id {dup!r}")


@dataclass(frozen=True)
class Query:
    query_id: str
    user_id: str
    vector: np.ndarray

    def __post_init__(self):
        if not self.query_id:
            raise ValueError("query_id must be nonempty")
        object.__setattr__(self, "vector", as_vector(self.vector))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class UserProfile:
    """A user and the vectors of the documents used to personalize for them."""

    user_id: str
    doc_ids: Tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        ids = tuple(self.doc_ids)
        object.__setattr__(self, "doc_ids", ids)
        object.__setattr__(self, "vectors", _as_matrix(self.vectors, len(ids)))
        _check_unique(ids, "profile document")

    @classmethod
    def from_documents(cls, user_id: str, documents: Sequence[Tuple[str, np.ndarray]]):
        ids = [doc_id for doc_id, _ in documents]
        vecs = [np.asarray(v, dtype=np.float64) for _, v in documents]
        return cls(user_id, tuple(ids), np.stack(vecs) if vecs else np.zeros((0, 0)))

    @property
    def documents(self) -> List[Tuple[str, np.ndarray]]:
        return list(zip(self.doc_ids, self.vectors))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def subset(self, indices) -> "UserProfile":
        indices = np.asarray(indices, dtype=int)
        return UserProfile(
            self.user_id,
            tuple(self.doc_ids[i] for i in indices),
            self.vectors[indices],
        )


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    first_stage_score: float
    vector: np.ndarray

    def __post_init__(self):
        if not math.isfinite(self.first_stage_score):
            raise ValueError(f"first-stage score of {self.doc_id!r} is not finite")
        object.__setattr__(self, "first_stage_score", float(self.first_stage_score))
        object.__setattr__(self, "vector", as_vector(self.vector))


@dataclass(frozen=True)
class CandidateList:
    """First-stage results for one query.

    Always stored in descending first-stage score order, ties broken by
    ascending doc_id, whatever order the constructor receives.
    """

    query_id: str
    doc_ids: Tuple[str, ...]
    scores: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = tuple(str(d) for d in self.doc_ids)
        _check_unique(ids, "candidate")
        scores = np.array(self.scores, dtype=np.float64).reshape(len(ids))
        if not np.all(np.isfinite(scores)):
            raise ValueError(f"non-finite first-stage score for query {self.query_id!r}")
        vectors = _as_matrix(self.vectors, len(ids))
        if ids:
            id_rank = np.argsort(np.argsort(np.array(ids, dtype=object)))
            order = np.lexsort((id_rank, -scores))
        else:
            order = np.arange(0)
        scores = scores[order]
        scores.setflags(write=False)
        vectors = vectors[order]
        vectors.setflags(write=False)
        object.__setattr__(self, "doc_ids", tuple(ids[i] for i in order))
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def from_candidates(cls, query_id: str, candidates: Sequence[Candidate]):
        if not candidates:
            return cls(query_id, (), np.zeros(0), np.zeros((0, 0)))
        return cls(
            query_id,
            tuple(c.doc_id for c in candidates),
            np.array([c.first_stage_score for c in candidates]),
            np.stack([c.vector for c in candidates]),
        )

    @property
    def candidates(self) -> List[Candidate]:
        return [Candidate(d, s, v) for d, s, v in zip(self.doc_ids, self.scores, self.vectors)]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.candidates)


class Qrels(Mapping[str, Dict[str, int]]):
    """Relevance judgments, query_id -> {doc_id: relevance}."""

    def __init__(self, judgments: Optional[Mapping[str, Mapping[str, int]]] = None):
        self._data: Dict[str, Dict[str, int]] = {}
        for qid, docs in (judgments or {}).items():
            for doc_id, rel in docs.items():
                self._set(qid, doc_id, rel)

    @classmethod
    def from_triples(cls, triples) -> "Qrels":
        qrels = cls()
        for qid, doc_id, rel in triples:
            qrels._set(qid, doc_id, rel)
        return qrels

    def _set(self, qid: str, doc_id: str, rel) -> None:
        if isinstance(rel, bool) or int(rel) != rel:
            raise ValueError(f"relevance must be an integer, got {rel!r}")
        if rel < 0:
            raise ValueError(f"relevance must be nonnegative, got {rel}")
        self._data.setdefault(qid, {})[doc_id] = int(rel)

    def __getitem__(self, qid: str) -> Dict[str, int]:
        return self._data[qid]

    def __iter__(self):
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def relevance(self, qid: str, doc_id: str) -> int:
        return self._data.get(qid, {}).get(doc_id, 0)

    def relevant(self, qid: str) -> List[str]:
        return [d for d, r in self._data.get(qid, {}).items() if r > 0]

    def n_relevant(self, qid: str) -> int:
        return sum(1 for r in self._data.get(qid, {}).values() if r > 0)

    def triples(self) -> Iterator[Tuple[str, str, int]]:
        for qid, docs in self._data.items():
            for doc_id, rel in docs.items():
                yield qid, doc_id, rel


class Variant(str, enum.Enum):
    MEAN = "Mean"
    SOFTMAX = "Softmax"
    ZERO_ATTENTION = "ZeroAttention"
    MULTI_HEAD = "MultiHead"
    DENOISING = "Denoising"
    FILTER_ATTENTION = "FilterAttention"
    DENOISING_SOFTMAX = "DenoisingSoftmax"


class Alignment(str, enum.Enum):
    DOT = "Dot"
    SCALED_DOT = "ScaledDot"
    COSINE = "Cosine"
    SHIFTED_COSINE = "ShiftedCosine"
    ADDITIVE = "Additive"


def parse_variant(name) -> Variant:
    if isinstance(name, Variant):
        return name
    lookup = {v.value.lower(): v for v in Variant}
    try:
        return lookup[str(name).replace("-", "").replace("_", "").lower()]
    except KeyError:
        raise ValueError(f"unknown attention variant {name!r}") from None


def parse_alignment(name) -> Alignment:
    if isinstance(name, Alignment):
        return name
    lookup = {a.value.lower(): a for a in Alignment}
    try:
        return lookup[str(name).replace("-", "").replace("_", "").lower()]
    except KeyError:
        raise ValueError(f"unknown alignment {name!r}") from None


def _frozen_array(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameters contain NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AdditiveParams:
    """Single tanh layer: score = v . tanh(W_q q + W_d d)."""

    W_q: np.ndarray
    W_d: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        W_q = _frozen_array(self.W_q)
        if W_q.ndim != 2:
            raise ValueError("W_q must be a matrix")
        h, m = W_q.shape
        object.__setattr__(self, "W_q", W_q)
        object.__setattr__(self, "W_d", _frozen_array(self.W_d, (h, m)))
        object.__setattr__(self, "v", _frozen_array(self.v, (h,)))

    @property
    def dim(self) -> int:
        return self.W_q.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def init(cls, dim: int, hidden: Optional[int] = None, seed: int = 0) -> "AdditiveParams":
        """Glorot-uniform initialisation; hidden width defaults to ``dim``."""
        hidden = dim if hidden is None else hidden
        rng = np.random.default_rng(seed)
        bound = math.sqrt(6.0 / (dim + hidden))
        return cls(
            rng.uniform(-bound, bound, (hidden, dim)),
            rng.uniform(-bound, bound, (hidden, dim)),
            rng.uniform(-1.0, 1.0, hidden) / math.sqrt(hidden),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W_q": self.W_q, "W_d": self.W_d, "v": self.v}


@dataclass(frozen=True)
class MultiHeadParams:
    """Per-head projections stacked as (heads, dim/heads, dim), plus W_O (dim, dim)."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray

    def __post_init__(self):
        W_Q = _frozen_array(self.W_Q)
        if W_Q.ndim != 3:
            raise ValueError("W_Q must have shape (heads, dim/heads, dim)")
        heads, dk, m = W_Q.shape
        if heads * dk != m:
            raise ValueError(f"dimension {m} is not heads ({heads}) x head width ({dk})")
        object.__setattr__(self, "W_Q", W_Q)
        object.__setattr__(self, "W_K", _frozen_array(self.W_K, W_Q.shape))
        object.__setattr__(self, "W_V", _frozen_array(self.W_V, W_Q.shape))
        object.__setattr__(self, "W_O", _frozen_array(self.W_O, (m, m)))

    @property
    def heads(self) -> int:
        return self.W_Q.shape[0]

    @property
    def dim(self) -> int:
        return self.W_Q.shape[2]

    @classmethod
    def identity(cls, dim: int, heads: int) -> "MultiHeadParams":
        """Head i projects onto coordinate block i; W_O is the identity."""
        if heads < 1 or dim % heads:
            raise ValueError(f"dimension {dim} is not divisible by {heads} heads")
        blocks = np.eye(dim).reshape(heads, dim // heads, dim)
        return cls(blocks, blocks, blocks, np.eye(dim))

    @classmethod
    def init(cls, dim: int, heads: int, seed: int = 0, noise: float = 0.0) -> "MultiHeadParams":
        """Identity-block initialisation, optionally perturbed by Gaussian noise."""
        base = cls.identity(dim, heads)
        if noise == 0.0:
            return base
        rng = np.random.default_rng(seed)
        arrays = {k: a + noise * rng.standard_normal(a.shape) for k, a in base.arrays().items()}
        return cls(**arrays)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


DEFAULT_EPSILON = 1e-9


@dataclass(frozen=True)
class AttentionConfig:
    """Which user model to build and with which parameters.

    ``threshold_logit`` is the raw parameter t; the threshold actually
    subtracted from alignment scores is sigmoid(t).
    """

    variant: Variant = Variant.DENOISING
    alignment: Alignment = Alignment.SHIFTED_COSINE
    threshold_logit: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    heads: int = 4
    additive_params: Optional[AdditiveParams] = None
    multihead_params: Optional[MultiHeadParams] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        object.__setattr__(self, "alignment", parse_alignment(self.alignment))
        object.__setattr__(self, "threshold_logit", float(self.threshold_logit))
        if not math.isfinite(self.threshold_logit):
            raise ValueError("threshold logit must be finite")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.variant in (Variant.DENOISING, Variant.DENOISING_SOFTMAX):
            if self.alignment is not Alignment.SHIFTED_COSINE:
                raise ValueError(f"{self.variant.value} requires ShiftedCosine alignment")
        if self.variant is Variant.FILTER_ATTENTION and self.alignment is not Alignment.SCALED_DOT:
            raise ValueError("FilterAttention requires ScaledDot alignment")
        if self.variant is Variant.MULTI_HEAD:
            if self.heads < 1:
                raise ValueError("MultiHead requires heads >= 1")
            if self.multihead_params is None:
                raise ValueError("MultiHead requires multihead_params")
            if self.multihead_params.heads != self.heads:
                raise ValueError(
                    f"heads={self.heads} but parameters have {self.multihead_params.heads} heads"
                )
        if self.alignment is Alignment.ADDITIVE and self.additive_params is None:
            if self.variant in (Variant.SOFTMAX, Variant.ZERO_ATTENTION):
                raise ValueError("Additive alignment requires additive_params")

    @property
    def threshold(self) -> float:
        return sigmoid(self.threshold_logit)

    def with_threshold(self, sigma: float) -> "AttentionConfig":
        """Return a copy whose sigmoid(t) equals ``sigma`` (clamped away from 0 and 1)."""
        from dataclasses import replace

        return replace(self, threshold_logit=logit(sigma))


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


# sigmoid(LOGIT_CAP) rounds to exactly 1.0 and sigmoid(-LOGIT_CAP) is ~4e-18,
# so thresholds of exactly 0 and 1 survive the logit round trip.
LOGIT_CAP = 40.0


def logit(p: float) -> float:
    """Inverse sigmoid, saturating to +-LOGIT_CAP at the closed ends of [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {p}")
    if p <= 0.0:
        return -LOGIT_CAP
    if p >= 1.0:
        return LOGIT_CAP
    return float(np.clip(math.log(p) - math.log1p(-p), -LOGIT_CAP, LOGIT_CAP))


@dataclass
class Run:
    """A ranked result table: query_id -> [(doc_id, score), ...] in rank order."""

    rows: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    tag: str = "run"

    @classmethod
    def from_scores(cls, scores: Mapping[str, Mapping[str, float]], tag: str = "run") -> "Run":
        """Rank each query's docs by descending score, ties by ascending doc_id."""
        rows = {
            qid: sorted(((d, float(s)) for d, s in docs.items()), key=lambda x: (-x[1], x[0]))
            for qid, docs in scores.items()
        }
        return cls(rows, tag)

    def ranking(self, qid: str) -> List[str]:
        return [doc_id for doc_id, _ in self.rows.get(qid, [])]

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, qid) -> bool:
        return qid in self.rows

    def query_ids(self) -> List[str]:
        return list(self.rows)


@dataclass(frozen=True)
class Dataset:
    """Everything a re-ranking experiment reads.

    ``splits`` maps query_id to "train", "val" or "test"; queries missing
    from it belong to no split.
    """

    profiles: Dict[str, UserProfile]
    queries: Tuple[Query, ...]
    candidates: Dict[str, CandidateList]
    qrels: Qrels
    splits: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))

    def as_tuple(self):
        return self.profiles, list(self.queries), self.candidates, self.qrels

    @property
    def dim(self) -> int:
        return self.queries[0].dim

    def split(self, name: str) -> "Dataset":
        """The sub-dataset holding only queries of split ``name``."""
        queries = tuple(q for q in self.queries if self.splits.get(q.query_id) == name)
        if not queries:
            raise ValueError(f"split {name!r} has no queries")
        keep = {q.query_id for q in queries}
        users = {q.user_id for q in queries}
        return Dataset(
            {u: p for u, p in self.profiles.items() if u in users},
            queries,
            {qid: c for qid, c in self.candidates.items() if qid in keep},
            Qrels({qid: j for qid, j in self.qrels.items() if qid in keep}),
            {qid: name for qid in keep},
        )

    def query_ids(self) -> List[str]:
        return [q.query_id for q in self.queries]


@dataclass
class ValidationReport:
    dimension_mismatches: List[str] = field(default_factory=list)
    missing_profiles: List[str] = field(default_factory=list)
    unjudged_queries: List[str] = field(default_factory=list)
    missing_candidates: List[str] = field(default_factory=list)
    empty_profiles: List[str] = field(default_factory=list)
    zero_vectors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(
            (
                self.dimension_mismatches,
                self.missing_profiles,
                self.unjudged_queries,
                self.missing_candidates,
                self.empty_profiles,
            )
        )

    def entries(self) -> List[str]:
        out = [f"dimension mismatch: {x}" for x in self.dimension_mismatches]
        out += [f"missing profile: {x}" for x in self.missing_profiles]
        out += [f"no judged candidates: {x}" for x in self.unjudged_queries]
        out += [f"no candidates: {x}" for x in self.missing_candidates]
        out += [f"empty profile: {x}" for x in self.empty_profiles]
        out += [f"zero vector: {x}" for x in self.zero_vectors]
        return out


def validate_dataset(
    profiles: Mapping[str, UserProfile],
    queries: Sequence[Query],
    candidates: Mapping[str, CandidateList],
    qrels: Qrels,
    dim: Optional[int] = None,
) -> ValidationReport:
    """Check a loaded dataset for consistency without raising.

    The expected dimension is ``dim`` if given, otherwise that of the first
    query. Zero vectors are reported as warnings; they do not make the
    report fail since cosine-based scoring defines them.
    """
    report = ValidationReport()
    if dim is None and queries:
        dim = queries[0].dim

    def check_vec(label: str, vec: np.ndarray) -> None:
        if vec.shape[0] != dim:
            report.dimension_mismatches.append(label)
        elif not np.any(vec):
            report.zero_vectors.append(label)

    for q in queries:
        check_vec(f"query {q.query_id}", q.vector)
        if q.user_id not in profiles:
            report.missing_profiles.append(f"{q.query_id} (user {q.user_id})")
        elif len(profiles[q.user_id]) == 0:
            report.empty_profiles.append(f"{q.query_id} (user {q.user_id})")
        cands = candidates.get(q.query_id)
        if cands is None or len(cands) == 0:
            report.missing_candidates.append(q.query_id)
        else:
            judged_relevant = set(qrels.relevant(q.query_id))
            if not judged_relevant.intersection(cands.doc_ids):
                report.unjudged_queries.append(q.query_id)
    for uid in sorted(profiles):
        prof = profiles[uid]
        if len(prof) and prof.dim != dim:
            report.dimension_mismatches.extend(f"user doc {d}" for d in prof.doc_ids)
        else:
            for doc_id, vec in zip(prof.doc_ids, prof.vectors):
                check_vec(f"user doc {doc_id}", vec)
    for qid in sorted(candidates):
        cl = candidates[qid]
        if len(cl) and cl.vectors.shape[1] != dim:
            report.dimension_mismatches.extend(f"candidate {d}" for d in cl.doc_ids)
        else:
            for doc_id, vec in zip(cl.doc_ids, cl.vectors):
                check_vec(f"candidate {doc_id}", vec)
    return report
