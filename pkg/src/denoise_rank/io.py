"""File formats: embeddings JSONL, TREC runs and qrels, dataset directories,
parameter files.

Dataset directory layout::

    embeddings.jsonl   {"id": ..., "vector": [...]} for queries and all documents
    queries.tsv        query_id <TAB> user_id <TAB> split
    profiles.tsv       user_id <TAB> doc_id      (one line per profile document)
    first_stage.run    TREC run holding every candidate with its first-stage score
    qrels.txt          TREC qrels

Floats are written with ``repr`` so a write/read cycle is lossless.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .rerank import FusionConfig
from .types import (
    AdditiveParams,
    AttentionConfig,
    CandidateList,
    Dataset,
    MultiHeadParams,
    Qrels,
    Query,
    Run,
    UserProfile,
    parse_alignment,
    parse_variant,
)

log = logging.getLogger(__name__)

EMBEDDINGS_FILE = "embeddings.jsonl"
QUERIES_FILE = "queries.tsv"
PROFILES_FILE = "profiles.tsv"
RUN_FILE = "first_stage.run"
QRELS_FILE = "qrels.txt"


class FormatError(ValueError):
    """A malformed input file; the message names the file and line."""


def _where(path, lineno: int) -> str:
    return f"{path}:{lineno}"


# ---------------------------------------------------------------- embeddings

def load_embeddings(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    first: Optional[Tuple[str, int]] = None  # (id, dim) of the first record
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = rec["id"]
                vec = np.asarray(rec["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{_where(path, lineno)}: malformed embedding record ({exc})") from None
            if not isinstance(doc_id, str) or vec.ndim != 1 or vec.size == 0:
                raise FormatError(f"{_where(path, lineno)}: expected a string id and a non-empty vector")
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{_where(path, lineno)}: non-finite value in vector of {doc_id!r}")
            if first is None:
                first = (doc_id, vec.size)
            elif vec.size != first[1]:
                raise FormatError(
                    f"{_where(path, lineno)}: {doc_id!r} has dimension {vec.size} "
                    f"but {first[0]!r} has dimension {first[1]}"
                )
            if doc_id in out:
                raise FormatError(f"{_where(path, lineno)}: duplicate id {doc_id!r}")
            out[doc_id] = vec
    if not out:
        log.warning("%s holds no embeddings", path)
    return out


def write_embeddings(path, vectors: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, vec in vectors.items():
            fh.write(json.dumps({"id": doc_id, "vector": [float(x) for x in np.asarray(vec)]}) + "\n")


# ---------------------------------------------------------------- runs

def load_run(path) -> Run:
    """Six-column TREC run. Lines of one query must carry ranks 1, 2, 3, ...

    A score that rises with rank is only a warning: the rank decides order.
    """
    rows: Dict[str, List[Tuple[str, float]]] = {}
    last_rank: Dict[str, int] = {}
    tag = None
    disagreements = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise FormatError(f"{_where(path, lineno)}: expected 6 columns, got {len(parts)}")
            qid, _, doc_id, rank_s, score_s, run_tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError:
                raise FormatError(f"{_where(path, lineno)}: rank must be an integer and score a number") from None
            expected = last_rank.get(qid, 0) + 1
            if rank != expected:
                raise FormatError(f"{_where(path, lineno)}: query {qid!r} has rank {rank}, expected {expected}")
            last_rank[qid] = rank
            docs = rows.setdefault(qid, [])
            if docs and score > docs[-1][1]:
                disagreements += 1
            docs.append((doc_id, score))
            tag = tag or run_tag
    if disagreements:
        log.warning("%s: %d score(s) increase with rank; rank order kept", path, disagreements)
    return Run(rows, tag or "run")


def write_run(path, run: Run, tag: Optional[str] = None) -> None:
    tag = tag or run.tag
    if not tag or any(ch.isspace() for ch in tag):
        raise ValueError(f"run tag {tag!r} must be a non-empty token")
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in run.rows.items():
            for rank, (doc_id, score) in enumerate(docs, 1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {float(score)!r} {tag}\n")


# ---------------------------------------------------------------- qrels

def load_qrels(path) -> Qrels:
    judgments: Dict[str, Dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{_where(path, lineno)}: expected 4 columns, got {len(parts)}")
            qid, _, doc_id, rel_s = parts
            try:
                rel = int(rel_s)
            except ValueError:
                raise FormatError(f"{_where(path, lineno)}: relevance {rel_s!r} is not an integer") from None
            if rel < 0:
                raise FormatError(f"{_where(path, lineno)}: negative relevance {rel}")
            docs = judgments.setdefault(qid, {})
            if doc_id in docs:
                log.warning("%s: duplicate judgment for (%s, %s); keeping the last", _where(path, lineno), qid, doc_id)
            docs[doc_id] = rel
    return Qrels(judgments)


def write_qrels(path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, doc_id, rel in qrels.triples():
            fh.write(f"{qid} 0 {doc_id} {rel}\n")


# ---------------------------------------------------------------- datasets

def _read_tsv(path, n_cols: int) -> Iterable[Tuple[int, List[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != n_cols:
                raise FormatError(f"{_where(path, lineno)}: expected {n_cols} tab-separated columns")
            yield lineno, parts


def _lookup(emb: Mapping[str, np.ndarray], key: str, what: str) -> np.ndarray:
    try:
        return emb[key]
    except KeyError:
        raise FormatError(f"no embedding for {what} {key!r}") from None


def load_dataset(directory, run_path=None, qrels_path=None) -> Dataset:
    """Read a dataset directory. ``run_path`` replaces the first-stage run."""
    d = Path(directory)
    emb = load_embeddings(d / EMBEDDINGS_FILE)
    queries: List[Query] = []
    splits: Dict[str, str] = {}
    for _, (qid, uid, split) in _read_tsv(d / QUERIES_FILE, 3):
        queries.append(Query(qid, uid, _lookup(emb, qid, "query")))
        if split:
            splits[qid] = split
    profile_docs: Dict[str, List[str]] = {}
    for _, (uid, doc_id) in _read_tsv(d / PROFILES_FILE, 2):
        profile_docs.setdefault(uid, []).append(doc_id)
    profiles = {
        uid: UserProfile(uid, tuple(docs), np.stack([_lookup(emb, x, "profile document") for x in docs]))
        for uid, docs in profile_docs.items()
    }
    run = load_run(run_path or d / RUN_FILE)
    candidates = {}
    for qid, docs in run.rows.items():
        ids = tuple(doc_id for doc_id, _ in docs)
        candidates[qid] = CandidateList(
            qid, ids, np.array([s for _, s in docs]), np.stack([_lookup(emb, x, "candidate") for x in ids])
        )
    qrels = load_qrels(qrels_path or d / QRELS_FILE)
    return Dataset(profiles, tuple(queries), candidates, qrels, splits)


def save_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vectors: Dict[str, np.ndarray] = {}

    def put(key: str, vec: np.ndarray) -> None:
        if key in vectors and not np.array_equal(vectors[key], vec):
            raise ValueError(f"id {key!r} is used for two different vectors")
        vectors[key] = vec

    for q in dataset.queries:
        put(q.query_id, q.vector)
    for p in dataset.profiles.values():
        for doc_id, vec in p.documents:
            put(doc_id, vec)
    for c in dataset.candidates.values():
        for doc_id, vec in zip(c.doc_ids, c.vectors):
            put(doc_id, vec)
    write_embeddings(d / EMBEDDINGS_FILE, vectors)
    with open(d / QUERIES_FILE, "w", encoding="utf-8") as fh:
        for q in dataset.queries:
            fh.write(f"{q.query_id}\t{q.user_id}\t{dataset.splits.get(q.query_id, '')}\n")
    with open(d / PROFILES_FILE, "w", encoding="utf-8") as fh:
        for uid, p in dataset.profiles.items():
            for doc_id in p.doc_ids:
                fh.write(f"{uid}\t{doc_id}\n")
    rows = {qid: list(zip(c.doc_ids, (float(s) for s in c.scores))) for qid, c in dataset.candidates.items()}
    write_run(d / RUN_FILE, Run(rows, "first_stage"))
    write_qrels(d / QRELS_FILE, dataset.qrels)


# ---------------------------------------------------------------- parameter files

def _arrays_to_lists(arrays: Mapping[str, np.ndarray]) -> Dict[str, list]:
    return {k: np.asarray(v).tolist() for k, v in arrays.items()}


def attention_to_dict(attn: AttentionConfig) -> dict:
    out = {
        "variant": attn.variant.value,
        "alignment": attn.alignment.value,
        "threshold_logit": float(attn.threshold_logit),
        "epsilon": float(attn.epsilon),
        "heads": int(attn.heads),
    }
    if attn.additive_params is not None:
        out["additive_params"] = _arrays_to_lists(attn.additive_params.arrays())
    if attn.multihead_params is not None:
        out["multihead_params"] = _arrays_to_lists(attn.multihead_params.arrays())
    return out


def attention_from_dict(d: Mapping) -> AttentionConfig:
    kwargs = {}
    if d.get("additive_params") is not None:
        kwargs["additive_params"] = AdditiveParams(**{k: np.array(v) for k, v in d["additive_params"].items()})
    if d.get("multihead_params") is not None:
        kwargs["multihead_params"] = MultiHeadParams(**{k: np.array(v) for k, v in d["multihead_params"].items()})
    return AttentionConfig(
        variant=parse_variant(d["variant"]),
        alignment=parse_alignment(d["alignment"]),
        threshold_logit=float(d.get("threshold_logit", 0.0)),
        epsilon=float(d.get("epsilon", 1e-9)),
        heads=int(d.get("heads", 4)),
        **kwargs,
    )


def save_params(path, attn: AttentionConfig, fusion: Optional[FusionConfig] = None,
                loss_trace: Iterable[float] = (), extra: Optional[Mapping] = None) -> None:
    """Write a parameter file: attention config, fusion settings, loss trace."""
    doc = {"attention": attention_to_dict(attn), "loss_trace": [float(x) for x in loss_trace]}
    if fusion is not None:
        doc["fusion"] = asdict(fusion)
    if extra:
        doc.update(extra)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)


def load_params(path) -> Tuple[AttentionConfig, Optional[FusionConfig], List[float], dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a parameter file ({exc})") from None
    if "attention" not in doc:
        raise FormatError(f"{path}: missing 'attention' section")
    fusion = FusionConfig(**doc["fusion"]) if "fusion" in doc else None
    trace = [float(x) for x in doc.get("loss_trace", [])]
    if any(not math.isfinite(x) for x in trace):
        log.warning("%s: loss trace holds non-finite values", path)
    return attention_from_dict(doc["attention"]), fusion, trace, doc
