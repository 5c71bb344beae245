import filecmp

import numpy as np
import pytest

from denoise_rank import io
from denoise_rank.experiment import default_attention, evaluate_fixed
from denoise_rank.synth import (
    ACADEMIC_USER_DOCS,
    WEB_USER_DOCS,
    SynthConfig,
    academic_like_preset,
    generate,
    profile_stats,
    web_like_preset,
)
from denoise_rank.types import Variant, validate_dataset

SMALL = dict(dimension=16, topics=8, users=30, queries_per_user=3, user_docs_per_user=10,
             candidates_per_query=40, hard_negatives_per_query=8, docs_per_subtopic=10)


def query_doc_cosines(ds):
    """Per user: cosine of every profile document to each of the user's queries."""
    out = {}
    for q in ds.queries:
        prof = ds.profiles[q.user_id]
        cos = prof.vectors @ q.vector / (np.linalg.norm(prof.vectors, axis=1) * np.linalg.norm(q.vector))
        out.setdefault(q.user_id, []).append(cos)
    return {u: np.max(np.stack(c), axis=0) for u, c in out.items()}


class TestGenerate:
    def test_clean_profiles_share_query_topics(self):
        ds = generate(SynthConfig(**{**SMALL, "dimension": 64}, on_topic_fraction=1.0, interests_per_user=1, doc_noise=0.3))
        for cos in query_doc_cosines(ds).values():
            assert np.all(cos > 0.4)

    def test_pure_noise_profiles(self):
        ds = generate(SynthConfig(**{**SMALL, "dimension": 64}, on_topic_fraction=0.0, interests_per_user=1, doc_noise=0.3))
        for cos in query_doc_cosines(ds).values():
            assert np.all(cos < 0.4)

    def test_seeded_bytes(self, tmp_path):
        cfg = SynthConfig(**SMALL, seed=5)
        io.save_dataset(generate(cfg), tmp_path / "a")
        io.save_dataset(generate(cfg), tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
        assert not mismatch and not errors

    def test_different_seeds_differ(self):
        a = generate(SynthConfig(**SMALL, seed=1))
        b = generate(SynthConfig(**SMALL, seed=2))
        assert not np.array_equal(a.queries[0].vector, b.queries[0].vector)

    def test_every_query_has_a_relevant_candidate(self):
        ds = generate(SynthConfig(**SMALL, relevant_per_query=3))
        report = validate_dataset(*ds.as_tuple())
        assert report.ok
        for q in ds.queries:
            rel = set(ds.qrels.relevant(q.query_id))
            assert len(rel) == 3 and rel <= set(ds.candidates[q.query_id].doc_ids)

    def test_shapes_and_splits(self):
        cfg = SynthConfig(**SMALL)
        ds = generate(cfg)
        assert len(ds.queries) == cfg.users * cfg.queries_per_user
        assert all(len(c) == cfg.candidates_per_query for c in ds.candidates.values())
        assert set(ds.splits.values()) == {"train", "val", "test"}

    def test_clean_limit_mean_model_is_near_ideal(self):
        cfg = SynthConfig(**SMALL, on_topic_fraction=1.0, interests_per_user=1, loyalty=1.0,
                          doc_noise=0.05, noise_std=0.0)
        rows = evaluate_fixed(generate(cfg), default_attention(Variant.MEAN, dim=16), 1.0)
        assert np.mean([r["ap100"] for r in rows.values()]) > 0.95

    def test_document_count_statistics(self):
        cfg = SynthConfig(**{**SMALL, "users": 600, "user_docs_per_user": 30.0}, user_docs_std=20.0, user_docs_min=5)
        stats = profile_stats(generate(cfg))
        se = cfg.user_docs_std / np.sqrt(cfg.users)
        assert abs(stats["user_docs_mean"] - cfg.user_docs_per_user) < 4 * se
        assert abs(stats["user_docs_std"] - cfg.user_docs_std) < 0.2 * cfg.user_docs_std


class TestConfigValidation:
    @pytest.mark.parametrize("bad", [
        {"topics": 20, "dimension": 16},
        {"topics": 1},
        {"on_topic_fraction": 1.5},
        {"relevant_per_query": 50, "candidates_per_query": 40},
        {"users": 0},
    ])
    def test_infeasible(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(**{**SMALL, **bad})

    def test_from_mapping(self):
        cfg = SynthConfig.from_mapping({"users": "12", "noise_std": "0.2"})
        assert cfg.users == 12 and cfg.noise_std == 0.2
        with pytest.raises(ValueError):
            SynthConfig.from_mapping({"nonsense": "1"})


class TestPresets:
    def test_full_scale_document_counts(self):
        assert web_like_preset(scale=1.0).user_docs_per_user == pytest.approx(136.62)
        assert academic_like_preset(scale=1.0).user_docs_per_user == pytest.approx(53.59)

    def test_desk_scale_divides_by_four(self):
        for preset, (mean, std) in ((web_like_preset, WEB_USER_DOCS), (academic_like_preset, ACADEMIC_USER_DOCS)):
            full, desk = preset(scale=1.0), preset()
            assert desk.user_docs_per_user == pytest.approx(mean / 4)
            assert desk.user_docs_std == pytest.approx(std / 4)
            assert desk.candidates_per_query == full.candidates_per_query // 4
        ratio_full = web_like_preset(1.0).user_docs_per_user / academic_like_preset(1.0).user_docs_per_user
        assert web_like_preset().user_docs_per_user / academic_like_preset().user_docs_per_user == pytest.approx(ratio_full)

    def test_regimes(self):
        web, acad = web_like_preset(), academic_like_preset()
        assert web.interests_per_user > acad.interests_per_user
        assert web.on_topic_fraction < acad.on_topic_fraction

    def test_overrides(self):
        assert web_like_preset(users=10).users == 10
