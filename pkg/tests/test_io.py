import json
import logging

import numpy as np
import pytest

from denoise_rank import io
from denoise_rank.config import ConfigError, load_config, parse_kv
from denoise_rank.experiment import default_attention
from denoise_rank.rerank import FusionConfig
from denoise_rank.types import Qrels, Run, Variant


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestEmbeddings:
    def test_two_records(self, tmp_path):
        p = write(tmp_path / "e.jsonl", '{"id": "a", "vector": [1, 2]}\n{"id": "b", "vector": [3.5, -1]}\n')
        emb = io.load_embeddings(p)
        assert list(emb) == ["a", "b"]
        np.testing.assert_array_equal(emb["b"], [3.5, -1.0])

    def test_dimension_mismatch_names_line_and_ids(self, tmp_path):
        p = write(tmp_path / "e.jsonl", '{"id": "a", "vector": [1, 2]}\n{"id": "b", "vector": [1, 2, 3]}\n')
        with pytest.raises(io.FormatError, match=r":2: 'b' has dimension 3 but 'a' has dimension 2"):
            io.load_embeddings(p)

    def test_malformed_line(self, tmp_path):
        p = write(tmp_path / "e.jsonl", '{"id": "a", "vector": [1, 2]}\n{"id": "b", "vec\n')
        with pytest.raises(io.FormatError, match=":2:"):
            io.load_embeddings(p)

    def test_empty_file_warns(self, tmp_path, caplog):
        p = write(tmp_path / "e.jsonl", "")
        with caplog.at_level(logging.WARNING):
            assert io.load_embeddings(p) == {}
        assert "no embeddings" in caplog.text

    def test_round_trip_exact(self, tmp_path, rng):
        vecs = {f"id{i}": rng.standard_normal(5) for i in range(4)}
        io.write_embeddings(tmp_path / "e.jsonl", vecs)
        back = io.load_embeddings(tmp_path / "e.jsonl")
        for k in vecs:
            np.testing.assert_array_equal(back[k], vecs[k])


class TestRuns:
    def test_round_trip(self, tmp_path, rng):
        run = Run({"q1": [("a", 0.9), ("b", 0.9), ("c", 1 / 3)], "q2": [("z", float(rng.standard_normal()))]}, "sys")
        io.write_run(tmp_path / "r.run", run)
        assert io.load_run(tmp_path / "r.run") == run

    def test_rank_gap(self, tmp_path):
        p = write(tmp_path / "r.run", "q Q0 a 1 0.9 t\nq Q0 b 3 0.8 t\n")
        with pytest.raises(io.FormatError, match="rank 3, expected 2"):
            io.load_run(p)

    def test_ranks_must_start_at_one(self, tmp_path):
        with pytest.raises(io.FormatError):
            io.load_run(write(tmp_path / "r.run", "q Q0 a 2 0.9 t\n"))

    def test_column_count(self, tmp_path):
        with pytest.raises(io.FormatError, match="6 columns"):
            io.load_run(write(tmp_path / "r.run", "q Q0 a 1 0.9\n"))

    def test_score_rank_disagreement_warns_and_rank_wins(self, tmp_path, caplog):
        p = write(tmp_path / "r.run", "q Q0 a 1 0.1 t\nq Q0 b 2 0.9 t\n")
        with caplog.at_level(logging.WARNING):
            run = io.load_run(p)
        assert run.ranking("q") == ["a", "b"]
        assert "rank order kept" in caplog.text

    def test_bad_tag(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_run(tmp_path / "r.run", Run({"q": [("a", 1.0)]}, "two words"))


class TestQrels:
    def test_parse(self, tmp_path):
        qr = io.load_qrels(write(tmp_path / "q.txt", "q1 0 a 1\nq1 0 b 0\nq2 0 c 2\n"))
        assert qr["q1"] == {"a": 1, "b": 0} and qr.relevance("q2", "c") == 2

    def test_duplicate_last_wins(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            qr = io.load_qrels(write(tmp_path / "q.txt", "q1 0 a 1\nq1 0 a 0\n"))
        assert qr["q1"]["a"] == 0
        assert "duplicate" in caplog.text

    def test_non_integer(self, tmp_path):
        with pytest.raises(io.FormatError, match=":1:"):
            io.load_qrels(write(tmp_path / "q.txt", "q1 0 a 0.5\n"))

    def test_round_trip(self, tmp_path):
        qr = Qrels({"q1": {"a": 1, "b": 0}, "q2": {"c": 3}})
        io.write_qrels(tmp_path / "q.txt", qr)
        assert dict(io.load_qrels(tmp_path / "q.txt")) == dict(qr)


class TestDatasetDirectory:
    def test_round_trip_is_byte_identical(self, small_dataset, tmp_path):
        io.save_dataset(small_dataset, tmp_path / "a")
        loaded = io.load_dataset(tmp_path / "a")
        io.save_dataset(loaded, tmp_path / "b")
        for f in (io.EMBEDDINGS_FILE, io.QUERIES_FILE, io.PROFILES_FILE, io.RUN_FILE, io.QRELS_FILE):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_loaded_equals_original(self, small_dataset, tmp_path):
        io.save_dataset(small_dataset, tmp_path)
        loaded = io.load_dataset(tmp_path)
        assert loaded.splits == small_dataset.splits
        assert [q.query_id for q in loaded.queries] == [q.query_id for q in small_dataset.queries]
        for qid, c in small_dataset.candidates.items():
            assert loaded.candidates[qid].doc_ids == c.doc_ids
            np.testing.assert_array_equal(loaded.candidates[qid].scores, c.scores)
            np.testing.assert_array_equal(loaded.candidates[qid].vectors, c.vectors)
        for uid, p in small_dataset.profiles.items():
            np.testing.assert_array_equal(loaded.profiles[uid].vectors, p.vectors)

    def test_missing_embedding(self, small_dataset, tmp_path):
        io.save_dataset(small_dataset, tmp_path)
        lines = (tmp_path / io.EMBEDDINGS_FILE).read_text().splitlines()
        (tmp_path / io.EMBEDDINGS_FILE).write_text("\n".join(lines[1:]) + "\n")
        with pytest.raises(io.FormatError, match="no embedding"):
            io.load_dataset(tmp_path)


class TestParams:
    @pytest.mark.parametrize("variant,alignment", [
        (Variant.DENOISING, None), (Variant.MULTI_HEAD, None), (Variant.SOFTMAX, "Additive"), (Variant.MEAN, None),
    ])
    def test_round_trip(self, tmp_path, variant, alignment):
        attn = default_attention(variant, alignment, dim=8, threshold=0.3)
        io.save_params(tmp_path / "p.json", attn, FusionConfig(0.4), [0.5, 0.25])
        back, fusion, trace, _ = io.load_params(tmp_path / "p.json")
        assert back.variant is attn.variant and back.threshold_logit == attn.threshold_logit
        assert fusion == FusionConfig(0.4) and trace == [0.5, 0.25]
        if attn.multihead_params is not None:
            np.testing.assert_array_equal(back.multihead_params.W_O, attn.multihead_params.W_O)
        if attn.additive_params is not None:
            np.testing.assert_array_equal(back.additive_params.W_d, attn.additive_params.W_d)

    def test_not_a_parameter_file(self, tmp_path):
        with pytest.raises(io.FormatError):
            io.load_params(write(tmp_path / "p.json", json.dumps({"x": 1})))


class TestConfig:
    def test_parse_kv(self):
        assert parse_kv("a = 1  # note\n\n# skip\nb=two words\n") == {"a": "1", "b": "two words"}
        with pytest.raises(ConfigError, match=":1:"):
            parse_kv("no equals sign")

    def test_load(self, tmp_path):
        (tmp_path / "data").mkdir()
        p = write(tmp_path / "exp.cfg", "dataset = data\nvariant = Softmax\nalignment = Cosine\nlambda = 0.3\n"
                                        "grid_lambda = 0.1,0.2\nepochs = 3\nseed = 9\n")
        cfg = load_config(p)
        assert cfg.dataset == (tmp_path / "data").resolve()
        assert cfg.lam == 0.3 and cfg.grid_lambda == (0.1, 0.2)
        assert cfg.training.epochs == 3 and cfg.training.seed == 9
        assert cfg.name == "exp"

    @pytest.mark.parametrize("text", [
        "dataset = missing_dir\n",
        "variant = Denoising\nalignment = Dot\n",
        "lambda = 2\n",
        "frobnicate = 1\n",
        "epochs = many\n",
        "normalize_first_stage = maybe\n",
    ])
    def test_invalid(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path / "bad.cfg", text))
