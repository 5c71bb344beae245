import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denoise_rank import alignment as al
from denoise_rank.attention import (
    aggregate,
    build_user_model,
    count_filtered,
    denoising_weights,
    multi_head_user_model,
    softmax_weights,
    zero_attention_weights,
)
from denoise_rank.types import (
    Alignment,
    AttentionConfig,
    MultiHeadParams,
    Query,
    UserProfile,
    Variant,
)

from conftest import make_profile, make_query

scores_st = arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50))


def exp_oracle(scores):
    ex = [math.exp(s) for s in scores]
    total = math.fsum(ex)
    return [x / total for x in ex]


def three_step_oracle(scores, threshold, eps=1e-9):
    shifted = [s - threshold for s in scores]
    clamped = [x if x > 0 else 0.0 for x in shifted]
    total = math.fsum(clamped)
    return [x / max(total, eps) for x in clamped]


def denoising(threshold):
    return AttentionConfig(Variant.DENOISING, Alignment.SHIFTED_COSINE).with_threshold(threshold)


class TestSoftmaxWeights:
    @pytest.mark.parametrize("scores", [[7, 3, 1, -2], [0.7, 0.3, 0.1, -0.2], [-7, -3, -1, -2]])
    def test_matches_exp_oracle(self, scores):
        np.testing.assert_allclose(softmax_weights(scores), exp_oracle(scores), rtol=1e-13)

    def test_printed_examples(self):
        np.testing.assert_allclose(softmax_weights([0.7, 0.3, 0.1, -0.2]), [0.3809, 0.2553, 0.2090, 0.1548], atol=5e-5)
        np.testing.assert_allclose(softmax_weights([-7, -3, -1, -2]), [0.0016, 0.0899, 0.6641, 0.2443], atol=5e-5)
        np.testing.assert_array_equal(softmax_weights([0.0] * 4), [0.25] * 4)
        # the leading weight is 0.979511; its printed four-digit value 0.9796 is off by 9e-5
        w = softmax_weights([7, 3, 1, -2])
        assert w[0] == pytest.approx(0.979511, abs=1e-6)
        np.testing.assert_allclose(w[1:], [0.0179, 0.0024, 0.0001], atol=5e-5)

    @settings(max_examples=200)
    @given(scores_st, st.floats(-100, 100))
    def test_translation_invariant(self, s, c):
        np.testing.assert_allclose(softmax_weights(s), softmax_weights(s + c), atol=1e-12)

    @given(scores_st)
    def test_strictly_positive_and_normalized(self, s):
        w = softmax_weights(s)
        assert np.all(w > 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_huge_scores_do_not_overflow(self):
        w = softmax_weights([1000.0, 999.0])
        assert np.all(np.isfinite(w))


class TestDenoisingWeights:
    def test_worked_example(self):
        w = denoising_weights([0.7, 0.3, 0.1, -0.2], 0.1)
        np.testing.assert_allclose(w, [0.75, 0.25, 0.0, 0.0], atol=1e-12)

    def test_full_filtering(self):
        np.testing.assert_array_equal(denoising_weights([0.1, 0.2, 0.05], 0.3), [0.0, 0.0, 0.0])

    def test_zero_threshold_symmetric(self):
        np.testing.assert_allclose(denoising_weights([0.2, 0.2], 0.0), [0.5, 0.5])

    def test_score_equal_to_threshold_is_filtered(self):
        np.testing.assert_array_equal(denoising_weights([0.5, 0.7], 0.5), [0.0, 1.0])

    def test_matches_three_step_oracle(self, rng):
        for _ in range(200):
            s = rng.uniform(0, 1, rng.integers(1, 20))
            t = rng.uniform(0, 1)
            np.testing.assert_allclose(denoising_weights(s, t), three_step_oracle(s, t), atol=1e-15)

    @settings(max_examples=300)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1)), st.floats(0, 1))
    def test_sums_to_one_or_zero(self, s, t):
        total = denoising_weights(s, t).sum()
        if np.any(s - t > 1e-9):
            assert total == pytest.approx(1.0, abs=1e-12)
        elif not np.any(s > t):
            assert total == 0.0

    @given(arrays(np.float64, 8, elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
    def test_survivors_monotone_in_threshold(self, s, t1, t2):
        lo, hi = sorted((t1, t2))
        assert np.count_nonzero(denoising_weights(s, hi)) <= np.count_nonzero(denoising_weights(s, lo))

    def test_not_translation_invariant(self):
        s = np.array([0.7, 0.3, 0.1, -0.2])
        assert not np.allclose(denoising_weights(s, 0.1), denoising_weights(s + 0.2, 0.1))

    def test_epsilon_guard(self):
        w = denoising_weights([0.1 + 1e-12], 0.1, epsilon=1e-9)
        assert 0.0 < w[0] < 1e-2


class TestZeroAttentionWeights:
    def test_single_score(self):
        np.testing.assert_allclose(zero_attention_weights([0.0], 0.0), [0.5])

    def test_three_equal_logits(self):
        np.testing.assert_allclose(zero_attention_weights([1.0, 1.0], 1.0), [1 / 3, 1 / 3])

    def test_limit_is_softmax(self):
        s = [0.3, -1.2, 2.0]
        np.testing.assert_allclose(zero_attention_weights(s, -1e6), softmax_weights(s), atol=1e-6)


class TestAggregate:
    def test_one_hot(self, rng):
        prof = make_profile(rng, k=4)
        um = aggregate(np.array([0.0, 0.0, 1.0, 0.0]), prof)
        np.testing.assert_array_equal(um.vector, prof.vectors[2])
        assert not um.is_zero and um.filtered_count == 3

    def test_uniform_is_mean(self, rng):
        prof = make_profile(rng, k=5)
        um = aggregate(np.full(5, 0.2), prof)
        np.testing.assert_allclose(um.vector, prof.vectors.mean(axis=0), atol=1e-14)

    def test_all_zero(self, rng):
        prof = make_profile(rng, k=3)
        um = aggregate(np.zeros(3), prof)
        assert um.is_zero and not np.any(um.vector)

    def test_linear(self, rng):
        prof = make_profile(rng, k=5)
        w1, w2 = rng.uniform(size=(2, 5))
        lhs = aggregate(2.0 * w1 + 0.5 * w2, prof).vector
        rhs = 2.0 * aggregate(w1, prof).vector + 0.5 * aggregate(w2, prof).vector
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            aggregate(np.ones(2), make_profile(rng, k=3))


class TestBuildUserModel:
    def test_mean(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -4.0])
        prof = UserProfile("u", ("a", "b"), [a, b])
        um = build_user_model(Query("q", "u", [1.0, 0.0]), prof, AttentionConfig(Variant.MEAN, Alignment.DOT))
        np.testing.assert_allclose(um.vector, (a + b) / 2)

    def test_single_survivor(self):
        q = Query("q", "u", [1.0, 0.0])
        prof = UserProfile("u", ("a", "b", "c"), [[2.0, 0.1], [0.0, 1.0], [-1.0, 0.0]])
        um = build_user_model(q, prof, denoising(0.9))
        np.testing.assert_allclose(um.weights, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(um.vector, prof.vectors[0])

    def test_softmax_composition(self, rng):
        prof = make_profile(rng, k=3)
        q = make_query(rng)
        cfg = AttentionConfig(Variant.SOFTMAX, Alignment.SCALED_DOT)
        expected = exp_oracle([al.scaled_dot(q.vector, d) for d in prof.vectors])
        um = build_user_model(q, prof, cfg)
        np.testing.assert_allclose(um.weights, expected, rtol=1e-12)
        np.testing.assert_allclose(um.vector, np.array(expected) @ prof.vectors, rtol=1e-12)

    def test_all_filtered_is_zero(self, rng):
        prof = make_profile(rng, k=5)
        um = build_user_model(make_query(rng), prof, denoising(1.0))
        assert um.is_zero and um.filtered_count == 5

    @pytest.mark.parametrize("variant,alignment", [
        (Variant.MEAN, Alignment.DOT), (Variant.SOFTMAX, Alignment.COSINE),
        (Variant.ZERO_ATTENTION, Alignment.SCALED_DOT), (Variant.DENOISING, Alignment.SHIFTED_COSINE),
        (Variant.FILTER_ATTENTION, Alignment.SCALED_DOT), (Variant.DENOISING_SOFTMAX, Alignment.SHIFTED_COSINE),
    ])
    def test_permutation_equivariant(self, rng, variant, alignment):
        prof = make_profile(rng, k=7)
        q = make_query(rng)
        cfg = AttentionConfig(variant, alignment).with_threshold(0.45)
        perm = rng.permutation(7)
        permuted = UserProfile("u1", tuple(prof.doc_ids[i] for i in perm), prof.vectors[perm])
        a, b = build_user_model(q, prof, cfg), build_user_model(q, permuted, cfg)
        np.testing.assert_allclose(b.weights, a.weights[perm], atol=1e-15)
        np.testing.assert_allclose(b.vector, a.vector, atol=1e-12)

    def test_empty_profile(self, rng):
        empty = UserProfile("u1", (), np.zeros((0, 8)))
        with pytest.raises(ValueError):
            build_user_model(make_query(rng), empty, denoising(0.5))


def per_head_oracle(q, D, p):
    heads, dk, m = p.W_Q.shape
    outs, avg = [], np.zeros(D.shape[0])
    for h in range(heads):
        qh = p.W_Q[h] @ q
        logits = [float((p.W_K[h] @ d) @ qh) / math.sqrt(dk) for d in D]
        w = exp_oracle(logits)
        avg += np.array(w) / heads
        outs.append(sum(wi * (p.W_V[h] @ d) for wi, d in zip(w, D)))
    return p.W_O @ np.concatenate(outs), avg


class TestMultiHead:
    def test_one_identity_head_is_scaled_dot_softmax(self, rng):
        prof, q = make_profile(rng, k=6), make_query(rng)
        mh = multi_head_user_model(q, prof, MultiHeadParams.identity(8, 1), 1)
        ref = build_user_model(q, prof, AttentionConfig(Variant.SOFTMAX, Alignment.SCALED_DOT))
        np.testing.assert_allclose(mh.vector, ref.vector, atol=1e-12)
        np.testing.assert_allclose(mh.weights, ref.weights, atol=1e-12)

    def test_single_document(self, rng):
        p = MultiHeadParams.init(8, 2, seed=4, noise=0.3)
        prof = make_profile(rng, k=1)
        d = prof.vectors[0]
        expected = p.W_O @ np.concatenate([p.W_V[h] @ d for h in range(2)])
        for _ in range(3):
            um = multi_head_user_model(make_query(rng), prof, p, 2)
            np.testing.assert_allclose(um.vector, expected, atol=1e-12)

    def test_matches_per_head_oracle(self, rng):
        p = MultiHeadParams.init(8, 2, seed=5, noise=0.5)
        prof, q = make_profile(rng, k=5), make_query(rng)
        um = multi_head_user_model(q, prof, p, 2)
        vec, avg = per_head_oracle(q.vector, prof.vectors, p)
        np.testing.assert_allclose(um.vector, vec, atol=1e-12)
        np.testing.assert_allclose(um.weights, avg, atol=1e-12)
        assert not um.is_zero

    def test_head_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            multi_head_user_model(make_query(rng), make_profile(rng), MultiHeadParams.identity(8, 2), 4)


class TestCountFiltered:
    def test_zero_threshold(self):
        q = Query("q", "u", [1.0, 0.0])
        prof = UserProfile("u", ("a", "b"), [[1.0, 0.0], [0.0, 1.0]])  # shifted cosines 1.0, 0.5
        assert count_filtered(q, prof, denoising(0.0)) == 0

    def test_full_threshold(self, rng):
        prof = make_profile(rng, k=9)
        assert count_filtered(make_query(rng), prof, denoising(1.0)) == 9

    def test_manual_count(self, rng):
        prof, q = make_profile(rng, k=12), make_query(rng)
        scores = [al.shifted_cosine(q.vector, d) for d in prof.vectors]
        for t in (0.3, 0.5, 0.6):
            assert count_filtered(q, prof, denoising(t)) == sum(s <= t for s in scores)

    def test_undefined_for_softmax(self, rng):
        with pytest.raises(ValueError):
            count_filtered(make_query(rng), make_profile(rng), AttentionConfig(Variant.SOFTMAX, Alignment.DOT))
