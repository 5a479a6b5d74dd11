"""Concept embedding file format, Gaussian estimation, frozen classifier, sampling."""

import struct

import numpy as np
import pytest

from fedbm.concept_space import (
    CEB1Error,
    CEB1HeaderError,
    CEB1PayloadError,
    CEB1PromptCountError,
    CEB1ValueError,
    ConceptDistribution,
    ConceptEmbeddingSet,
    build_classifier,
    classifier_logits,
    classifier_logits_backward,
    estimate_distributions,
    load_embeddings,
    sample_concept_condition,
    sample_condition_batch,
    write_embeddings,
)

from oracles import fd_grad, logits_scalar, rel_err, two_pass_mean_var


def _pack_ceb1(names, emb_f32):
    """Hand-built CEB1 bytes, independent of the library writer."""
    k, m, d = emb_f32.shape
    blob = b"CEB1" + struct.pack("<III", k, m, d)
    for name in names:
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
    blob += emb_f32.astype("<f4").tobytes()
    return blob


class TestFileFormat:
    def test_known_bytes_round_trip(self, tmp_path):
        """A hand-packed K=2, M=2, D=3 file echoes its 12 floats exactly."""
        vals = np.arange(12, dtype=np.float32).reshape(2, 2, 3) / 7.0
        path = tmp_path / "e.ceb1"
        path.write_bytes(_pack_ceb1(["cat", "dog"], vals))
        eset = load_embeddings(path)
        assert eset.class_names == ("cat", "dog")
        assert eset.num_classes == 2 and eset.num_prompts == 2 and eset.dim == 3
        np.testing.assert_array_equal(eset.embeddings, vals.astype(np.float64))

    def test_writer_reader_round_trip(self, tmp_path):
        """write_embeddings followed by load_embeddings is float32-exact."""
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((3, 4, 5)).astype(np.float32).astype(np.float64)
        eset = ConceptEmbeddingSet(embeddings=emb, class_names=("a", "b", "c"))
        path = tmp_path / "rt.ceb1"
        write_embeddings(eset, path)
        back = load_embeddings(path)
        np.testing.assert_array_equal(back.embeddings, emb)
        assert back.class_names == ("a", "b", "c")

    def test_unicode_names_survive(self, tmp_path):
        path = tmp_path / "u.ceb1"
        emb = np.zeros((2, 2, 2))
        emb[0, 0, 0] = 1.0
        write_embeddings(ConceptEmbeddingSet(embeddings=emb, class_names=("katze", "naive")), path)
        assert load_embeddings(path).class_names == ("katze", "naive")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ceb1"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(CEB1HeaderError):
            load_embeddings(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.ceb1"
        path.write_bytes(b"CEB1" + struct.pack("<II", 1, 2))
        with pytest.raises(CEB1HeaderError):
            load_embeddings(path)

    def test_zero_dimension_rejected(self, tmp_path):
        path = tmp_path / "zd.ceb1"
        path.write_bytes(b"CEB1" + struct.pack("<III", 1, 2, 0) + struct.pack("<I", 1) + b"a")
        with pytest.raises(CEB1HeaderError):
            load_embeddings(path)

    def test_single_prompt_rejected(self, tmp_path):
        """M=1 is not enough to estimate a variance."""
        vals = np.zeros((1, 1, 2), dtype=np.float32)
        path = tmp_path / "m1.ceb1"
        path.write_bytes(_pack_ceb1(["only"], vals))
        with pytest.raises(CEB1PromptCountError):
            load_embeddings(path)

    def test_truncated_name_table(self, tmp_path):
        path = tmp_path / "tn.ceb1"
        path.write_bytes(b"CEB1" + struct.pack("<III", 2, 2, 2) + struct.pack("<I", 10) + b"ab")
        with pytest.raises(CEB1PayloadError):
            load_embeddings(path)

    def test_truncated_payload(self, tmp_path):
        vals = np.ones((2, 2, 2), dtype=np.float32)
        blob = _pack_ceb1(["a", "b"], vals)
        path = tmp_path / "tp.ceb1"
        path.write_bytes(blob[:-4])
        with pytest.raises(CEB1PayloadError):
            load_embeddings(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        vals = np.ones((2, 2, 2), dtype=np.float32)
        path = tmp_path / "tb.ceb1"
        path.write_bytes(_pack_ceb1(["a", "b"], vals) + b"\x00\x00")
        with pytest.raises(CEB1PayloadError):
            load_embeddings(path)

    def test_non_finite_payload(self, tmp_path):
        vals = np.ones((2, 2, 2), dtype=np.float32)
        vals[1, 0, 1] = np.nan
        path = tmp_path / "nan.ceb1"
        path.write_bytes(_pack_ceb1(["a", "b"], vals))
        with pytest.raises(CEB1ValueError):
            load_embeddings(path)

    def test_invalid_utf8_name(self, tmp_path):
        vals = np.ones((1, 2, 2), dtype=np.float32)
        blob = b"CEB1" + struct.pack("<III", 1, 2, 2)
        blob += struct.pack("<I", 2) + b"\xff\xfe"
        blob += vals.astype("<f4").tobytes()
        path = tmp_path / "u8.ceb1"
        path.write_bytes(blob)
        with pytest.raises(CEB1PayloadError):
            load_embeddings(path)

    def test_error_taxonomy_is_value_error(self):
        """All format errors share one catchable base that is a ValueError."""
        for exc in (CEB1HeaderError, CEB1PayloadError, CEB1ValueError, CEB1PromptCountError):
            assert issubclass(exc, CEB1Error)
        assert issubclass(CEB1Error, ValueError)

    def test_values_not_renormalized(self, tmp_path):
        """Embeddings with non-unit norm come back with the same norms."""
        emb = np.full((2, 2, 3), 5.0)
        emb[0, 0] = [3.0, 0.0, 0.0]
        path = tmp_path / "nr.ceb1"
        write_embeddings(ConceptEmbeddingSet(embeddings=emb, class_names=("p", "q")), path)
        back = load_embeddings(path)
        assert np.linalg.norm(back.embeddings[0, 0]) == 3.0


class TestEstimation:
    def test_identical_prompts_have_zero_variance(self):
        emb = np.tile(np.array([1.0, -2.0, 0.5]), (1, 4, 1))
        eset = ConceptEmbeddingSet(embeddings=emb, class_names=("x",))
        (dist,) = estimate_distributions(eset)
        np.testing.assert_array_equal(dist.mean, [1.0, -2.0, 0.5])
        np.testing.assert_array_equal(dist.var, [0.0, 0.0, 0.0])

    def test_two_point_hand_example(self):
        """Rows (0,0) and (2,2): mean (1,1), unbiased variance (2,2)."""
        emb = np.array([[[0.0, 0.0], [2.0, 2.0]]])
        eset = ConceptEmbeddingSet(embeddings=emb, class_names=("x",))
        (dist,) = estimate_distributions(eset)
        np.testing.assert_allclose(dist.mean, [1.0, 1.0], rtol=0, atol=0)
        np.testing.assert_allclose(dist.var, [2.0, 2.0], rtol=0, atol=0)

    def test_matches_two_pass_oracle(self):
        """Vectorized estimates agree with scalar two-pass loops per class."""
        rng = np.random.default_rng(7)
        emb = rng.standard_normal((3, 8, 16)) * 2.0 + 0.5
        eset = ConceptEmbeddingSet(embeddings=emb, class_names=("a", "b", "c"))
        dists = estimate_distributions(eset)
        for k, dist in enumerate(dists):
            mean, var = two_pass_mean_var(emb[k])
            np.testing.assert_allclose(dist.mean, mean, rtol=1e-12)
            np.testing.assert_allclose(dist.var, var, rtol=1e-12)
            assert dist.class_name == eset.class_names[k]

    def test_distribution_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            ConceptDistribution(mean=np.zeros(2), var=np.array([0.1, -0.1]))


class TestClassifier:
    def _dists(self, rng, k=3, d=5):
        return [
            ConceptDistribution(
                mean=rng.standard_normal(d), var=rng.random(d), class_name=f"c{i}"
            )
            for i in range(k)
        ]

    def test_column_k_is_class_k(self):
        rng = np.random.default_rng(1)
        dists = self._dists(rng)
        clf = build_classifier(dists, temperature=1.0)
        for k, dist in enumerate(dists):
            np.testing.assert_array_equal(clf.means[:, k], dist.mean)
            np.testing.assert_array_equal(clf.variances[:, k], dist.var)
        assert clf.class_names == ("c0", "c1", "c2")

    def test_frozen_and_write_protected(self):
        rng = np.random.default_rng(2)
        clf = build_classifier(self._dists(rng), temperature=2.0)
        assert clf.frozen is True
        with pytest.raises(ValueError):
            clf.means[0, 0] = 99.0
        with pytest.raises(ValueError):
            clf.variances[0, 0] = 99.0

    def test_build_is_deterministic(self):
        rng1 = np.random.default_rng(3)
        rng2 = np.random.default_rng(3)
        a = build_classifier(self._dists(rng1), temperature=1.5)
        b = build_classifier(self._dists(rng2), temperature=1.5)
        assert a.means.tobytes() == b.means.tobytes()
        assert a.variances.tobytes() == b.variances.tobytes()

    def test_dim_mismatch_rejected(self):
        d1 = ConceptDistribution(mean=np.zeros(3), var=np.zeros(3))
        d2 = ConceptDistribution(mean=np.zeros(4), var=np.zeros(4))
        with pytest.raises(ValueError):
            build_classifier([d1, d2])

    def test_invalid_temperature_rejected(self):
        d1 = ConceptDistribution(mean=np.zeros(3), var=np.zeros(3))
        for tau in (0.0, -1.0, float("nan")):
            with pytest.raises(ValueError):
                build_classifier([d1, d1], temperature=tau)

    def test_single_class_shapes(self):
        d1 = ConceptDistribution(mean=np.arange(4.0), var=np.ones(4))
        clf = build_classifier([d1])
        assert clf.means.shape == (4, 1) and clf.variances.shape == (4, 1)


class TestLogits:
    def test_hand_example(self):
        """tau=2, h=(0.5,-1), mu=(0.2,0.4), var=(0.1,0.3) gives logit 0.05."""
        clf = build_classifier(
            [ConceptDistribution(mean=np.array([0.2, 0.4]), var=np.array([0.1, 0.3]))],
            temperature=2.0,
        )
        out = classifier_logits(clf, np.array([[0.5, -1.0]]))
        np.testing.assert_allclose(out, [[0.05]], rtol=0, atol=1e-12)

    def test_zero_variance_is_linear(self):
        """With all variances zero the logits reduce to tau * H @ means."""
        rng = np.random.default_rng(5)
        means = rng.standard_normal((6, 4))
        clf = build_classifier(
            [ConceptDistribution(mean=means[:, k], var=np.zeros(6)) for k in range(4)],
            temperature=1.7,
        )
        h = rng.standard_normal((5, 6))
        np.testing.assert_allclose(
            classifier_logits(clf, h), 1.7 * h @ means, rtol=1e-12, atol=1e-12
        )

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(6)
        for tau in (0.5, 1.0, 2.0):
            means = rng.standard_normal((8, 3))
            variances = rng.random((8, 3))
            clf = build_classifier(
                [ConceptDistribution(mean=means[:, k], var=variances[:, k]) for k in range(3)],
                temperature=tau,
            )
            h = rng.standard_normal((4, 8))
            got = classifier_logits(clf, h)
            want = np.stack([logits_scalar(h[i], means, variances, tau) for i in range(4)])
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_shape_and_finite_errors(self):
        clf = build_classifier(
            [ConceptDistribution(mean=np.zeros(3), var=np.zeros(3))], temperature=1.0
        )
        with pytest.raises(ValueError):
            classifier_logits(clf, np.zeros((2, 4)))
        with pytest.raises(ValueError):
            classifier_logits(clf, np.array([[np.inf, 0.0, 0.0]]))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        means = rng.standard_normal((5, 3))
        variances = rng.random((5, 3))
        clf = build_classifier(
            [ConceptDistribution(mean=means[:, k], var=variances[:, k]) for k in range(3)],
            temperature=1.3,
        )
        h = rng.standard_normal((3, 5))
        c = rng.standard_normal((3, 3))  # fixed contraction to make a scalar
        got = classifier_logits_backward(clf, h, c)
        want = fd_grad(lambda hh: float((classifier_logits(clf, hh) * c).sum()), h)
        assert rel_err(got, want) < 1e-8


class TestSampling:
    def _dists(self):
        return [
            ConceptDistribution(mean=np.array([1.0, -1.0]), var=np.array([0.0, 0.0])),
            ConceptDistribution(mean=np.array([0.5, 2.0]), var=np.array([4.0, 0.25])),
        ]

    def test_zero_variance_returns_mean_exactly(self):
        z = sample_concept_condition(self._dists(), 0, np.random.default_rng(0))
        np.testing.assert_array_equal(z, [1.0, -1.0])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            sample_concept_condition(self._dists(), 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_condition_batch(self._dists(), np.array([0, 2]), np.random.default_rng(0))

    def test_deterministic_given_seed(self):
        a = sample_concept_condition(self._dists(), 1, np.random.default_rng(42))
        b = sample_concept_condition(self._dists(), 1, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_batch_matches_single_draw_stream(self):
        """A batch of one consumes the stream exactly like the single-draw op."""
        a = sample_concept_condition(self._dists(), 1, np.random.default_rng(9))
        b = sample_condition_batch(self._dists(), np.array([1]), np.random.default_rng(9))
        np.testing.assert_array_equal(a, b[0])

    def test_moments_match_distribution(self):
        """1e5 draws reproduce the target mean and variance."""
        rng = np.random.default_rng(11)
        dists = self._dists()
        n = 100_000
        z = sample_condition_batch(dists, np.full(n, 1), rng)
        mean_tol = 4.0 * np.sqrt(np.array([4.0, 0.25]) / n)
        assert np.all(np.abs(z.mean(axis=0) - [0.5, 2.0]) < mean_tol)
        np.testing.assert_allclose(z.var(axis=0), [4.0, 0.25], rtol=0.05)
