import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from sklearn.metrics import normalized_mutual_info_score

from popcluster import interpret, pca
from popcluster.gmm import EmOptions, GmmFit, GmmParams, Posterior
from popcluster.interpret import Clustering, InterpretError


def clustering(sid, labels, k=None, ids=None):
    labels = np.asarray(labels)
    ids = ids or tuple(f"t{i}" for i in range(labels.size))
    return Clustering(sid, ids, labels, k or int(labels.max()) + 1)


def kl_by_quadrature(mu1, var1, mu0, var0):
    p1, p0 = stats.norm(mu1, math.sqrt(var1)), stats.norm(mu0, math.sqrt(var0))
    lo, hi = mu1 - 12 * math.sqrt(var1), mu1 + 12 * math.sqrt(var1)
    val, _ = integrate.quad(lambda x: p1.pdf(x) * (p1.logpdf(x) - p0.logpdf(x)), lo, hi, epsabs=1e-12, limit=200)
    return val


class TestClustering:
    def test_labels_must_match_posterior(self):
        post = Posterior(np.array([[0.9, 0.1], [0.2, 0.8]]))
        assert Clustering.from_posterior("s", ["a", "b"], post).labels.tolist() == [0, 1]
        with pytest.raises(InterpretError):
            Clustering("s", ("a", "b"), np.array([1, 1]), 2, post)

    def test_label_range(self):
        with pytest.raises(InterpretError):
            Clustering("s", ("a", "b"), np.array([0, 2]), 2)

    def test_reorder(self):
        cl = clustering("s", [0, 1, 2], ids=("a", "b", "c"))
        assert cl.reorder(["c", "a"]).labels.tolist() == [2, 0]
        with pytest.raises(InterpretError):
            cl.reorder(["z"])


class TestPercentOverlap:
    def test_hand_example(self):
        assert interpret.percent_overlap({1, 2, 3}, {2, 3, 4}) == pytest.approx(66.67, abs=0.01)

    def test_identical_and_disjoint(self):
        assert interpret.percent_overlap({1, 2}, {2, 1}) == 100.0
        assert interpret.percent_overlap({1, 2}, {3}) == 0.0

    def test_empty_set(self):
        with pytest.raises(InterpretError):
            interpret.percent_overlap(set(), {1})

    @settings(max_examples=100, deadline=None)
    @given(st.sets(st.integers(0, 30), min_size=1), st.sets(st.integers(0, 30), min_size=1))
    def test_symmetric_and_bounded(self, a, b):
        v = interpret.percent_overlap(a, b)
        assert v == interpret.percent_overlap(b, a)
        assert 0.0 <= v <= 100.0


class TestOverlapMatrix:
    def test_self_comparison_is_identity_blocks(self, rng):
        labels = rng.integers(0, 4, 200)
        m = interpret.overlap_matrix([clustering("a", labels), clustering("b", labels)])
        n = len(m.index)
        np.testing.assert_array_equal(m.values, np.tile(np.eye(n // 2), (2, 2)) * 100)
        assert m.across_mean == pytest.approx(25.0)

    def test_permuted_labels_have_one_full_partner(self, rng):
        labels = rng.integers(0, 5, 300)
        perm = np.array([3, 0, 4, 1, 2])
        m = interpret.overlap_matrix([clustering("a", labels), clustering("b", perm[labels])])
        across = m.values[:5, 5:]
        np.testing.assert_array_equal((across == 100).sum(axis=1), 1)

    def test_within_subject_blocks_zero(self, rng):
        m = interpret.overlap_matrix([clustering(s, rng.integers(0, 3, 50)) for s in "abc"])
        same = ~m.across_subject_mask()
        off = same & ~np.eye(len(m.index), dtype=bool)
        assert np.all(m.values[off] == 0)
        np.testing.assert_array_equal(m.values, m.values.T)

    def test_independent_random_labelings(self, rng):
        m = interpret.overlap_matrix([clustering("a", rng.integers(0, 5, 1000)), clustering("b", rng.integers(0, 5, 1000))])
        assert abs(m.across_mean - 20.0) < 5.0

    def test_summary_and_thresholds(self, rng):
        m = interpret.overlap_matrix([clustering(s, rng.integers(0, 3, 60)) for s in "ab"])
        across = m.values[:3, 3:].ravel()
        assert m.across_mean == pytest.approx(across.mean())
        assert m.across_sd == pytest.approx(across.std(ddof=1))
        assert sorted(m.thresholds) == [20, 40, 60, 80]
        np.testing.assert_array_equal(m.thresholds[40], m.values > 40)

    def test_empty_cluster_left_out(self):
        m = interpret.overlap_matrix([clustering("a", [0, 0, 2], k=3)])
        assert m.index == (("a", 0), ("a", 2))

    def test_universe_mismatch(self):
        with pytest.raises(InterpretError, match="differs"):
            interpret.overlap_matrix([clustering("a", [0, 1]), clustering("b", [0, 1], ids=("x", "y"))])


class TestKl:
    @pytest.mark.parametrize(
        "args,expected",
        [((0, 1, 0, 1), 0.0), ((1, 1, 0, 1), 0.5), ((0, 4, 0, 1), math.log(0.5) + 2 - 0.5)],
    )
    def test_closed_form_examples(self, args, expected):
        assert interpret.kl_gaussian_univariate(*args) == pytest.approx(expected, abs=1e-12)
        assert kl_by_quadrature(*args) == pytest.approx(expected, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.05, 4), st.floats(-5, 5), st.floats(0.05, 4))
    def test_matches_quadrature(self, mu1, sd1, mu0, sd0):
        closed = interpret.kl_gaussian_univariate(mu1, sd1**2, mu0, sd0**2)
        assert closed >= 0
        assert closed == pytest.approx(kl_by_quadrature(mu1, sd1**2, mu0, sd0**2), abs=1e-4)


class TestGaussianNmi:
    def test_independent_rating_near_zero(self, rng):
        labels = rng.integers(0, 5, 2000)
        assert interpret.gaussian_nmi(rng.normal(50, 10, 2000), labels) < 0.02

    def test_cluster_indicator_rating_near_one(self, rng):
        labels = np.repeat([0, 1], 1000)
        assert interpret.gaussian_nmi(labels + rng.normal(0, 0.01, 2000), labels) >= 0.9

    def test_affine_invariance(self, rng):
        labels = rng.integers(0, 4, 500)
        x = rng.normal(size=500) + 0.5 * labels
        base = interpret.gaussian_nmi(x, labels)
        for a, b in [(3.0, 10.0), (-0.2, 4.0), (100.0, -7.0)]:
            assert interpret.gaussian_nmi(a * x + b, labels) == pytest.approx(base, abs=1e-8)

    def test_detail_matches_definition(self, rng):
        labels = rng.integers(0, 3, 300)
        x = rng.normal(size=300) * (1 + labels)
        det = interpret.gaussian_nmi_detail(x, labels)
        p = np.bincount(labels) / 300
        kls = [interpret.kl_gaussian_univariate(x[labels == c].mean(), x[labels == c].var(), x.mean(), x.var()) for c in range(3)]
        assert det.mi == pytest.approx(np.dot(p, kls), rel=1e-12)
        assert det.h_y == pytest.approx(-np.dot(p, np.log(p)), rel=1e-12)
        assert det.nmi == pytest.approx(min(det.mi / det.h_y, 1.0), rel=1e-12)

    def test_conventions(self, rng):
        assert interpret.gaussian_nmi(rng.normal(size=20), np.zeros(20, int)) == 0.0
        assert interpret.gaussian_nmi(np.full(20, 3.0), rng.integers(0, 2, 20)) == 0.0

    def test_singleton_cluster_is_clipped_not_infinite(self):
        det = interpret.gaussian_nmi_detail(np.array([0.0, 1.0, 2.0, 3.0, 50.0]), np.array([0, 0, 0, 0, 1]))
        assert np.isfinite(det.mi) and det.nmi == 1.0 and det.clipped

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_bounded(self, seed, k):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, k, 40)
        x = rng.normal(size=40) * rng.uniform(0.1, 10) + labels * rng.uniform(0, 5)
        assert 0.0 <= interpret.gaussian_nmi(x, labels) <= 1.0


class TestDiscreteNmi:
    def test_examples(self):
        assert interpret.discrete_nmi([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
        assert interpret.discrete_nmi([0, 1, 2, 0], [5, 5, 5, 5]) == 0.0
        assert interpret.discrete_nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_arithmetic_matches_sklearn(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 4, 50), rng.integers(0, 3, 50)
        assert interpret.discrete_nmi(a, b) == pytest.approx(
            normalized_mutual_info_score(a, b, average_method="arithmetic"), abs=1e-10
        )

    def test_h_y_normalizer(self, rng):
        a, b = rng.integers(0, 3, 100), rng.integers(0, 4, 100)
        nmi, mi, norm = interpret.discrete_nmi_detail(a, b, "h_y")
        p = np.bincount(b) / 100
        assert norm == pytest.approx(-(p * np.log(p)).sum())
        assert nmi == pytest.approx(mi / norm)

    def test_errors(self):
        with pytest.raises(InterpretError):
            interpret.discrete_nmi([0, 1], [0])
        with pytest.raises(InterpretError):
            interpret.discrete_nmi([0, 1], [0, 1], "geometric")


def fake_fit(means):
    means = np.asarray(means, float)
    k, d = means.shape
    params = GmmParams(np.ones(k) / k, means, np.repeat(np.eye(d)[None], k, axis=0))
    return GmmFit(params, 0.0, 1, True, 0, (0.0,), 10, EmOptions())


class TestCosine:
    @pytest.fixture
    def model(self, rng):
        return pca.fit(rng.standard_normal((30, 6)), max_components=3)

    def test_definitions(self):
        sim, bad = interpret.cosine_matrix(np.array([[1.0, 0], [0, 2.0], [-3.0, 0], [0, 0]]))
        np.testing.assert_allclose(sim[:3, :3], [[1, 0, -1], [0, 1, 0], [-1, 0, 1]], atol=1e-15)
        assert bad.tolist() == [False, False, False, True]
        assert np.isnan(sim[3]).all()

    def test_back_projection(self, model):
        fit = fake_fit([[1.0, 0, 0], [0, 0, 0]])
        np.testing.assert_allclose(interpret.back_projected_means(fit, model)[1], model.mean)
        with pytest.raises(InterpretError):
            interpret.back_projected_means(fake_fit([[1.0, 0]]), model)

    def test_summaries_and_mask(self, model, rng):
        fits = {"a": fake_fit(rng.normal(size=(3, 3))), "b": fake_fit(rng.normal(size=(2, 3)))}
        res = interpret.cluster_means_cosine(fits, {"a": model, "b": model})
        v = res.values
        assert res.within_mean == pytest.approx(np.mean([v[0, 1], v[0, 2], v[1, 2], v[3, 4]]))
        assert res.between_mean == pytest.approx(v[:3, 3:].mean())
        masked = interpret.cluster_means_cosine(fits, {"a": model, "b": model}, mask=[0, 2])
        x = interpret.back_projected_means(fits["a"], model)[:, [0, 2]]
        assert masked.values[0, 1] == pytest.approx(x[0] @ x[1] / np.linalg.norm(x[0]) / np.linalg.norm(x[1]))
        with pytest.raises(InterpretError):
            interpret.cluster_means_cosine(fits, {"a": model, "b": model}, mask=[6])


class TestTopLabels:
    def test_argmax_and_ties(self):
        dist = interpret.top_label_distribution([[0.2, 0.9, 0.1], [0.5, 0.5, 0.1]], ["x", "y", "z"], clustering("s", [0, 0]))
        assert dist.top_label.tolist() == [1, 0]
        assert dist.never_top == ("z",)

    def test_one_hot_histograms(self, rng):
        top = rng.integers(0, 4, 100)
        labels = rng.integers(0, 3, 100)
        dist = interpret.top_label_distribution(np.eye(4)[top], list("abcd"), clustering("s", labels, k=3))
        for c in range(3):
            np.testing.assert_array_equal(dist.counts[c], np.bincount(top[labels == c], minlength=4))
