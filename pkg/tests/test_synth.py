from itertools import combinations
from math import comb

import numpy as np
import pytest

from popcluster import pca, selection, synth
from popcluster.gmm import em_fit, hard_assign, responsibilities
from popcluster.synth import SynthError, SynthSpec


class TestSpec:
    @pytest.mark.parametrize(
        "kw",
        [dict(k_true=0), dict(k_true=3, n=29), dict(d_low=300), dict(separation=-1),
         dict(within_sd=0), dict(weights=(0.5, 0.5))],
    )
    def test_invalid(self, kw):
        with pytest.raises(SynthError):
            SynthSpec(**kw)

    def test_impossible_separation(self):
        with pytest.raises(SynthError, match="lower the separation"):
            synth.generate(SynthSpec(k_true=30, n=300, d_low=1, m=5, separation=1e6))


class TestGenerate:
    def test_shapes_and_determinism(self):
        a, b = synth.generate(SynthSpec(seed=4)), synth.generate(SynthSpec(seed=4))
        assert a.x.values.shape == (600, 200)
        assert a.x.values.tobytes() == b.x.values.tobytes()
        assert not np.array_equal(a.x.values, synth.generate(SynthSpec(seed=5)).x.values)

    def test_means_respect_separation(self):
        data = synth.generate(SynthSpec(k_true=5, separation=6, within_sd=2, seed=1))
        mu = data.latent_means
        dists = [np.linalg.norm(mu[i] - mu[j]) for i, j in combinations(range(5), 2)]
        assert min(dists) >= 12

    def test_class_counts_within_four_sd(self):
        w = (0.2, 0.3, 0.5)
        data = synth.generate(SynthSpec(k_true=3, n=2000, weights=w, seed=7))
        counts = np.bincount(data.true_labels, minlength=3)
        for c, p in zip(counts, w):
            assert abs(c - 2000 * p) <= 4 * np.sqrt(2000 * p * (1 - p))

    def test_embedding_orthonormal_and_distance_preserving(self):
        data = synth.generate(SynthSpec(n=50, noise_sd=0.0, seed=2))
        q = data.embedding
        np.testing.assert_allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-12)
        x, y = data.x.values, data.latent
        for i, j in [(0, 1), (3, 40), (10, 49)]:
            assert np.linalg.norm(x[i] - x[j]) == pytest.approx(np.linalg.norm(y[i] - y[j]), abs=1e-8)

    def test_noise_free_data_is_exactly_low_rank(self):
        data = synth.generate(SynthSpec(n=100, d_low=4, m=30, noise_sd=0.0, seed=3))
        ratio = pca.fit(data.x).variance_ratio
        assert ratio[:4].sum() == pytest.approx(1.0, abs=1e-10)


@pytest.fixture(scope="module")
def data():
    return synth.generate(SynthSpec(seed=0))


class TestOracleCheck:
    def test_perfect_recovery(self, data):
        rep = synth.oracle_check(data, 3, (data.true_labels + 1) % 3)
        assert rep.k_match and rep.rand_vs_truth == 1.0

    def test_one_flipped_item(self, data):
        labels = data.true_labels.copy()
        i = 0
        a = labels[i]
        labels[i] = (a + 1) % 3
        sizes = np.bincount(data.true_labels, minlength=3)
        # pairs that change status: i with its old classmates and with its new ones
        changed = (sizes[a] - 1) + sizes[labels[i]]
        expected = 1 - changed / comb(600, 2)
        assert synth.oracle_check(data, 3, labels).rand_vs_truth == pytest.approx(expected, abs=1e-12)
        assert expected > 0.997

    def test_random_labels_near_independence_baseline(self, data, rng):
        rep = synth.oracle_check(data, 3, rng.integers(0, 3, 600))
        assert abs(rep.rand_vs_truth - 5 / 9) < 0.05

    def test_k_mismatch_flagged(self, data):
        assert not synth.oracle_check(data, 4, data.true_labels).k_match

    def test_length_mismatch(self, data):
        with pytest.raises(SynthError):
            synth.oracle_check(data, 3, np.zeros(10, int))


def pipeline_rand(separation, seed):
    data = synth.generate(SynthSpec(k_true=3, n=300, d_low=3, m=40, separation=separation, seed=seed))
    model = pca.fit(data.x)
    d, _ = pca.select_components(model.variance_ratio, 0.95)
    y = pca.transform(model.truncate(d), data.x)
    sweep = selection.bic_sweep(y, 1, 5, 5, base_seed=seed)
    fit = em_fit(y, sweep.chosen_k, sweep.best_init().seed)
    return synth.oracle_check(data, sweep.chosen_k, hard_assign(responsibilities(fit.params, y))).rand_vs_truth


def test_rand_does_not_fall_with_separation():
    means = [np.mean([pipeline_rand(s, seed) for seed in (0, 1)]) for s in (0.5, 2.0, 10.0)]
    # fixed seeds, so allow a little slack for finite-sample noise
    assert means[1] >= means[0] - 0.01
    assert means[2] >= means[1] - 0.01
    assert means[2] >= 0.99
