from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from popcluster import pca, selection, synth
from popcluster.gmm import EmOptions, GmmError

labelings = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 4), min_size=n, max_size=n),
        st.lists(st.integers(0, 4), min_size=n, max_size=n),
    )
)


def brute_force_rand(a, b):
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in combinations(range(len(a)), 2))
    return agree / (len(a) * (len(a) - 1) / 2)


def embed(data, threshold=0.95):
    model = pca.fit(data.x)
    d, _ = pca.select_components(model.variance_ratio, threshold)
    return pca.transform(model.truncate(d), data.x)


class TestRandIndex:
    def test_four_item_example(self):
        assert selection.rand_index([0, 0, 1, 1], [0, 1, 2, 3]) == 4 / 6

    def test_identical_and_single_cluster(self):
        assert selection.rand_index([3, 1, 3, 2], [3, 1, 3, 2]) == 1.0
        assert selection.rand_index([0, 0, 0], [7, 7, 7]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            selection.rand_index([0, 1], [0, 1, 1])

    @settings(max_examples=150, deadline=None)
    @given(labelings)
    def test_matches_pair_enumeration(self, ab):
        a, b = ab
        assert selection.rand_index(a, b) == pytest.approx(brute_force_rand(a, b), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(labelings, st.permutations(range(5)))
    def test_symmetric_and_relabel_invariant(self, ab, perm):
        a, b = np.array(ab[0]), np.array(ab[1])
        r = selection.rand_index(a, b)
        assert selection.rand_index(b, a) == r
        assert selection.rand_index(np.array(perm)[a], b) == r
        assert 0.0 <= r <= 1.0

    @settings(max_examples=100, deadline=None)
    @given(labelings)
    def test_adjusted_rand_matches_sklearn(self, ab):
        a, b = ab
        assert selection.adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


class TestDeriveSeed:
    def test_pure_and_distinct(self):
        assert selection.derive_seed(5, 3, 7) == selection.derive_seed(5, 3, 7)
        seeds = {selection.derive_seed(5, k, i) for k in range(1, 31) for i in range(100)}
        assert len(seeds) == 3000
        assert selection.derive_seed(5, 3, 7) != selection.derive_seed(6, 3, 7)

    def test_fits_in_u64(self):
        assert 0 <= selection.derive_seed(2**64 - 1, 30, 99) < 2**64


class TestBicSweep:
    def test_recovers_three_clusters(self, three_cluster_data):
        sweep = selection.bic_sweep(embed(three_cluster_data), 1, 10, 20, base_seed=0)
        assert sweep.chosen_k == 3
        assert all(len(v) == 20 for v in sweep.per_k.values())
        assert sweep.best_init().k == 3

    def test_single_blob_picks_one(self):
        data = synth.generate(synth.SynthSpec(k_true=1, seed=4))
        sweep = selection.bic_sweep(embed(data), 1, 5, 20, base_seed=4)
        assert sweep.chosen_k == 1

    def test_parallel_matches_serial(self, rng):
        y = rng.standard_normal((80, 2))
        a = selection.bic_sweep(y, 1, 4, 3, base_seed=2, threads=1)
        b = selection.bic_sweep(y, 1, 4, 3, base_seed=2, threads=2)
        assert a.mean_bic == b.mean_bic
        assert a.records() == b.records()

    def test_seeds_follow_derivation(self, rng):
        sweep = selection.bic_sweep(rng.standard_normal((30, 1)), 2, 3, 2, base_seed=8)
        assert [r.seed for r in sweep.records()] == [
            selection.derive_seed(8, k, i) for k in (2, 3) for i in range(2)
        ]

    def test_tie_prefers_smaller_k(self, monkeypatch, rng):
        monkeypatch.setattr(selection, "_fit_job", lambda job: selection.InitRecord(job[1], job[2], job[3], 5.0, 0.0, True, 1))
        sweep = selection.bic_sweep(rng.standard_normal((10, 1)), 2, 6, 2, base_seed=0)
        assert sweep.chosen_k == 2

    def test_k_max_must_be_below_n(self, rng):
        with pytest.raises(ValueError, match="k_max"):
            selection.bic_sweep(rng.standard_normal((5, 1)), 1, 5, 1, base_seed=0)

    def test_failure_names_k_and_seed(self, rng, monkeypatch):
        def boom(y, k, seed, opts):
            raise GmmError("collapse in component 0")

        monkeypatch.setattr(selection, "em_fit", boom)
        with pytest.raises(GmmError, match=r"K=2, seed=\d+"):
            selection.bic_sweep(rng.standard_normal((10, 1)), 2, 2, 1, base_seed=0)


class TestStability:
    def test_separated_clusters_are_stable(self, three_cluster_data):
        seeds = [selection.derive_seed(1, 3, i) for i in range(5)]
        res = selection.stability(embed(three_cluster_data), 3, 5, seeds)
        assert res.mean_rand >= 0.99
        np.testing.assert_array_equal(res.rand_matrix, res.rand_matrix.T)
        np.testing.assert_array_equal(np.diag(res.rand_matrix), 1.0)

    def test_noise_is_less_stable(self, rng):
        y = rng.standard_normal((300, 3))
        res = selection.stability(y, 5, 5, range(5), EmOptions(max_iter=100))
        assert res.mean_rand < 0.99
        assert np.all((res.rand_matrix >= 0) & (res.rand_matrix <= 1))

    def test_identical_seeds_give_one(self, rng):
        res = selection.stability(rng.standard_normal((50, 2)), 3, 2, [7, 7])
        assert res.mean_rand == 1.0

    def test_mean_over_upper_triangle(self, rng):
        res = selection.stability(rng.standard_normal((60, 2)), 4, 4, range(4))
        pairs = [selection.rand_index(a, b) for a, b in combinations(res.labelings, 2)]
        assert res.mean_rand == pytest.approx(np.mean(pairs), abs=1e-15)

    def test_needs_two_refits(self, rng):
        with pytest.raises(ValueError):
            selection.stability(rng.standard_normal((10, 1)), 2, 1, [0])
