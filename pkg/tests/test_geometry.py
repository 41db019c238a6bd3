import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from copyspace.geometry import (
    DistanceCache,
    GeometryError,
    as_embeddings,
    check_distance_range,
    distance,
    fit_pca,
    nearest_k,
    nearest_k_sets,
    normalize,
    pairwise_distances,
    perturb_locations,
    radial_counts,
    reduce,
    ring_count_matrix,
)


def unit_rows(rng, n, d):
    return normalize(rng.normal(size=(n, d)))


class TestDistance:
    def test_identical_is_zero(self, rng):
        a = unit_rows(rng, 1, 16)[0]
        assert distance(a, a) == 0.0

    def test_antipodal_is_two(self, rng):
        a = unit_rows(rng, 1, 16)[0]
        assert distance(a, -a) == pytest.approx(2.0, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(GeometryError):
            distance(np.ones(3), np.ones(4))

    @given(st.integers(0, 2**31 - 1))
    def test_triangle_inequality_and_range(self, seed):
        a, b, c = unit_rows(np.random.default_rng(seed), 3, 8)
        assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-12
        assert 0.0 <= distance(a, b) <= 2.0 + 1e-12
        assert distance(a, b) == distance(b, a)

    def test_pairwise_blocks_match_loop(self, rng):
        x = unit_rows(rng, 37, 5)
        d = pairwise_distances(x, block=8)
        oracle = np.array([[np.sqrt(np.sum((p - q) ** 2)) for q in x] for p in x])
        np.testing.assert_allclose(d, oracle, atol=1e-14)
        assert DistanceCache(x).matrix.shape == (37, 37)

    def test_unit_norm_invariant(self):
        with pytest.raises(GeometryError):
            as_embeddings(np.array([[1.0, 1.0]]))
        with pytest.raises(GeometryError):
            as_embeddings(np.array([[np.nan, 1.0]]), unit=False)
        assert as_embeddings(np.array([[0.6, 0.8]])).shape == (1, 2)

    def test_distance_range_fixture(self, rng):
        tight = normalize(np.array([1.0, 0, 0]) + 0.05 * rng.normal(size=(50, 3)))
        assert check_distance_range(tight)
        spread = unit_rows(rng, 200, 3)
        assert not check_distance_range(spread)


class TestPca:
    def test_rank_one_line(self, rng):
        t = rng.normal(size=100)
        x = np.outer(t, [1.0, 2.0, -1.0]) + 3.0
        r = fit_pca(x, 1)
        assert r.explained_variance_share == pytest.approx(1.0, abs=1e-12)

    def test_isotropic_cloud_against_eigh_oracle(self, rng):
        x = rng.normal(size=(5000, 3))
        r = fit_pca(x, 2)
        cov = np.cov(x, rowvar=False)
        w, v = np.linalg.eigh(cov)
        order = np.argsort(w)[::-1]
        np.testing.assert_allclose(r.eigenvalues, w[order][:2], rtol=1e-10)
        assert np.max(subspace_angles(r.components.T, v[:, order[:2]])) < 1e-6
        assert r.explained_variance_share == pytest.approx(2 / 3, abs=0.03)

    def test_rank_k_round_trip(self, rng):
        basis = np.linalg.qr(rng.normal(size=(10, 3)))[0]
        x = rng.normal(size=(200, 3)) @ basis.T + rng.normal(size=10)
        r = fit_pca(x, 3)
        back = r.inverse_transform(r.transform(x))
        assert np.max(np.abs(back - x)) < 1e-8

    def test_reduce_mean_and_component(self, rng):
        x = rng.normal(size=(300, 6))
        r = fit_pca(x, 3)
        np.testing.assert_allclose(reduce(r, r.mean), 0.0, atol=1e-12)
        np.testing.assert_allclose(reduce(r, r.mean + r.components[0]), [1, 0, 0], atol=1e-12)

    def test_orthonormal_and_sorted(self, rng):
        r = fit_pca(rng.normal(size=(400, 12)) * np.arange(1, 13), 5)
        np.testing.assert_allclose(r.components @ r.components.T, np.eye(5), atol=1e-8)
        assert np.all(np.diff(r.eigenvalues) <= 0)
        assert 0.0 <= r.explained_variance_share <= 1.0

    def test_reduced_distance_bound(self, rng):
        x = unit_rows(rng, 500, 16)
        r = fit_pca(x, 4)
        tail = x - r.inverse_transform(r.transform(x))
        idx = rng.integers(0, 500, size=(100, 2))
        for i, j in idx:
            full = distance(x[i], x[j])
            red = distance(r.transform(x[i]), r.transform(x[j]))
            assert red <= full + 1e-12
            assert full <= red + np.linalg.norm(tail[i] - tail[j]) + 1e-12

    def test_distortion_bounded_by_tail_eigenvalues(self, rng):
        x = unit_rows(rng, 800, 10)
        r = fit_pca(x, 4)
        full = fit_pca(x, 10)
        discarded = full.eigenvalues[4:].sum()
        idx = rng.integers(0, 800, size=(2000, 2))
        z = r.transform(x)
        distort = np.mean(np.sum((x[idx[:, 0]] - x[idx[:, 1]]) ** 2, 1) - np.sum((z[idx[:, 0]] - z[idx[:, 1]]) ** 2, 1))
        assert distort <= 2 * discarded * 1.1

    def test_degenerate_corpus(self):
        with pytest.raises(GeometryError):
            fit_pca(np.ones((10, 3)), 1)
        with pytest.raises(GeometryError):
            fit_pca(np.eye(3), 3)

    def test_serialization_round_trip(self, rng):
        from copyspace.geometry import PcaReducer

        r = fit_pca(rng.normal(size=(50, 4)), 2)
        r2 = PcaReducer.from_dict(r.to_dict())
        np.testing.assert_array_equal(r2.components, r.components)


class TestRadialCounts:
    def test_direct_count_and_strict_bounds(self):
        emb = np.array([[0.0, 0.0], [0.05, 0.0], [0.15, 0.0], [0.1, 0.0]])
        (c,) = radial_counts(0, [0, 1, 2, 3], emb, [(0.0, 0.1)])
        assert c.count == 1  # 0.05 inside, 0.1 on the boundary excluded

    def test_unknown_focal(self):
        with pytest.raises(KeyError):
            radial_counts(9, [0, 1], np.zeros((2, 2)), [(0, 1)])

    def test_bad_rings(self):
        with pytest.raises(GeometryError):
            radial_counts(0, [0, 1], np.zeros((2, 2)), [(0.2, 0.1)])
        with pytest.raises(GeometryError):
            radial_counts(0, [0, 1], np.zeros((2, 2)), [(0, 0.2), (0.1, 0.3)])

    def test_matrix_matches_brute_force(self, rng):
        x = rng.uniform(size=(300, 2))
        rings = [(0.0, 0.1), (0.1, 0.2)]
        got = ring_count_matrix(x, rings, block=64)
        brute = np.zeros_like(got)
        for i in range(300):
            for j in range(300):
                if i == j:
                    continue
                d = np.sqrt(np.sum((x[i] - x[j]) ** 2))
                for r, (lo, hi) in enumerate(rings):
                    brute[i, r] += lo < d < hi
        np.testing.assert_array_equal(got, brute)
        assert np.all(got.sum(1) <= 299)
        single = [c.count for c in radial_counts(5, np.arange(300), x, rings)]
        assert single == got[5].tolist()

    def test_rings_covering_sphere_partition(self, rng):
        x = unit_rows(rng, 200, 4)
        rings = [(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0000001)]
        assert np.all(ring_count_matrix(x, rings).sum(1) == 199)


class TestNearestK:
    def test_sorted(self):
        emb = np.array([[0.0], [0.3], [0.1], [0.2]])
        nb = nearest_k(0, [0, 1, 2, 3], emb, 2)
        assert nb.ids == [2, 3]
        np.testing.assert_allclose(nb.distances, [0.1, 0.2])
        assert nb.complete

    def test_tie_lower_id_first(self):
        emb = np.array([[0.0], [0.1], [-0.1]])
        assert nearest_k(10, [10, 7, 3], emb, 1).ids == [3]

    def test_short_list_flagged(self):
        nb = nearest_k(0, [0, 1], np.array([[0.0], [1.0]]), 5)
        assert nb.ids == [1] and not nb.complete

    def test_insertion_flips_membership(self, rng):
        x = rng.uniform(size=(30, 2))
        before = nearest_k_sets(x, 5)
        new = x[0] + 1e-6
        after = nearest_k_sets(np.vstack([x, new]), 5)
        assert 30 not in before[0] and 30 in after[0]

    def test_sets_match_brute_force(self, rng):
        x = rng.uniform(size=(1000, 3))
        sets = nearest_k_sets(x, 5)
        d = pairwise_distances(x)
        for i in range(0, 1000, 97):
            order = sorted((d[i, j], j) for j in range(1000) if j != i)[:5]
            assert sets[i] == frozenset(j for _, j in order)


class TestPerturb:
    def test_vanishing_noise(self, rng):
        seeds = unit_rows(rng, 20, 8)
        pl = perturb_locations(seeds, [1e12], 50, 3)
        assert np.max(np.abs(pl.points - seeds[pl.seed_index])) < 1e-5

    def test_count_and_unit_norm(self, rng):
        seeds = unit_rows(rng, 30, 8)
        pl = perturb_locations(seeds, [1, 2, 3, 4, 5, 10, 20, 30], 50, 3)
        assert pl.points.shape == (400, 8)
        np.testing.assert_allclose(np.linalg.norm(pl.points, axis=1), 1.0, atol=1e-12)

    def test_noise_moments(self, rng):
        seeds = unit_rows(rng, 40, 4)
        sd = seeds.std(axis=0, ddof=1)
        for c in (1.0, 10.0):
            pl = perturb_locations(seeds, [c], 100_000, 11)
            emp = (pl.raw - seeds[pl.seed_index]).std(axis=0)
            np.testing.assert_allclose(emp, sd / np.sqrt(c), rtol=0.05)

    def test_deterministic_and_errors(self, rng):
        seeds = unit_rows(rng, 10, 4)
        a = perturb_locations(seeds, [2.0], 10, 5)
        b = perturb_locations(seeds, [2.0], 10, 5)
        np.testing.assert_array_equal(a.points, b.points)
        with pytest.raises(GeometryError):
            perturb_locations(np.zeros((0, 4)), [1.0], 5, 1)
        with pytest.raises(GeometryError):
            perturb_locations(seeds, [0.0], 5, 1)
