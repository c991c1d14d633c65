import numpy as np
import pytest

from conftest import random_streamlines
from tractokit.errors import InvalidInputError
from tractokit.search import (
    NeighborSet,
    build_index,
    farthest_point_sampling,
    knn_mdf,
    knn_points,
    radius_search,
    radius_search_fss,
)


def oracle_mdf(q, stack):
    direct = np.linalg.norm(stack - q, axis=2).mean(axis=1)
    flipped = np.linalg.norm(stack - q[::-1], axis=2).mean(axis=1)
    return np.minimum(direct, flipped)


def oracle_knn(stack, q, k, exclude=None):
    d = oracle_mdf(q, stack)
    ids = [i for i in np.argsort(d, kind="stable") if i != exclude]
    return ids[:k], d


def oracle_fss(stack, cand, q, radius, k):
    d = oracle_mdf(q, stack)
    inside = sorted((i for i in cand if d[i] <= radius), key=lambda i: (d[i], i))
    if len(inside) >= k:
        return inside[:k], False
    rest = sorted((i for i in cand if d[i] > radius), key=lambda i: (d[i], i))
    return inside + rest[: k - len(inside)], True


def oracle_fps(pts, p_f, first):
    chosen = [first]
    while len(chosen) < p_f:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(np.linalg.norm(pts[i] - pts[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


@pytest.fixture(scope="module")
def big():
    rng = np.random.default_rng(7)
    stack = random_streamlines(rng, 1000)
    return stack, build_index(list(stack), cell_size=10.0)


class TestIndex:
    def test_empty(self):
        idx = build_index([])
        q = np.zeros((40, 3))
        assert len(knn_mdf(idx, q, 3)) == 0
        assert len(radius_search(idx, q, 5.0)) == 0

    def test_count(self, big):
        assert len(big[1]) == 1000

    def test_duplicates_kept(self):
        s = np.linspace([0, 0, 0], [10, 0, 0], 40)
        idx = build_index([s, s])
        assert list(idx.ids) == [0, 1]
        res = knn_mdf(idx, s, 2)
        assert sorted(res.ids) == [0, 1] and np.all(res.distances == 0)

    def test_mixed_counts(self):
        with pytest.raises(InvalidInputError):
            build_index([np.zeros((40, 3)), np.zeros((39, 3))])

    def test_bad_cell(self):
        with pytest.raises(InvalidInputError):
            build_index([np.zeros((40, 3))], cell_size=0)

    def test_immutable(self, big):
        with pytest.raises(ValueError):
            big[1].streamlines[0, 0, 0] = 1.0

    def test_one_cell_per_entry(self, big):
        idx = big[1]
        cells = [c for c, members in idx.grid.items() for _ in members]
        assert len(cells) == len(idx)
        for c, members in idx.grid.items():
            for pos in members:
                assert idx._cell(idx.barycenters[pos]) == c


class TestKnn:
    def test_shifted_copy(self):
        q = np.linspace([0, 0, 0], [20, 5, 0], 40)
        idx = build_index([q, q + [5, 0, 0]])
        res = knn_mdf(idx, q, 1, exclude_id=0)
        assert list(res.ids) == [1]
        assert res.distances[0] == pytest.approx(5.0, abs=1e-12)

    def test_k20_sorted(self, big):
        stack, idx = big
        res = knn_mdf(idx, stack[3], 20, exclude_id=3)
        assert len(res) == 20 and 3 not in res.ids
        assert np.all(np.diff(res.distances) >= 0)

    def test_k_larger_than_index(self):
        rng = np.random.default_rng(0)
        stack = random_streamlines(rng, 5)
        idx = build_index(list(stack))
        assert sorted(knn_mdf(idx, stack[0], 50).ids) == [0, 1, 2, 3, 4]
        assert sorted(knn_mdf(idx, stack[0], 50, exclude_id=0).ids) == [1, 2, 3, 4]

    def test_wrong_query(self, big):
        with pytest.raises(InvalidInputError):
            knn_mdf(big[1], np.zeros((15, 3)), 3)
        with pytest.raises(InvalidInputError):
            knn_mdf(big[1], np.zeros((40, 3)), 0)

    def test_exact_against_brute_force(self, big):
        stack, idx = big
        rng = np.random.default_rng(11)
        queries = random_streamlines(rng, 1000)
        for i, q in enumerate(queries):
            # half the queries are indexed entries, which must be excluded
            if i % 2:
                q, exclude = stack[i], i
            else:
                exclude = None
            res = knn_mdf(idx, q, 20, exclude_id=exclude)
            ref, d = oracle_knn(stack, q, 20, exclude)
            assert list(res.ids) == ref
            np.testing.assert_allclose(res.distances, d[ref], rtol=1e-12)


class TestRadius:
    def test_grid_radius_matches_brute_force(self, big):
        stack, idx = big
        for i in range(0, 1000, 25):
            res = radius_search(idx, stack[i], 12.0, exclude_id=i)
            d = oracle_mdf(stack[i], stack)
            ref = sorted((j for j in range(1000) if d[j] <= 12.0 and j != i), key=lambda j: (d[j], j))
            assert list(res.ids) == ref

    def test_all_outside_fallback(self):
        q = np.linspace([0, 0, 0], [30, 0, 0], 40)
        stack = [q] + [q + [0, 10 + i, 0] for i in range(6)]
        idx = build_index(stack)
        cand = knn_mdf(idx, q, 6, exclude_id=0)
        res = radius_search_fss(idx, cand, q, radius=6.0, k_hyper=5)
        assert res.fallback
        assert list(res.ids) == [1, 2, 3, 4, 5]

    def test_seven_of_ten(self):
        q = np.linspace([0, 0, 0], [30, 0, 0], 40)
        offsets = [1, 2, 3, 4, 5, 5.5, 5.9, 8, 9, 10]
        idx = build_index([q] + [q + [0, o, 0] for o in offsets])
        cand = knn_mdf(idx, q, 10, exclude_id=0)
        res = radius_search_fss(idx, cand, q, radius=6.0, k_hyper=5)
        assert not res.fallback
        assert list(res.ids) == [1, 2, 3, 4, 5]

    def test_empty_candidates(self, big):
        res = radius_search_fss(big[1], NeighborSet.empty(), big[0][0], 6.0, 5)
        assert res.fallback and len(res) == 0

    def test_at_most_k(self, big):
        stack, idx = big
        cand = knn_mdf(idx, stack[0], 20, exclude_id=0)
        assert len(radius_search_fss(idx, cand, stack[0], 6.0, 5)) <= 5

    def test_exact_against_brute_force(self, big):
        stack, idx = big
        rng = np.random.default_rng(5)
        for i in range(1000):
            q = stack[i]
            cand = knn_mdf(idx, q, 20, exclude_id=i)
            radius = float(rng.choice([4.0, 6.0, 15.0, 30.0]))
            res = radius_search_fss(idx, cand, q, radius, 5)
            ref, fb = oracle_fss(stack, list(cand.ids), q, radius, 5)
            assert list(res.ids) == ref and res.fallback == fb


class TestFPS:
    def test_collinear(self):
        pts = np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)]
        for seed in range(200):
            sel = farthest_point_sampling(pts, 2, seed=seed)
            if sel[0] == 0:
                assert sel[1] == 9
                break
        else:
            pytest.fail("no seed drew index 0 first")

    def test_full_permutation(self, rng):
        pts = rng.normal(size=(30, 3))
        assert sorted(farthest_point_sampling(pts, 30, seed=1)) == list(range(30))

    def test_64_of_220(self, rng):
        sel = farthest_point_sampling(rng.normal(size=(220, 3)), 64, seed=0)
        assert len(set(sel.tolist())) == 64

    def test_too_many(self, rng):
        with pytest.raises(InvalidInputError):
            farthest_point_sampling(rng.normal(size=(10, 3)), 11)

    def test_against_exhaustive_and_monotone(self, rng):
        for trial in range(20):
            # integer grid coordinates produce plenty of ties
            pts = rng.integers(0, 4, size=(25, 3)).astype(float)
            sel = farthest_point_sampling(pts, 10, seed=trial)
            assert list(sel) == oracle_fps(pts, 10, int(sel[0]))
            gaps = [min(np.linalg.norm(pts[sel[i]] - pts[sel[j]]) for j in range(i)) for i in range(1, 10)]
            assert all(a >= b for a, b in zip(gaps, gaps[1:]))

    def test_deterministic(self, rng):
        pts = rng.normal(size=(100, 3))
        assert np.array_equal(farthest_point_sampling(pts, 20, 4), farthest_point_sampling(pts, 20, 4))


class TestKnnPoints:
    def test_self(self, rng):
        pts = rng.normal(size=(50, 3))
        assert list(knn_points(pts, pts[17], 1)) == [17]

    def test_sorted(self, rng):
        pts = rng.normal(size=(220, 3))
        sel = knn_points(pts, pts[0], 16)
        d = np.linalg.norm(pts[sel] - pts[0], axis=1)
        assert len(sel) == 16 and np.all(np.diff(d) >= 0)

    def test_grid_against_sort(self):
        g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0), np.arange(5.0), indexing="ij"), -1).reshape(-1, 3)
        center = g[62]
        d = [float(np.linalg.norm(p - center)) for p in g]
        ref = sorted(range(len(g)), key=lambda i: (d[i], i))
        for k in (1, 7, 19, 27, 125):
            assert list(knn_points(g, center, k)) == ref[:k]

    def test_too_many(self, rng):
        with pytest.raises(InvalidInputError):
            knn_points(rng.normal(size=(5, 3)), np.zeros(3), 6)
