# test/test_aggregators.py

import itertools

import numpy as np
import pytest

from tools.aggregators import (
    AggregatorKind,
    GlobalModelState,
    aggregate_round,
    coord_median,
    fedavg,
    geomedian_objective,
    krum_scores,
    merge_sparse,
    multi_krum,
    rfa_geomedian,
    trimmed_mean,
)
from tools.config import AggregatorConfig
from tools.errors import InvalidArgumentError
from tools.params import partition_packs
from tools.sparsify import SparseMask, SparseUpdate, gather


def full_updates(rows, sizes=None, pack_size=1):
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    sizes = sizes or [1] * len(rows)
    P = -(-rows[0].shape[0] // pack_size)
    return [SparseUpdate(i, SparseMask.full(P), r, s) for i, (r, s) in enumerate(zip(rows, sizes))]


class TestMergeSparse:
    """Test suite for the per-pack weighted merge."""

    def test_single_contributor_is_copied_exactly(self):
        """Should take a lone contributor's values regardless of its dataset size."""
        # Arrange
        part = partition_packs(4, 2)
        updates = [
            SparseUpdate(0, SparseMask.from_indices([0], 2), np.array([0.1, 0.7]), 3),
            SparseUpdate(1, SparseMask.from_indices([1], 2), np.array([5.0, 6.0]), 1000),
        ]

        # Act
        params, coverage = merge_sparse(updates, [0, 1], np.zeros(4), part)

        # Assert
        assert params.tolist() == [0.1, 0.7, 5.0, 6.0]
        assert coverage == SparseMask.full(2)

    def test_equal_weights_average(self):
        """Should give (a+b)/2 for two equally sized contributors."""
        part = partition_packs(1, 1)
        updates = full_updates([[1.0], [4.0]])
        params, _ = merge_sparse(updates, [0, 1], np.zeros(1), part)
        assert params.tolist() == [2.5]

    def test_weighted_by_dataset_size(self):
        """Should give 2.0 for sizes {100, 300, 100} and values {1, 2, 3}."""
        part = partition_packs(1, 1)
        updates = full_updates([[1.0], [2.0], [3.0]], sizes=[100, 300, 100])
        params, _ = merge_sparse(updates, [0, 1, 2], np.zeros(1), part)
        assert params[0] == pytest.approx(2.0, abs=1e-15)

    def test_uncovered_packs_keep_previous_values(self):
        """Should carry over the previous global where nobody contributed."""
        part = partition_packs(4, 2)
        updates = [SparseUpdate(0, SparseMask.from_indices([0], 2), np.array([1.0, 1.0]), 1)]
        params, coverage = merge_sparse(updates, [0], np.array([9.0, 9.0, 9.0, 9.0]), part)
        assert params.tolist() == [1.0, 1.0, 9.0, 9.0]
        assert coverage.indices().tolist() == [0]

    def test_excluded_clients_do_not_contribute(self):
        """Should ignore clients outside the retained set."""
        part = partition_packs(1, 1)
        updates = full_updates([[1.0], [100.0]])
        params, _ = merge_sparse(updates, [0], np.zeros(1), part)
        assert params.tolist() == [1.0]

    def test_denominators_agree(self):
        """Should give the same merge whether weights are normalised over all or retained clients."""
        # Arrange
        rng = np.random.default_rng(5)
        part = partition_packs(12, 3)
        updates = []
        for i in range(6):
            mask = SparseMask(rng.random(4) < 0.6)
            updates.append(SparseUpdate(i, mask, rng.normal(size=3 * mask.popcount), int(rng.integers(1, 50))))
        prev = rng.normal(size=12)

        # Act
        by_all, _ = merge_sparse(updates, [0, 2, 3, 5], prev, part, "all")
        by_retained, _ = merge_sparse(updates, [0, 2, 3, 5], prev, part, "retained")

        # Assert
        np.testing.assert_allclose(by_all, by_retained, rtol=0, atol=1e-12)

    def test_rejects_unknown_denominator(self):
        """Should reject a weight_denominator other than all or retained."""
        with pytest.raises(InvalidArgumentError):
            merge_sparse(full_updates([[1.0]]), [0], np.zeros(1), partition_packs(1, 1), "some")


class TestDenseBaselines:
    """Test suite for FedAvg, median and trimmed mean."""

    def test_fedavg_equal_sizes(self):
        """Should average [0,0] and [2,2] into [1,1]."""
        assert fedavg([[0, 0], [2, 2]], [1, 1]).tolist() == [1.0, 1.0]

    def test_fedavg_weighted(self):
        """Should weight by dataset size."""
        assert fedavg([[0.0], [4.0]], [1, 3]).tolist() == [3.0]

    def test_fedavg_matches_weighted_sum(self):
        """Should match an explicit weighted sum on random clients."""
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 5))
        w = rng.integers(1, 50, size=10)
        expected = sum(w[i] * x[i] for i in range(10)) / w.sum()
        np.testing.assert_allclose(fedavg(x, w), expected, rtol=1e-12)

    def test_median_odd_and_even(self):
        """Should take the middle value, or the mean of the two middle values."""
        assert coord_median([[1], [2], [3]]).tolist() == [2.0]
        assert coord_median([[1], [2], [3], [10]]).tolist() == [2.5]

    def test_median_matches_sort(self):
        """Should match a sort-based median on m=9, d=16."""
        rng = np.random.default_rng(2)
        x = rng.normal(size=(9, 16))
        np.testing.assert_array_equal(coord_median(x), np.sort(x, axis=0)[4])

    def test_trimmed_mean_drops_extremes(self):
        """Should drop one value from each end at 20% of five."""
        assert trimmed_mean([[-100], [1], [2], [3], [100]], 20).tolist() == [2.0]

    def test_trimmed_mean_ten_percent_of_ten(self):
        """Should average the middle 8 of 10 at 10%."""
        x = np.arange(10.0)[:, None]
        assert trimmed_mean(x, 10).tolist() == [4.5]

    def test_trimmed_mean_zero_is_plain_mean(self):
        """Should equal the mean with nothing trimmed."""
        x = np.random.default_rng(3).normal(size=(7, 3))
        np.testing.assert_allclose(trimmed_mean(x, 0), x.mean(axis=0))


class TestMultiKrum:
    """Test suite for Krum scores and selection."""

    def test_far_outlier_is_not_selected(self):
        """Should drop the update at 100 among {0, 0.1, 0.2, 100}."""
        x = np.array([[0.0], [0.1], [0.2], [100.0]])
        out = multi_krum(x, n_attackers_bound=1, k_select=3)
        assert out[0] == pytest.approx(0.1)

    def test_identical_updates(self):
        """Should return the shared vector for any k_select."""
        x = np.tile([1.0, -2.0], (6, 1))
        for k in range(1, 7):
            assert multi_krum(x, 1, k).tolist() == [1.0, -2.0]

    def test_scores_match_brute_force(self):
        """Should sum the m-n-2 smallest squared distances to others."""
        # Arrange
        rng = np.random.default_rng(6)
        x = rng.normal(size=(6, 4))
        n = 1

        # Act
        scores = krum_scores(x, n)

        # Assert
        for i in range(6):
            d2 = sorted(float(np.sum((x[i] - x[j]) ** 2)) for j in range(6) if j != i)
            assert scores[i] == pytest.approx(sum(d2[:6 - n - 2]))

    def test_extended_neighbour_count(self):
        """Should sum one more distance in the m-n-1 variant."""
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 4))
        d2 = sorted(float(np.sum((x[0] - x[j]) ** 2)) for j in range(1, 6))
        assert krum_scores(x, 1, "extended")[0] == pytest.approx(sum(d2[:4]))

    def test_paper_neighbour_count_matches_classic(self):
        """Should score 'paper' exactly like 'classic', the zero self-distance being the extra term."""
        rng = np.random.default_rng(9)
        x = rng.normal(size=(7, 3))
        np.testing.assert_array_equal(krum_scores(x, 2, "paper"), krum_scores(x, 2, "classic"))

    def test_rejects_unknown_neighbour_count(self):
        """Should refuse a neighbour count it does not know."""
        with pytest.raises(InvalidArgumentError):
            krum_scores(np.zeros((6, 2)), 1, "nearest")

    def test_rejects_infeasible_bound(self):
        """Should refuse m <= n + 2."""
        with pytest.raises(InvalidArgumentError):
            krum_scores(np.zeros((4, 2)), 2)


class TestGeometricMedian:
    """Test suite for the smoothed Weiszfeld iteration."""

    def test_single_point(self):
        """Should return the only point."""
        result = rfa_geomedian([[3.0, -1.0]])
        np.testing.assert_allclose(result.point, [3.0, -1.0])

    def test_one_dimensional_median(self):
        """Should approach the median 1 of {0, 1, 10}."""
        result = rfa_geomedian([[0.0], [1.0], [10.0]], tol=1e-10, max_iters=1000)
        assert result.point[0] == pytest.approx(1.0, abs=1e-4)

    def test_equilateral_triangle(self):
        """Should land on the centroid of an equilateral triangle."""
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
        result = rfa_geomedian(pts, tol=1e-12, max_iters=1000)
        np.testing.assert_allclose(result.point, pts.mean(axis=0), atol=1e-4)

    def test_objective_never_increases(self):
        """Should decrease the weighted distance sum at every iteration."""
        rng = np.random.default_rng(4)
        for _ in range(50):
            pts = rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(1, 9))))
            assert rfa_geomedian(pts, rng.random(pts.shape[0]) + 0.1).monotone

    def test_matches_grid_search(self):
        """Should be within 1e-4 of the best point on a fine 2-D grid."""
        # Arrange
        pts = np.array([[0.0, 0.0], [2.0, 0.1], [0.3, 1.7]])
        axis = np.linspace(0.0, 2.0, 801)
        gx, gy = np.meshgrid(axis, axis)
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        cost = sum(np.linalg.norm(grid - p, axis=1) for p in pts)

        # Act
        result = rfa_geomedian(pts, tol=1e-12, max_iters=5000)

        # Assert
        best = grid[np.argmin(cost)]
        np.testing.assert_allclose(result.point, best, atol=5e-3)
        assert sum(np.linalg.norm(result.point - p) for p in pts) <= cost.min() + 1e-4


class TestAggregateRound:
    """Test suite for aggregator dispatch."""

    def setup_method(self):
        self.part = partition_packs(8, 2)
        self.prev = GlobalModelState.initial(np.zeros(8), self.part)

    def test_fedavg_full_masks_equals_dense(self):
        """Should reproduce dense FedAvg when every client sends everything."""
        # Arrange
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 8))
        sizes = [3, 1, 4, 1, 5]
        updates = full_updates(x, sizes, pack_size=2)

        # Act
        outcome = aggregate_round("fedavg", updates, self.prev, self.part, AggregatorConfig())
        # Assert
        np.testing.assert_allclose(outcome.state.params, fedavg(x, sizes), rtol=1e-12)
        assert outcome.state.round == 1

    def test_safesparse_without_attackers_matches_fedavg(self):
        """Should equal FedAvg for full masks, equal sizes and honest clients that all survive."""
        # Arrange
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 8))
        updates = full_updates(x, pack_size=2)
        restrict = list(range(6))

        # Act
        safe = aggregate_round("safesparse", updates, self.prev, self.part, AggregatorConfig(), restrict_to=restrict)

        # Assert
        np.testing.assert_allclose(safe.state.params, x.mean(axis=0), rtol=1e-12)

    def test_median_densifies_unselected_packs(self):
        """Should treat unselected coordinates as the previous global before the median."""
        # Arrange
        prev = GlobalModelState.initial(np.full(8, 7.0), self.part)
        updates = [SparseUpdate(i, SparseMask.from_indices([0], 4), np.array([1.0, 1.0]), 1) for i in range(3)]

        # Act
        outcome = aggregate_round(AggregatorKind.MEDIAN, updates, prev, self.part, AggregatorConfig())
        # Assert
        assert outcome.state.params.tolist() == [1.0, 1.0] + [7.0] * 6
        assert outcome.state.coverage.indices().tolist() == [0]

    def test_degenerate_filter_fails_open(self):
        """Should keep every client and flag the round when the filter excludes everyone."""
        # Arrange
        updates = full_updates([np.ones(8)] * 10, pack_size=2)

        # Act
        outcome = aggregate_round("safesparse", updates, self.prev, self.part, AggregatorConfig())
        # Assert
        assert outcome.degenerate
        assert outcome.retained == list(range(10))
        assert outcome.excluded_cluster == []
        np.testing.assert_array_equal(outcome.state.params, np.ones(8))

    def test_multikrum_retains_selected(self):
        """Should report the Krum-selected clients as retained."""
        # Arrange
        rows = [np.zeros(8), np.full(8, 0.1), np.full(8, 0.2), np.full(8, 0.15), np.full(8, 50.0)]
        updates = full_updates(rows, pack_size=2)

        # Act
        outcome = aggregate_round("multikrum", updates, self.prev, self.part, AggregatorConfig(), byzantine_bound=1)

        # Assert
        assert outcome.retained == [0, 1, 2, 3]
        assert outcome.state.params[0] == pytest.approx(0.1125)

    def test_rfa_records_iterations(self):
        """Should note Weiszfeld convergence in the outcome."""
        updates = full_updates(np.random.default_rng(2).normal(size=(5, 8)), pack_size=2)
        outcome = aggregate_round("rfa", updates, self.prev, self.part, AggregatorConfig(rfa_max_iters=1000))
        assert outcome.notes["weiszfeld_converged"]

    @pytest.mark.parametrize("kind", [k.value for k in AggregatorKind])
    def test_every_kind_keeps_model_finite(self, kind):
        """Should produce a finite model of the right length for every aggregator."""
        rng = np.random.default_rng(3)
        updates = [
            SparseUpdate(i, SparseMask.from_indices(sorted(rng.choice(4, 2, replace=False)), 4), rng.normal(size=4), 1 + i)
            for i in range(7)
        ]
        outcome = aggregate_round(kind, updates, self.prev, self.part, AggregatorConfig(), byzantine_bound=1)
        assert outcome.state.params.shape == (8,)
        assert np.isfinite(outcome.state.params).all()

    def test_rejects_unknown_kind(self):
        """Should reject an aggregator name it does not know."""
        with pytest.raises(InvalidArgumentError):
            aggregate_round("bulyan", full_updates([np.zeros(8)], pack_size=2), self.prev, self.part, AggregatorConfig())

def test_krum_selection_is_exhaustive_optimum():
    """Should select the k lowest-scoring updates, as an exhaustive search over subsets would."""
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 3))
    scores = krum_scores(x, 1)
    best = min(itertools.combinations(range(6), 3), key=lambda c: sum(scores[list(c)]))
    expected = x[list(best)].mean(axis=0)
    np.testing.assert_allclose(multi_krum(x, 1, 3), expected, rtol=1e-12)


class TestOracleLoops:
    """Seeded comparisons against brute-force references, 200 instances each."""

    def test_median_matches_per_coordinate_sort(self):
        """Should take the middle value, or the mean of the two middle values, per coordinate."""
        rng = np.random.default_rng(41)
        for _ in range(200):
            x = rng.normal(size=(int(rng.integers(1, 16)), int(rng.integers(1, 9))))
            m = x.shape[0]
            s = np.sort(x, axis=0)
            expected = s[m // 2] if m % 2 else (s[m // 2 - 1] + s[m // 2]) / 2.0
            np.testing.assert_allclose(coord_median(x), expected, rtol=1e-15, atol=0)

    def test_trimmed_mean_removes_extreme_attackers(self):
        """Should return the benign mean when the attackers sit at both extremes."""
        rng = np.random.default_rng(42)
        for _ in range(200):
            # Arrange
            b, t, d = int(rng.integers(1, 13)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
            benign = rng.normal(size=(b, d))
            high = 1e6 + rng.random((t, d))
            low = -1e6 - rng.random((t, d))
            stacked = rng.permutation(np.vstack([benign, high, low]))
            pct = 100.0 * (t + 0.5) / (b + 2 * t)

            # Act
            result = trimmed_mean(stacked, pct)

            # Assert
            np.testing.assert_allclose(result, benign.mean(axis=0), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("count", ["classic", "extended"])
    def test_krum_scores_match_double_loop(self, count):
        """Should match a double-loop score on random instances."""
        rng = np.random.default_rng(43)
        drop = 2 if count == "classic" else 1
        for _ in range(200):
            m = int(rng.integers(4, 13))
            n = int(rng.integers(0, m - 2))
            x = rng.normal(size=(m, int(rng.integers(1, 6))))
            scores = krum_scores(x, n, count)
            for i in range(m):
                d2 = sorted(float(np.sum((x[i] - x[j]) ** 2)) for j in range(m) if j != i)
                assert scores[i] == pytest.approx(sum(d2[:m - n - drop]), rel=1e-12, abs=1e-12)

    def test_weiszfeld_beats_grid_search(self):
        """Should land within 1e-4 of the best weighted distance sum on a 2-D grid."""
        rng = np.random.default_rng(44)
        axis = np.linspace(0.0, 1.0, 201)
        gx, gy = np.meshgrid(axis, axis)
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        for _ in range(200):
            # Arrange
            pts = rng.random((int(rng.integers(3, 7)), 2))
            w = rng.uniform(0.5, 2.0, size=pts.shape[0])
            w = w / w.sum()
            cost = sum(wi * np.linalg.norm(grid - p, axis=1) for wi, p in zip(w, pts))

            # Act
            result = rfa_geomedian(pts, w, tol=1e-12, max_iters=5000)

            # Assert
            assert geomedian_objective(pts, w, result.point) <= cost.min() + 1e-4

    def test_merge_is_a_convex_combination(self):
        """Should keep shared values exactly and stay inside the contributor range per coordinate."""
        rng = np.random.default_rng(45)
        for _ in range(200):
            # Arrange
            P, s, m = int(rng.integers(1, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 9))
            part = partition_packs(P * s, s)
            prev = rng.normal(size=part.d)
            common = rng.normal(size=part.d)
            dense = rng.normal(size=(m, part.d))
            masks = [SparseMask(rng.random(P) < 0.6) for _ in range(m)]
            sizes = [int(rng.integers(1, 1000)) for _ in range(m)]
            shared = [SparseUpdate(i, masks[i], gather(common, masks[i], part), sizes[i]) for i in range(m)]
            varied = [SparseUpdate(i, masks[i], gather(dense[i], masks[i], part), sizes[i]) for i in range(m)]
            covered = part.expand(np.any([mk.bits for mk in masks], axis=0))

            # Act
            same, _ = merge_sparse(shared, range(m), prev, part)
            mixed, _ = merge_sparse(varied, range(m), prev, part)
            by_retained, _ = merge_sparse(varied, range(m), prev, part, "retained")

            # Assert
            np.testing.assert_array_equal(same[covered], common[covered])
            np.testing.assert_array_equal(same[~covered], prev[~covered])
            selected = np.stack([part.expand(mk.bits) for mk in masks])
            lo = np.where(selected, dense, np.inf).min(axis=0)
            hi = np.where(selected, dense, -np.inf).max(axis=0)
            assert np.all(mixed[covered] >= lo[covered] - 1e-12)
            assert np.all(mixed[covered] <= hi[covered] + 1e-12)
            np.testing.assert_allclose(mixed, by_retained, rtol=0, atol=1e-12)
