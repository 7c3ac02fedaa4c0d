"""Unit tests for the grid keypoint math."""
import numpy as np
import pytest

from gridkp.grid import (
    GridSpec,
    condensation_statistic,
    from_binary_maps,
    from_probability_maps,
    render_gaussian_maps,
    snap_to_grid,
    spatial_expectation,
    to_binary_maps,
)


def brute_force_snap(xy, grid):
    """Oracle: exhaustive argmin over every cell center, lexicographic ties."""
    best = None
    best_d = np.inf
    for i in range(grid.height):
        for j in range(grid.width):
            cx = (j + 0.5) / grid.width
            cy = (i + 0.5) / grid.height
            d = (cx - xy[0]) ** 2 + (cy - xy[1]) ** 2
            # strict < keeps the first (smallest (row, col)) among ties
            if d < best_d - 1e-15:
                best_d = d
                best = (j, i)
    return best


class TestSpatialExpectation:
    def test_one_hot_channel(self):
        grid = GridSpec(8, 8, 1)
        h = np.zeros((1, 8, 8))
        h[0, 3, 5] = 1.0
        coords = spatial_expectation(h, grid)
        assert np.allclose(coords[0], [0.6875, 0.4375])

    def test_uniform_channel(self):
        for hh, ww in [(4, 4), (5, 9), (16, 16)]:
            h = np.full((1, hh, ww), 0.5)
            coords = spatial_expectation(h)
            assert np.allclose(coords[0], [0.5, 0.5])

    def test_hand_computed_weighted_mean(self):
        h = np.array([[[1.0, 3.0], [0.0, 0.0]]])
        coords = spatial_expectation(h, GridSpec(2, 2, 1))
        assert np.allclose(coords[0], [0.625, 0.25])

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        grid = GridSpec(7, 11, 3)
        h = rng.uniform(0.01, 0.99, size=(3, 7, 11))
        coords = spatial_expectation(h, grid)
        for k in range(3):
            ex = ey = 0.0
            for i in range(7):
                for j in range(11):
                    wgt = h[k, i, j] / h[k].sum()
                    ex += wgt * (j + 0.5) / 11
                    ey += wgt * (i + 0.5) / 7
            assert np.allclose(coords[k], [ex, ey])

    def test_zero_mass_rejected(self):
        with pytest.raises(ValueError):
            spatial_expectation(np.zeros((1, 4, 4)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            spatial_expectation(np.full((2, 4, 4), 0.5), GridSpec(4, 4, 3))


class TestSnapToGrid:
    def test_fixed_point_at_cell_center(self):
        grid = GridSpec(8, 8, 1)
        xy = np.array([[2.5 / 8, 5.5 / 8]])
        kps, snapped = snap_to_grid(xy, grid)
        assert kps.tolist() == [[2, 5]]
        assert np.allclose(snapped, xy)

    def test_64_grid_example(self):
        grid = GridSpec(64, 64, 1)
        kps, snapped = snap_to_grid(np.array([[0.507, 0.261]]), grid)
        assert kps.tolist() == [[32, 16]]
        assert np.allclose(snapped, [[0.5078125, 0.2578125]])
        assert brute_force_snap((0.507, 0.261), grid) == (32, 16)

    def test_midpoint_tie_breaks_low(self):
        grid = GridSpec(4, 4, 1)
        # x = 0.5 is exactly between columns 1 and 2; same for y / rows
        kps, _ = snap_to_grid(np.array([[0.5, 0.5]]), grid)
        assert kps.tolist() == [[1, 1]]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for grid in [GridSpec(5, 3, 1), GridSpec(16, 16, 1), GridSpec(9, 30, 1)]:
            pts = rng.uniform(0, 1, size=(50, 2))
            kps, _ = snap_to_grid(pts, grid)
            for p, kp in zip(pts, kps):
                assert tuple(kp) == brute_force_snap(p, grid)

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        grid = GridSpec(13, 7, 1)
        pts = rng.uniform(0, 1, size=(100, 2))
        _, once = snap_to_grid(pts, grid)
        _, twice = snap_to_grid(once, grid)
        assert np.array_equal(once, twice)

    def test_proximity_bound(self):
        rng = np.random.default_rng(3)
        grid = GridSpec(12, 5, 1)
        pts = rng.uniform(0, 1, size=(200, 2))
        _, snapped = snap_to_grid(pts, grid)
        assert np.all(np.abs(snapped[:, 0] - pts[:, 0]) <= 0.5 / grid.width + 1e-12)
        assert np.all(np.abs(snapped[:, 1] - pts[:, 1]) <= 0.5 / grid.height + 1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            snap_to_grid(np.array([[1.2, 0.5]]), GridSpec(4, 4, 1))


class TestGaussianMaps:
    def test_peak_is_one_at_keypoint(self):
        grid = GridSpec(5, 5, 1)
        maps = render_gaussian_maps(np.array([[2, 2]]), grid, sigma=1.0)
        assert maps[0, 2, 2] == 1.0
        assert np.isclose(maps[0, 2, 3], np.exp(-0.5))

    def test_tiny_sigma_approximates_binary(self):
        grid = GridSpec(6, 6, 1)
        kps = np.array([[4, 1]])
        maps = render_gaussian_maps(kps, grid, sigma=0.1)
        binary = to_binary_maps(kps, grid).astype(np.float64)
        off_peak = maps[binary == 0]
        assert np.all(off_peak < 1e-6)

    def test_half_width(self):
        grid = GridSpec(9, 9, 1)
        sigma = 1.5
        maps = render_gaussian_maps(np.array([[2, 4]]), grid, sigma)
        # continuous value at distance sigma*sqrt(2 ln 2) is exactly 0.5
        d = sigma * np.sqrt(2 * np.log(2))
        val = np.exp(-d * d / (2 * sigma * sigma))
        assert np.isclose(val, 0.5)

    def test_expectation_recovers_interior_keypoint(self):
        grid = GridSpec(16, 16, 1)
        kps = np.array([[7, 9]])
        maps = render_gaussian_maps(kps, grid, sigma=0.5)
        coords = spatial_expectation(maps, grid)
        center = grid.centers_from_grid(kps)
        # deviation < 0.25 cells in normalized units
        assert abs(coords[0, 0] - center[0, 0]) < 0.25 / 16
        assert abs(coords[0, 1] - center[0, 1]) < 0.25 / 16


class TestBinaryMaps:
    def test_single_keypoint_2x2(self):
        maps = to_binary_maps(np.array([[0, 0]]), GridSpec(2, 2, 1))
        assert maps.tolist() == [[[1, 0], [0, 0]]]

    def test_roundtrip(self):
        rng = np.random.default_rng(4)
        grid = GridSpec(10, 6, 4)
        for _ in range(20):
            kps = np.stack(
                [rng.integers(0, grid.width, 4), rng.integers(0, grid.height, 4)], axis=1
            )
            assert np.array_equal(from_binary_maps(to_binary_maps(kps, grid)), kps)

    def test_shared_cell_allowed(self):
        grid = GridSpec(4, 4, 2)
        kps = np.array([[1, 2], [1, 2]])
        maps = to_binary_maps(kps, grid)
        assert maps[0, 2, 1] == 1 and maps[1, 2, 1] == 1
        assert maps.sum() == 2


class TestProbabilityMaps:
    def test_one_hot_identity(self):
        grid = GridSpec(5, 5, 2)
        kps = np.array([[3, 1], [0, 4]])
        probs = to_binary_maps(kps, grid).astype(np.float64)
        out, binary = from_probability_maps(probs, grid)
        assert np.array_equal(out, kps)
        assert np.array_equal(binary, to_binary_maps(kps, grid))

    def test_uniform_ties_to_origin(self):
        grid = GridSpec(4, 8, 1)
        probs = np.full((1, 4, 8), 1.0 / 32)
        kps, _ = from_probability_maps(probs, grid)
        assert kps.tolist() == [[0, 0]]

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(5)
        grid = GridSpec(16, 16, 3)
        raw = rng.uniform(0.1, 1.0, size=(3, 16, 16))
        probs = raw / raw.sum(axis=(1, 2), keepdims=True)
        kps, _ = from_probability_maps(probs, grid)
        for k in range(3):
            best = (np.inf, None)
            best_v = -np.inf
            for i in range(16):
                for j in range(16):
                    if probs[k, i, j] > best_v:
                        best_v = probs[k, i, j]
                        best = (j, i)
            assert tuple(kps[k]) == best

    def test_peaked_channel(self):
        grid = GridSpec(16, 16, 1)
        probs = np.full((1, 16, 16), 0.6 / 255)
        probs[0, 3, 7] = 0.4
        kps, _ = from_probability_maps(probs, grid)
        assert kps.tolist() == [[7, 3]]

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            from_probability_maps(np.full((1, 4, 4), 0.5), GridSpec(4, 4, 1))


class TestCondensation:
    def test_uniform_is_exactly_zero(self):
        h = np.full((3, 8, 8), 0.37)
        assert condensation_statistic(h) == 0.0
        assert condensation_statistic(h, worst_only=True) == 0.0

    def test_one_hot_limit(self):
        h = np.zeros((1, 4, 4))
        h[0, 1, 2] = 1.0
        assert np.isclose(condensation_statistic(h), -(1 - 1 / 16))

    def test_two_channel_sum_mode(self):
        h = np.array(
            [[[0.9, 0.1], [0.1, 0.1]], [[0.5, 0.5], [0.5, 0.5]]]
        )
        assert np.isclose(condensation_statistic(h), -0.6)

    def test_worst_only_picks_smallest_gap(self):
        h = np.array(
            [[[0.9, 0.1], [0.1, 0.1]], [[0.6, 0.4], [0.5, 0.5]]]
        )
        # gaps: 0.6 and 0.1; worst-only keeps 0.1
        assert np.isclose(condensation_statistic(h, worst_only=True), -0.1)

    def test_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            k, hh, ww = rng.integers(1, 5), rng.integers(2, 9), rng.integers(2, 9)
            h = rng.uniform(0, 1, size=(k, hh, ww))
            v = condensation_statistic(h)
            assert -k * (1 - 1 / (hh * ww)) - 1e-12 <= v <= 0.0


class TestGridSpec:
    def test_invalid_specs_rejected(self):
        for h, w, k in [(1, 4, 1), (4, 1, 1), (4, 4, 0)]:
            with pytest.raises(ValueError):
                GridSpec(h, w, k)

    def test_cell_centers(self):
        grid = GridSpec(4, 2, 1)
        assert np.allclose(grid.cell_centers_x(), [0.25, 0.75])
        assert np.allclose(grid.cell_centers_y(), [0.125, 0.375, 0.625, 0.875])
