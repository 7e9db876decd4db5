import numpy as np
import pytest

from helpers import brute_nearest
from nerfcloud import extract, synth
from nerfcloud.extract import DirectionAverage, ExtractError, FixedDirection, PointCloud, SpatialHash


class FnField:
    """Minimal field wrapper: density from a function, color from a function of (x, d)."""

    def __init__(self, dens, color=None):
        self.dens = dens
        self.color = color or (lambda x, d: np.full(x.shape, 0.5))

    def density(self, x):
        return self.dens(np.asarray(x))

    def query(self, x, d):
        return self.density(x), self.color(np.asarray(x), np.asarray(d))


def cloud(pts):
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return PointCloud(pts, np.zeros((len(pts), 3), np.uint8))


def _sorted(p):
    return p[np.lexsort(p.T[::-1])]


class TestThreshold:
    def test_constant_field(self):
        bbox = ((-1, -1, -1), (1, 1, 1))
        g = extract.sample_density_grid(FnField(lambda x: np.full(len(x), 30.0)), bbox, 5)
        assert len(extract.threshold_filter(g, 15.0)) == 125
        g = extract.sample_density_grid(FnField(lambda x: np.full(len(x), 10.0)), bbox, 5)
        assert len(extract.threshold_filter(g, 15.0)) == 0

    def test_two_cube_corners(self):
        fld = FnField(lambda x: np.where(x[:, 0] > 0.5, 100.0, 0.0))
        g = extract.sample_density_grid(fld, ((0, 0, 0), (1, 1, 1)), 2)
        pts = extract.threshold_filter(g).positions
        np.testing.assert_array_equal(_sorted(pts), [[1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]])

    def test_sphere_matches_brute_force(self):
        scene = synth.sphere_scene(radius=0.5, density=30.0)
        g = extract.sample_density_grid(synth.AnalyticField(scene), ((-1, -1, -1), (1, 1, 1)), 64)
        got = extract.threshold_filter(g, 15.0).positions
        # independent enumeration of nodes inside the ball
        ax = -1 + 2 * np.arange(64) / 63
        want = np.array([(x, y, z) for z in ax for y in ax for x in ax if x * x + y * y + z * z <= 0.25])
        assert len(got) == len(want) > 0
        np.testing.assert_allclose(_sorted(got), _sorted(want), atol=1e-12)

    @pytest.mark.parametrize("delta", [10.0, 15.0, 20.0])
    def test_strict_inequality(self, delta):
        levels = np.array([10.0, 15.0, 20.0])
        fld = FnField(lambda x: levels[np.round(x[:, 0]).astype(int)])
        g = extract.sample_density_grid(fld, ((0, 0, 0), (2, 1, 1)), (3, 2, 2))
        c = extract.threshold_filter(g, delta)
        assert np.all(c.density > delta)
        assert len(c) == 4 * int(np.sum(levels > delta))

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(0)
        centers = rng.uniform(-1, 1, (5, 3))

        def dens(x):
            return 50 * np.exp(-((x[:, None, :] - centers) ** 2).sum(-1) / 0.1).sum(1)

        g = extract.sample_density_grid(FnField(dens), ((-1.5,) * 3, (1.5,) * 3), 24)
        prev = None
        for t in (0, 1, 5, 15, 30, 60):
            keys = {tuple(p) for p in extract.threshold_filter(g, t).positions}
            if prev is not None:
                assert keys <= prev
            prev = keys

    def test_errors(self):
        g = extract.sample_density_grid(FnField(lambda x: np.zeros(len(x))), ((0, 0, 0), (1, 1, 1)), 2)
        with pytest.raises(ExtractError):
            extract.threshold_filter(g, -1.0)
        with pytest.raises(ExtractError):
            extract.sample_density_grid(FnField(lambda x: x[:, 0]), ((0, 0, 0), (1, 1, 1)), 1)
        with pytest.raises(ExtractError):
            extract.sample_density_grid(FnField(lambda x: x[:, 0]), ((0, 0, 0), (0, 1, 1)), 4)


class TestColorize:
    # red seen from above, green from below
    FIELD = FnField(lambda x: np.full(len(x), 100.0),
                    lambda x, d: np.where(d[:, 2:3] > 0, [1.0, 0, 0], [0, 1.0, 0]) * np.ones_like(x))

    def test_fixed_direction(self):
        c = extract.colorize(self.FIELD, cloud([[0, 0, 0], [1, 2, 3]]), FixedDirection((0, 0, -1)))
        np.testing.assert_array_equal(c.colors, [[0, 255, 0]] * 2)

    def test_direction_average(self):
        c = extract.colorize(self.FIELD, cloud([[0, 0, 0]]), DirectionAverage(6))
        # even count of spread directions: half above, half below
        np.testing.assert_array_equal(c.colors, [[128, 128, 0]])

    def test_fibonacci_unit(self):
        d = extract.fibonacci_directions(50)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
        assert abs(d.mean(axis=0)).max() < 0.05

    def test_quantize(self):
        np.testing.assert_array_equal(extract.quantize_colors(np.array([0.0, 1.0, 2.0, -1.0, 0.5])),
                                      [0, 255, 255, 0, 128])


class TestNearest:
    def test_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            dst = rng.normal(size=(int(rng.integers(1, 400)), 3)) * rng.uniform(0.1, 3)
            src = rng.normal(size=(200, 3)) * rng.uniform(0.1, 10)
            cell = float(rng.uniform(0.01, 1.0))
            np.testing.assert_allclose(SpatialHash(dst, cell).nearest(src), brute_nearest(src, dst), atol=1e-12)

    def test_stats_identity(self):
        pts = np.random.default_rng(2).uniform(-1, 1, (300, 3))
        s = extract.cloud_stats(cloud(pts), cloud(pts), 0.01)
        assert s.completeness == 1.0 and s.artifact_fraction == 0.0 and s.chamfer == 0.0

    def test_one_outlier(self):
        pts = np.random.default_rng(3).uniform(-1, 1, (99, 3))
        s = extract.cloud_stats(cloud(np.vstack([pts, [[10, 10, 10]]])), cloud(pts), 0.05)
        assert s.artifact_fraction == pytest.approx(1 / 100)
        assert s.completeness == 1.0

    def test_empty_inputs(self):
        with pytest.raises(ExtractError):
            extract.cloud_stats(cloud(np.zeros((0, 3))), cloud([[0, 0, 0]]), 0.1)
        with pytest.raises(ExtractError):
            extract.cloud_stats(cloud([[0, 0, 0]]), cloud(np.zeros((0, 3))), 0.1)
