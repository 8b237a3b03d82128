import math

import numpy as np
import pytest
from scipy import stats

from cpgan import groundedfakes as gf


@pytest.fixture(scope="module")
def specs():
    rng = np.random.default_rng(11)
    return [gf._sample_polygon(rng) for _ in range(20_000)]


def test_center_uniform(specs):
    c = np.array([s.center for s in specs])
    for axis in range(2):
        assert stats.kstest(c[:, axis], stats.uniform(0.1, 0.8).cdf).pvalue > 0.01


def test_vertex_count_uniform(specs):
    counts = np.bincount([len(s.vertices) for s in specs], minlength=7)[4:]
    assert stats.chisquare(counts).pvalue > 0.01


def test_radius_and_angle_uniform(specs):
    r = np.array([v[0] for s in specs for v in s.vertices])
    a = np.array([v[1] for s in specs for v in s.vertices])
    assert stats.kstest(r, stats.uniform(0.1, 0.4).cdf).pvalue > 0.01
    assert stats.kstest(a, stats.uniform(0, 2 * math.pi).cdf).pvalue > 0.01


def test_points_sorted_by_angle():
    spec = gf.sample_polygon(3)
    pts = spec.points()
    ang = np.arctan2(pts[:, 1] - spec.center[1], pts[:, 0] - spec.center[0]) % (2 * math.pi)
    assert np.all(np.diff(ang) > 0)


def test_square_rasterization():
    # axis-aligned square covering the middle half of an 8x8 image
    r = math.sqrt(2) * 0.25
    spec = gf.PolygonSpec(center=(0.5, 0.5), vertices=tuple((r, a) for a in (math.pi / 4 + k * math.pi / 2 for k in range(4))))
    m = gf.rasterize_polygon(spec, 8, 8)
    expect = np.zeros((8, 8))
    expect[2:6, 2:6] = 1
    np.testing.assert_array_equal(m, expect)


def test_rasterization_orientation():
    # a triangle-ish quad pushed to the right: x is the column axis
    spec = gf.PolygonSpec(center=(0.75, 0.5), vertices=tuple((0.15, k * math.pi / 2) for k in range(4)))
    m = gf.rasterize_polygon(spec, 10, 20)
    cols = np.nonzero(m.any(0))[0]
    assert cols.min() >= 10


def test_even_odd_matches_winding_number():
    # winding-number oracle for convex-or-not simple polygons sampled from the generator
    rng = np.random.default_rng(5)
    for _ in range(30):
        spec = gf._sample_polygon(rng)
        poly = spec.points()
        m = gf.rasterize_polygon(spec, 16, 16)
        for y in range(16):
            for x in range(16):
                px, py = (x + 0.5) / 16, (y + 0.5) / 16
                wn = 0.0
                for i in range(len(poly)):
                    a = np.arctan2(poly[i][1] - py, poly[i][0] - px)
                    b = np.arctan2(poly[(i + 1) % len(poly)][1] - py, poly[(i + 1) % len(poly)][0] - px)
                    wn += (b - a + math.pi) % (2 * math.pi) - math.pi
                # angle-sorted star polygons are simple, so |winding| is 0 or 1
                assert m[y, x] == (abs(wn) > math.pi)


def test_grounded_fake_composite():
    rng = np.random.default_rng(0)
    src, dst = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    img, mask = gf.make_grounded_fake(src, dst, 4)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    np.testing.assert_array_equal(img[mask == 1], src[mask == 1])
    np.testing.assert_array_equal(img[mask == 0], dst[mask == 0])
    img2, mask2 = gf.make_grounded_fake(src, dst, 4)
    np.testing.assert_array_equal(mask, mask2)


def test_mean_coverage_is_plausible():
    masks = gf.sample_polygon_masks(np.random.default_rng(1), 500, 32, 32)
    cov = masks.mean()
    assert 0.05 < cov < 0.5
    assert masks.reshape(500, -1).sum(1).min() >= 0
