import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gesta.errors import InvalidStreamlineError
from gesta.geometry import (
    Tractogram,
    as_streamline,
    length,
    local_orientations,
    longest_true_run,
    resample,
    trim_to_mask,
    winding,
)

from .conftest import box_grid


def circle(r, turn, n, z=0.0):
    t = np.linspace(0, turn, n)
    return np.stack([r * np.cos(t), r * np.sin(t), np.full(n, z)], axis=1)


def polylines(min_n=2, max_n=40):
    coords = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
    return st.integers(min_n, max_n).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def test_length_of_unit_steps():
    s = np.array([[0, 0, 0], [3, 4, 0], [3, 4, 12]], float)
    assert length(s) == 17.0


def test_semicircle_length_close_to_pi_r():
    s = circle(40.0, math.pi, 4001)
    assert abs(length(s) - math.pi * 40) / (math.pi * 40) < 1e-3


def test_winding_of_right_angle():
    s = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0]], float)
    assert winding(s) == pytest.approx(90.0)


def test_winding_full_circle():
    assert abs(winding(circle(10.0, 2 * math.pi, 721)) - 360.0) < 1.0


def test_winding_straight_line_is_zero():
    s = np.outer(np.linspace(0, 1, 50), [2.0, -1.0, 0.5])
    assert winding(s) == 0.0


def test_winding_ignores_duplicate_vertices():
    s = np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0], [1, 1, 0]], float)
    assert winding(s) == pytest.approx(90.0)


def test_winding_is_unsigned():
    zigzag = np.array([[0, 0, 0], [1, 0, 0], [2, 1, 0], [3, 0, 0]], float)
    # +45, -90 -> 45 + 90
    assert winding(zigzag) == pytest.approx(135.0)


def test_local_orientations_marks_zero_segments():
    s = np.array([[0, 0, 0], [0, 0, 0], [0, 2, 0]], float)
    o = local_orientations(s)
    assert np.isnan(o[0]).all()
    np.testing.assert_allclose(o[1], [0, 1, 0])


def test_resample_endpoints_and_count():
    s = circle(5.0, 1.0, 17)
    r = resample(s, 256)
    assert r.shape == (256, 3)
    np.testing.assert_array_equal(r[0], s[0])
    np.testing.assert_array_equal(r[-1], s[-1])


def test_resample_preserves_polyline_length():
    s = np.array([[0, 0, 0], [10, 0, 0], [10, 5, 0]], float)
    r = resample(s, 31)
    # 31 points at spacing 0.5 hit the corner exactly
    assert length(r) == pytest.approx(15.0)
    assert np.any(np.all(np.isclose(r, [10, 0, 0]), axis=1))


def test_resample_rejects_bad_input():
    with pytest.raises(InvalidStreamlineError):
        resample(np.zeros((5, 3)))
    with pytest.raises(InvalidStreamlineError):
        resample(np.zeros((1, 3)))
    with pytest.raises(InvalidStreamlineError):
        as_streamline(np.zeros((4, 2)))
    with pytest.raises(InvalidStreamlineError):
        as_streamline([[0, 0, np.nan], [1, 1, 1]])
    with pytest.raises(ValueError):
        resample(np.eye(3), 1)


@given(
    st.lists(st.floats(1e-3, 50), min_size=1, max_size=40),
    arrays(np.float64, 3, elements=st.floats(-1, 1)),
)
def test_resample_equidistant_on_straight_lines(steps, direction):
    if np.linalg.norm(direction) < 1e-3:
        return
    u = direction / np.linalg.norm(direction)
    s = np.outer(np.concatenate([[0.0], np.cumsum(steps)]), u)
    seg = np.linalg.norm(np.diff(resample(s, 64), axis=0), axis=1)
    assert (seg.max() - seg.min()) / seg.mean() < 1e-6


@given(polylines(min_n=3))
def test_resample_vertices_lie_on_input(s):
    if length(s) < 1e-3:
        return
    r = resample(s, 20)
    # each resampled vertex sits on some input segment
    a, b = s[:-1], s[1:]
    for p in r:
        d = b - a
        dd = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / np.where(dd > 0, dd, 1), 0, 1)
        dist = np.linalg.norm(a + t[:, None] * d - p, axis=1)
        assert dist.min() < 1e-6 * (1 + np.abs(s).max())


@given(polylines())
def test_length_invariant_under_reversal(s):
    assert length(s[::-1]) == pytest.approx(length(s), rel=1e-12, abs=1e-9)
    assert winding(s[::-1]) == pytest.approx(winding(s), rel=1e-9, abs=1e-6)


@given(polylines(), st.floats(-50, 50), st.floats(-50, 50))
def test_length_invariant_under_translation(s, dx, dy):
    moved = s + np.array([dx, dy, 0.0])
    assert length(moved) == pytest.approx(length(s), rel=1e-9, abs=1e-6)


def test_longest_true_run():
    assert longest_true_run(np.array([0, 1, 1, 0, 1, 1, 1, 0], bool)) == (4, 7)
    assert longest_true_run(np.array([1, 1, 0, 1, 1], bool)) == (0, 2)
    assert longest_true_run(np.zeros(4, bool)) == (0, 0)


def test_trim_keeps_longest_inside_run():
    grid = box_grid((10, 10, 10))
    grid.data[:, :, :] = False
    grid.data[2:8, 5, 5] = True
    s = np.array([[x, 5, 5] for x in range(10)], float)
    np.testing.assert_array_equal(trim_to_mask(s, grid), s[2:8])
    assert trim_to_mask(np.array([[0, 0, 0], [0, 1, 0]], float), grid) is None


def test_tractogram_bundles_and_concat():
    s = [np.eye(3) * i for i in range(1, 5)]
    t = Tractogram(s, np.array([1, 2, 1, 2]))
    assert t.bundle_ids() == [1, 2]
    assert len(t.bundle(1)) == 2
    both = Tractogram.concatenate([t.bundle(2), t.bundle(1)])
    np.testing.assert_array_equal(both.labels, [2, 2, 1, 1])
