import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scopenet.geometry import (
    BorderDistances,
    Box,
    GeometryError,
    Point,
    box_to_distances,
    distances_to_box,
    iou,
    iou_matrix,
    location_points,
)


def test_center_point_distances():
    assert box_to_distances(Point(5, 5), Box(0, 0, 10, 10)) == (5, 5, 5, 5)


def test_offset_point_distances():
    assert box_to_distances(Point(2, 3), Box(0, 0, 10, 10)) == (2, 3, 8, 7)


def test_point_outside_box_rejected():
    with pytest.raises(GeometryError):
        box_to_distances(Point(11, 5), Box(0, 0, 10, 10))
    with pytest.raises(GeometryError):
        box_to_distances(Point(0, 5), Box(0, 0, 10, 10))  # on the edge is not inside


def test_distances_to_box():
    assert distances_to_box(BorderDistances(5, 5, 5, 5), Point(5, 5)) == Box(0, 0, 10, 10)


def test_degenerate_width_rejected():
    with pytest.raises(GeometryError, match="width"):
        distances_to_box(BorderDistances(0, 0, 0, 4), Point(1, 1))


def test_round_trip_100_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x1, y1 = rng.uniform(-50, 50, 2)
        w, h = rng.uniform(0.5, 80, 2)
        b = Box(x1, y1, x1 + w, y1 + h)
        p = Point(rng.uniform(x1, x1 + w), rng.uniform(y1, y1 + h))
        if not (b.x1 < p.x < b.x2 and b.y1 < p.y < b.y2):
            continue
        back = distances_to_box(box_to_distances(p, b), p)
        np.testing.assert_allclose(back.as_tuple(), b.as_tuple(), rtol=0, atol=1e-12)


def test_round_trip_is_exact_on_dyadic_values():
    rng = np.random.default_rng(1)
    for _ in range(200):
        x1, y1 = rng.integers(-64, 64, 2) / 4
        w, h = rng.integers(2, 256, 2) / 4
        b = Box(x1, y1, x1 + w, y1 + h)
        p = Point(x1 + rng.integers(1, int(w * 4)) / 4, y1 + rng.integers(1, int(h * 4)) / 4)
        assert distances_to_box(box_to_distances(p, b), p) == b


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou(a, Box(2, 0, 4, 2)) == 0.0  # touching edges


boxes = st.tuples(
    st.floats(-100, 100), st.floats(-100, 100), st.floats(0.1, 100), st.floats(0.1, 100)
).map(lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 10))
def test_iou_properties(a, b, dx, dy, s):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    moved = iou(Box(a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy), Box(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy))
    assert moved == pytest.approx(v, abs=1e-9)
    scaled = iou(Box(a.x1 * s, a.y1 * s, a.x2 * s, a.y2 * s), Box(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s))
    assert scaled == pytest.approx(v, abs=1e-9)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 50, size=(7, 2))
    wh = rng.uniform(1, 30, size=(7, 2))
    arr = np.concatenate([xy, xy + wh], axis=1)
    m = iou_matrix(arr, arr[:4])
    for i in range(7):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(Box(*arr[i]), Box(*arr[j])))


def test_invalid_box():
    with pytest.raises(GeometryError):
        Box(1, 0, 1, 5)


def test_location_points_cell_centers():
    pts = location_points(3, 2, 3)
    np.testing.assert_array_equal(pts, [[4, 4], [12, 4], [20, 4], [4, 12], [12, 12], [20, 12]])
