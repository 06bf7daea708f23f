import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fect.imaging import (NetpbmError, connected_components, crop_patch, parse_netpbm, read_image, read_mask,
                          sample_contour_uniform, serialize_netpbm, to_gray, trace_contour, write_image)
from oracles import flood_fill_labels, same_partition

pixels = st.one_of(
    arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))),
    arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))),
)


@given(pixels)
def test_netpbm_roundtrip(img):
    assert np.array_equal(parse_netpbm(serialize_netpbm(img)), img)


def test_netpbm_header_with_comments():
    data = b"P5\n# made by hand\n3 # width\n1\n255\n\x00\x80\xff"
    assert parse_netpbm(data).tolist() == [[0, 128, 255]]


def test_netpbm_p6_layout():
    data = b"P6 2 1 255\n" + bytes([1, 2, 3, 4, 5, 6])
    assert parse_netpbm(data).tolist() == [[[1, 2, 3], [4, 5, 6]]]


@pytest.mark.parametrize("data, fragment", [
    (b"P3\n1 1\n255\n0", "magic"),
    (b"P5\n2 2\n255\n\x00\x00\x00", "offset"),
    (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
    (b"P5\n1", "offset"),
])
def test_netpbm_rejects(data, fragment):
    with pytest.raises(NetpbmError, match=fragment):
        parse_netpbm(data)


def test_file_roundtrip_and_mask(tmp_path):
    img = np.array([[0, 5], [200, 0]], dtype=np.uint8)
    write_image(tmp_path / "m.pgm", img)
    assert np.array_equal(read_image(tmp_path / "m.pgm"), img)
    assert read_mask(tmp_path / "m.pgm").tolist() == [[False, True], [True, False]]


def test_to_gray_passthrough_and_rgb():
    g = np.full((2, 2), 7, dtype=np.uint8)
    assert np.array_equal(to_gray(g), g)
    rgb = np.zeros((1, 1, 3), dtype=np.uint8) + 90
    assert to_gray(rgb)[0, 0] == pytest.approx(90, abs=1)


@given(arrays(np.bool_, st.tuples(st.integers(1, 14), st.integers(1, 14))), st.sampled_from([4, 8]))
def test_ccl_matches_flood_fill(mask, conn):
    labels, count = connected_components(mask, conn)
    ref, ref_count = flood_fill_labels(mask, conn)
    assert count == ref_count
    assert same_partition(labels, ref)


def test_ccl_diagonal_connectivity():
    mask = np.eye(3, dtype=bool)
    assert connected_components(mask, 8)[1] == 1
    assert connected_components(mask, 4)[1] == 3


def test_trace_square_clockwise():
    mask = np.zeros((5, 5), bool)
    mask[1:4, 1:4] = True
    c = trace_contour(mask)
    assert c.points == ((1, 1), (1, 2), (1, 3), (2, 3), (3, 3), (3, 2), (3, 1), (2, 1))
    assert c.perimeter == 8


def test_trace_single_pixel_and_empty():
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    c = trace_contour(mask)
    assert c.points == ((1, 1),) and c.perimeter == 0
    with pytest.raises(ValueError):
        trace_contour(np.zeros((3, 3), bool))


def test_trace_touching_border():
    c = trace_contour(np.ones((2, 3), bool))
    assert c.points[0] == (0, 0) and len(c) == 6


@st.composite
def blobs(draw):
    """Filled discs and rectangles, connected by construction."""
    h, w = draw(st.integers(8, 40)), draw(st.integers(8, 40))
    mask = np.zeros((h, w), bool)
    rr, cc = np.mgrid[:h, :w]
    if draw(st.booleans()):
        r = draw(st.integers(2, min(h, w) // 2))
        cy, cx = draw(st.integers(r, h - r)), draw(st.integers(r, w - r))
        mask |= (rr - cy) ** 2 + (cc - cx) ** 2 <= r * r
    else:
        r0, c0 = draw(st.integers(0, h - 3)), draw(st.integers(0, w - 3))
        mask[r0:draw(st.integers(r0 + 2, h)), c0:draw(st.integers(c0 + 2, w))] = True
    return mask


@given(blobs())
def test_contour_is_closed_boundary_walk(mask):
    c = trace_contour(mask)
    pts = c.as_array()
    steps = np.abs(np.diff(np.vstack([pts, pts[:1]]), axis=0))
    assert steps.max() <= 1
    assert all(mask[r, c_] for r, c_ in c.points)
    # every traced pixel is on the boundary
    padded = np.pad(mask, 1)
    for r, c_ in c.points:
        assert not padded[r:r + 3, c_:c_ + 3].all()


@given(blobs(), st.sampled_from([4.0, 8.0, 16.0]))
def test_sampling_arc_gaps_uniform(mask, spacing):
    c = trace_contour(mask)
    picks = sample_contour_uniform(c, spacing, min_points=2, max_points=64)
    pts = c.as_array().astype(float)
    steps = np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)
    arc = np.concatenate([[0.0], np.cumsum(steps)])[:-1]
    index = {}
    for i, p in enumerate(c.points):
        index.setdefault(p, i)
    s = np.array([arc[index[p]] for p in picks])
    if len(s) < 2:
        return
    gaps = np.diff(np.concatenate([s, [s[0] + c.perimeter]]))
    assert np.all(np.abs(gaps - c.perimeter / len(s)) <= 2.0)


def test_sampling_square_midpoints():
    mask = np.zeros((13, 13), bool)
    mask[1:12, 1:12] = True
    c = trace_contour(mask)
    assert c.perimeter == 40
    assert sample_contour_uniform(c, 10, min_points=1) == [(1, 6), (6, 11), (11, 6), (6, 1)]


def test_sampling_count_clamped():
    mask = np.zeros((13, 13), bool)
    mask[1:12, 1:12] = True
    c = trace_contour(mask)
    assert len(sample_contour_uniform(c, 10)) == 8
    assert len(sample_contour_uniform(c, 1, max_points=12)) == 12


def test_crop_interior_and_padding():
    img = np.arange(25, dtype=np.uint8).reshape(5, 5)
    assert np.array_equal(crop_patch(img, (2, 2), 3), img[1:4, 1:4])
    corner = crop_patch(img, (0, 0), 4)
    assert corner.shape == (4, 4)
    assert not corner[:2].any() and not corner[:, :2].any()
    assert np.array_equal(corner[2:, 2:], img[:2, :2])
    assert not crop_patch(img, (40, 40), 3).any()
