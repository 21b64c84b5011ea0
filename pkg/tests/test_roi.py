import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidrefine import checks, roi
from reidrefine.numgrid import as_grid, central_diff, make_rng, max_rel_error

coord = st.floats(-50, 250, allow_nan=False)
size = st.floats(2.5, 120.0)


def test_bbox_validation():
    with pytest.raises(roi.DegenerateBoxError):
        roi.BBox(0, 0, 1, 10)
    with pytest.raises(roi.DegenerateBoxError):
        roi.BBox(0, 0, np.inf, 10)


def test_target_grid_examples():
    g = roi.make_target_grid(2, 2)
    assert sorted(map(tuple, g.points.tolist())) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    assert (0.0, 0.0) in set(map(tuple, roi.make_target_grid(3, 3).points.tolist()))
    assert roi.make_target_grid(2, 3).xt[0].tolist() == [-1.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        roi.make_target_grid(1, 4)


def test_map_grid_center_and_full_image():
    A = roi.affine_from_box(roi.BBox(10, 20, 30, 40))
    one = roi.TargetGrid(1, 1, np.zeros((1, 1)), np.zeros((1, 1)))
    s = roi.map_grid(A, one)
    assert (s.xs[0, 0], s.ys[0, 0]) == (20.0, 30.0)
    s = roi.map_grid(roi.affine_from_box(roi.BBox(0, 0, 31, 63)), roi.make_target_grid(64, 32))
    assert (s.xs.min(), s.xs.max(), s.ys.min(), s.ys.max()) == (0.0, 31.0, 0.0, 63.0)


@settings(max_examples=200)
@given(m1=coord, n1=coord, w=size, h=size, xt=st.floats(-1, 1), yt=st.floats(-1, 1))
def test_map_grid_matches_matrix_vector_product(m1, n1, w, h, xt, yt):
    b = roi.BBox(m1, n1, m1 + w, n1 + h)
    # hand-written 2x3 product
    a11, a13 = (b.m2 - b.m1) / 2, (b.m2 + b.m1) / 2
    a22, a23 = (b.n2 - b.n1) / 2, (b.n2 + b.n1) / 2
    s = roi.map_grid(roi.affine_from_box(b), roi.TargetGrid(1, 1, np.array([[xt]]), np.array([[yt]])))
    assert s.xs[0, 0] == pytest.approx(a11 * xt + a13, abs=1e-9)
    assert s.ys[0, 0] == pytest.approx(a22 * yt + a23, abs=1e-9)


def _sample(U, x, y):
    t = roi.TargetGrid(1, 1, np.zeros((1, 1)), np.zeros((1, 1)))
    s = roi.SourceGrid(np.array([[x]], float), np.array([[y]], float), t)
    return roi.sample_crop(as_grid(U), s).V[0, 0, 0]


def test_bilinear_examples():
    U = [[0.0, 1.0], [2.0, 3.0]]
    assert _sample(U, 0.5, 0.5) == 1.5
    assert _sample(U, 1.0, 0.0) == 1.0
    assert _sample(U, -2.0, -2.0) == 0.0


def test_sample_crop_shape_mismatch():
    s = roi.map_grid(roi.affine_from_box(roi.BBox(0, 0, 5, 5)), roi.make_target_grid(4, 4))
    with pytest.raises(ValueError):
        roi.sample_crop(np.zeros((8, 8, 3)), s, 5, 5)


@settings(max_examples=200)
@given(m1=coord, n1=coord, w=size, h=size)
def test_corner_exactness(m1, n1, w, h):
    b = roi.BBox(m1, n1, m1 + w, n1 + h)
    s = roi.map_grid(roi.affine_from_box(b), roi.make_target_grid(64, 32))
    corners = [(s.xs[0, 0], s.ys[0, 0]), (s.xs[0, -1], s.ys[0, -1]),
               (s.xs[-1, 0], s.ys[-1, 0]), (s.xs[-1, -1], s.ys[-1, -1])]
    expect = [(b.m1, b.n1), (b.m2, b.n1), (b.m1, b.n2), (b.m2, b.n2)]
    assert np.allclose(corners, expect, rtol=0, atol=1e-12)


def test_constant_image_has_zero_box_gradient():
    res = roi.crop(np.full((40, 40, 3), 0.7), roi.BBox(5.3, 4.1, 20.2, 33.9), 16, 8)
    _, db = roi.crop_backward(res, make_rng(0).normal(size=res.V.shape))
    assert np.all(db == 0.0)


def test_zero_upstream_gives_zero_gradients():
    U = make_rng(1).uniform(size=(30, 30, 3))
    res = roi.crop(U, roi.BBox(2.2, 3.3, 20.1, 25.7), 8, 4)
    dU, db = roi.crop_backward(res, np.zeros_like(res.V))
    assert not dU.any() and not db.any()


def test_backward_shape_mismatch():
    res = roi.crop(np.zeros((10, 10, 3)), roi.BBox(1, 1, 6, 6), 4, 4)
    with pytest.raises(ValueError):
        roi.crop_backward(res, np.zeros((4, 5, 3)))


def test_need_image_grad_false():
    res = roi.crop(np.ones((10, 10, 3)), roi.BBox(1, 1, 6, 6), 4, 4)
    dU, _ = roi.crop_backward(res, np.ones_like(res.V), need_image_grad=False)
    assert dU is None


def test_gradients_match_finite_differences():
    box_rep, img_rep = checks.roi_check(seed=11, cases=25)
    assert box_rep.passed and img_rep.passed, (box_rep.max_rel_error, img_rep.max_rel_error)


def test_gradient_on_interior_boxes():
    # boxes 4 px inside the border, so padding plays no part
    rng = make_rng(5)
    U = rng.uniform(size=(40, 40, 3))
    w = rng.normal(size=(6, 5, 3))
    for _ in range(10):
        m1, n1 = rng.uniform(4, 15, size=2)
        b = roi.BBox(m1 + 0.013, n1 + 0.017, m1 + rng.uniform(8, 20) + 0.019, n1 + rng.uniform(8, 20) + 0.011)
        if not checks._clear_of_integers(roi.map_grid(roi.affine_from_box(b), roi.make_target_grid(6, 5)), 2e-3):
            continue
        _, db = roi.crop_backward(roi.crop(U, b, 6, 5), w)
        num = central_diff(lambda c: float(np.sum(w * roi.crop(U, roi.BBox.of(c), 6, 5).V)), b.as_array(), 1e-3)
        assert max_rel_error(db, num) < 1e-3


def test_translation_equivariance():
    rng = make_rng(9)
    U = np.zeros((60, 60, 3))
    U[10:40, 10:40] = rng.uniform(size=(30, 30, 3))
    b = roi.BBox(12.3, 11.7, 30.9, 35.2)
    dx, dy = 7, 4
    V1 = roi.crop(U, b, 16, 8).V
    U2 = np.roll(np.roll(U, dy, axis=0), dx, axis=1)
    V2 = roi.crop(U2, roi.BBox(b.m1 + dx, b.n1 + dy, b.m2 + dx, b.n2 + dy), 16, 8).V
    assert np.max(np.abs(V1 - V2)) <= 1e-12


def test_crop_is_deterministic():
    U = make_rng(2).uniform(size=(50, 50, 3))
    b = roi.BBox(3.3, 4.4, 40.1, 45.9)
    assert roi.crop(U, b).V.tobytes() == roi.crop(U, b).V.tobytes()
