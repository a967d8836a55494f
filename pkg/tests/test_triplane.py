import numpy as np
import pytest

import triforge.autodiff as ad
import triforge.triplane as tpl
from triforge.autodiff import Tensor, grad_check


def rand_tp(rng, res=6, c=2):
    return tpl.Triplane(Tensor(rng.standard_normal((3, c, res, res))))


def test_rollout_shape_and_roundtrip():
    rng = np.random.default_rng(0)
    tp = rand_tp(rng, res=4, c=2)
    img = tpl.rollout(tp)
    assert img.shape == (4, 12, 2)
    back = tpl.unroll(img)
    assert np.array_equal(back.planes.data, tp.planes.data)


def test_rollout_plane_placement():
    planes = np.zeros((3, 2, 4, 4))
    planes[1] = 3.5  # h_xy is the middle third
    img = tpl.rollout(tpl.Triplane(Tensor(planes))).data
    assert np.all(img[:, 4:8, :] == 3.5)
    assert np.all(img[:, :4, :] == 0.0)
    assert np.all(img[:, 8:, :] == 0.0)


def test_sample_constant_planes():
    rng = np.random.default_rng(1)
    tp = tpl.Triplane(Tensor(np.full((3, 3, 5, 5), 0.25)))
    pts = rng.uniform(-1, 1, (10, 3))
    feats = tpl.sample_features(tp, pts)
    assert feats.shape == (10, 9)
    np.testing.assert_allclose(feats.data, 0.25)


def test_sample_grid_node_exact():
    rng = np.random.default_rng(2)
    res = 5
    tp = rand_tp(rng, res=res, c=2)
    # node (i, j) of plane xz at x = -1 + 2i/(res-1), z likewise; y arbitrary node
    i, j, k = 3, 1, 2
    coord = lambda n: -1.0 + 2.0 * n / (res - 1)
    p = np.array([[coord(i), coord(k), coord(j)]])  # x, y, z
    feats = tpl.sample_features(tp, p).data[0]
    data = tp.planes.data
    np.testing.assert_allclose(feats[0:2], data[0, :, i, j], atol=1e-12)  # xz: (x, z)
    np.testing.assert_allclose(feats[2:4], data[1, :, i, k], atol=1e-12)  # xy: (x, y)
    np.testing.assert_allclose(feats[4:6], data[2, :, k, j], atol=1e-12)  # yz: (y, z)


def _affine_planes(res, coeffs):
    """Plane values affine in (row, col) grid coordinates."""
    u = np.linspace(-1, 1, res)
    rr, cc = np.meshgrid(u, u, indexing="ij")
    a, b, c = coeffs
    field = a + b * rr + c * cc
    return np.broadcast_to(field, (3, 1, res, res)).copy()


def test_sample_affine_exact():
    # bilinear sampling reproduces affine functions of the plane coordinates
    res = 9
    coeffs = (0.3, -0.7, 0.45)
    tp = tpl.Triplane(Tensor(_affine_planes(res, coeffs)))
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (50, 3))
    feats = tpl.sample_features(tp, pts).data
    a, b, c = coeffs
    for k, (ra, ca) in enumerate(tpl.PLANE_AXES):
        expected = a + b * pts[:, ra] + c * pts[:, ca]
        np.testing.assert_allclose(feats[:, k], expected, atol=1e-12)


def test_sample_linearity_in_planes():
    rng = np.random.default_rng(4)
    p1, p2 = rng.standard_normal((2, 3, 2, 6, 6))
    pts = rng.uniform(-1, 1, (20, 3))
    f1 = tpl.sample_features(tpl.Triplane(Tensor(p1)), pts).data
    f2 = tpl.sample_features(tpl.Triplane(Tensor(p2)), pts).data
    f12 = tpl.sample_features(tpl.Triplane(Tensor(2.0 * p1 - 3.0 * p2)), pts).data
    np.testing.assert_allclose(f12, 2.0 * f1 - 3.0 * f2, atol=1e-12)


def test_sample_clamps_out_of_range():
    rng = np.random.default_rng(5)
    tp = rand_tp(rng)
    inside = tpl.sample_features(tp, np.array([[1.0, 1.0, 1.0]])).data
    outside = tpl.sample_features(tp, np.array([[1.7, 2.0, 9.0]])).data
    np.testing.assert_array_equal(inside, outside)
    with pytest.raises(ValueError):
        tpl.sample_features(tp, np.array([[np.nan, 0.0, 0.0]]))


def test_sample_gradients():
    rng = np.random.default_rng(6)
    tp = rand_tp(rng, res=5, c=2)
    pts = rng.uniform(-0.9, 0.9, (7, 3))

    def f_planes(t):
        return ad.tsum(tpl.sample_features(tpl.Triplane(ad.reshape(t, tp.planes.shape)), pts) ** 2)

    assert grad_check(f_planes, Tensor(tp.planes.data.reshape(-1)), 1e-6) < 1e-5

    def f_pts(t):
        return ad.tsum(tpl.sample_features(tp, ad.reshape(t, (7, 3))) ** 2)

    assert grad_check(f_pts, Tensor(pts.reshape(-1)), 1e-6) < 1e-5


def test_resize_identity_and_constant():
    rng = np.random.default_rng(7)
    tp = rand_tp(rng, res=8)
    same = tpl.resize(tp, 8)
    assert np.array_equal(same.planes.data, tp.planes.data)
    const = tpl.Triplane(Tensor(np.full((3, 1, 8, 8), 1.25)))
    np.testing.assert_allclose(tpl.resize(const, 3).planes.data, 1.25)
    with pytest.raises(ValueError):
        tpl.resize(tp, 1)


def test_resize_bilinear_field_roundtrip_exact():
    res = 33
    planes = _affine_planes(res, (0.2, 0.6, -0.3))
    u = np.linspace(-1, 1, res)
    rr, cc = np.meshgrid(u, u, indexing="ij")
    planes = planes + 0.8 * rr * cc  # bilinear term stays closed under resize
    tp = tpl.Triplane(Tensor(planes))
    down = tpl.resize(tp, 9)
    up = tpl.resize(down, res)
    np.testing.assert_allclose(up.planes.data, planes, atol=1e-12)


def test_resize_gradient():
    rng = np.random.default_rng(8)
    tp = rand_tp(rng, res=6, c=1)

    def f(t):
        return ad.tsum(tpl.resize(tpl.Triplane(ad.reshape(t, tp.planes.shape)), 4).planes ** 2)

    assert grad_check(f, Tensor(tp.planes.data.reshape(-1)), 1e-6) < 1e-5


def test_conv3d_aware_zero_others_identity_kernel():
    rng = np.random.default_rng(9)
    c = 2
    planes = np.zeros((3, c, 4, 4))
    planes[0] = rng.standard_normal((c, 4, 4))
    tp = tpl.Triplane(Tensor(planes))
    # 1x1 kernel passing through the first C (target-plane) channels
    w = np.zeros((c, 3 * c, 1, 1))
    for i in range(c):
        w[i, i, 0, 0] = 1.0
    out = tpl.conv3d_aware(tp, Tensor(w))
    np.testing.assert_allclose(out.planes.data[0], planes[0], atol=1e-12)


def test_conv3d_aware_constant_input_constant_output():
    rng = np.random.default_rng(10)
    c = 2
    tp = tpl.Triplane(Tensor(np.full((3, c, 6, 6), 0.6)))
    w = Tensor(rng.standard_normal((3, 3 * c, 3, 3)))
    out = tpl.conv3d_aware(tp, w).planes.data
    # same padding makes borders differ; interior must be spatially constant
    interior = out[:, :, 1:-1, 1:-1]
    for k in range(3):
        for ch in range(3):
            vals = interior[k, ch]
            np.testing.assert_allclose(vals, vals[0, 0], atol=1e-12)


def test_conv3d_aware_hand_computed_2x2():
    # H=W=2, C=1, 1x1 kernel: output = w0*target + w1*aug1 + w2*aug2 + bias
    planes = np.array(
        [
            [[[1.0, 2.0], [3.0, 4.0]]],  # xz: rows x, cols z
            [[[5.0, 6.0], [7.0, 8.0]]],  # xy: rows x, cols y
            [[[9.0, 10.0], [11.0, 12.0]]],  # yz: rows y, cols z
        ]
    )
    tp = tpl.Triplane(Tensor(planes))
    w = np.array([[[[2.0]], [[10.0]], [[100.0]]]])  # (1, 3, 1, 1)
    b = np.array([0.5])
    out = tpl.conv3d_aware(tp, Tensor(w), Tensor(b)).planes.data

    # target xz: aug1 = xy pooled over y (cols) -> per-x profile [5.5, 7.5] along rows
    #            aug2 = yz pooled over y (rows) -> per-z profile [10, 11] along cols
    aug1 = np.array([[5.5, 5.5], [7.5, 7.5]])
    aug2 = np.array([[10.0, 11.0], [10.0, 11.0]])
    expected0 = 2.0 * planes[0, 0] + 10.0 * aug1 + 100.0 * aug2 + 0.5
    np.testing.assert_allclose(out[0, 0], expected0, atol=1e-12)

    # target xy: aug1 = xz pooled over z -> per-x profile [1.5, 3.5] along rows
    #            aug2 = yz pooled over z -> per-y profile [9.5, 11.5] along cols
    aug1 = np.array([[1.5, 1.5], [3.5, 3.5]])
    aug2 = np.array([[9.5, 11.5], [9.5, 11.5]])
    expected1 = 2.0 * planes[1, 0] + 10.0 * aug1 + 100.0 * aug2 + 0.5
    np.testing.assert_allclose(out[1, 0], expected1, atol=1e-12)

    # target yz: aug1 = xz pooled over x -> per-z profile [2, 3] along cols
    #            aug2 = xy pooled over x -> per-y profile [6, 7] along rows
    aug1 = np.array([[2.0, 3.0], [2.0, 3.0]])
    aug2 = np.array([[6.0, 6.0], [7.0, 7.0]])
    expected2 = 2.0 * planes[2, 0] + 10.0 * aug1 + 100.0 * aug2 + 0.5
    np.testing.assert_allclose(out[2, 0], expected2, atol=1e-12)


def test_conv3d_aware_preserves_resolution_and_checks_channels():
    rng = np.random.default_rng(11)
    tp = rand_tp(rng, res=6, c=2)
    w = Tensor(rng.standard_normal((5, 6, 3, 3)))
    out = tpl.conv3d_aware(tp, w)
    assert out.resolution == 6 and out.channels == 5
    with pytest.raises(ValueError):
        tpl.conv3d_aware(tp, Tensor(rng.standard_normal((5, 4, 3, 3))))


def test_conv3d_aware_gradient():
    rng = np.random.default_rng(12)
    tp = rand_tp(rng, res=4, c=1)
    w = rng.standard_normal((2, 3, 3, 3)) * 0.4

    def f_planes(t):
        out = tpl.conv3d_aware(tpl.Triplane(ad.reshape(t, tp.planes.shape)), Tensor(w))
        return ad.tsum(out.planes ** 2)

    assert grad_check(f_planes, Tensor(tp.planes.data.reshape(-1)), 1e-6) < 1e-4

    def f_w(t):
        out = tpl.conv3d_aware(tp, ad.reshape(t, (2, 3, 3, 3)))
        return ad.tsum(out.planes ** 2)

    assert grad_check(f_w, Tensor(w.reshape(-1)), 1e-6) < 1e-4
