import numpy as np
import pytest
from scipy import ndimage, stats

import triforge.autodiff as ad
import triforge.tetmesh as tet
from triforge.autodiff import Tensor, grad_check
from triforge.render import (
    Camera,
    RenderOut,
    rasterize_hard,
    rasterize_soft,
    read_pfm,
    render_losses,
    sample_camera,
    write_pfm,
    write_pgm,
)
from triforge.shapes import desk4, eval_sdf, sphere_trace_render


def octa_mesh(scale=0.5):
    v = scale * np.array(
        [[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    )
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return tet.TriMesh(vertices=v, faces=f)


def axial_cam(res=128, dist=2.5):
    return Camera(eye=np.array([dist, 0.0, 0.0]), resolution=(res, res), fov_y=np.deg2rad(40))


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(eye=np.zeros(3), target=np.zeros(3))
    with pytest.raises(ValueError):
        Camera(eye=np.array([1.0, 0, 0]), near=1.0, far=0.5)
    with pytest.raises(ValueError):
        Camera(eye=np.array([1.0, 0, 0]), fov_y=4.0)


def test_sample_camera_deterministic_and_equatorial():
    c1 = sample_camera(7)
    c2 = sample_camera(7)
    assert np.array_equal(c1.eye, c2.eye)
    c3 = sample_camera(3, elevation_range=(0.0, 0.0))
    assert abs(c3.eye[2]) < 1e-12  # z-up: zero elevation means zero z


def test_sample_camera_azimuth_uniform():
    rng = np.random.default_rng(0)
    azimuths = []
    for _ in range(10000):
        cam = sample_camera(rng)
        azimuths.append(np.arctan2(cam.eye[1], cam.eye[0]) % (2 * np.pi))
    hist, _ = np.histogram(azimuths, bins=16, range=(0, 2 * np.pi))
    chi2 = ((hist - len(azimuths) / 16) ** 2 / (len(azimuths) / 16)).sum()
    p = 1.0 - stats.chi2.cdf(chi2, df=15)
    assert p > 0.01


def test_rasterize_hard_empty_and_fullscreen():
    cam = axial_cam(32)
    empty = tet.TriMesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))
    out = rasterize_hard(empty, cam)
    assert np.all(out.mask_np == 0) and np.all(out.depth_np == cam.far)

    # full-screen triangle at constant eye depth d (plane x = 1.5, depth 1.0)
    big = tet.TriMesh(
        vertices=np.array([[1.5, -50.0, -50.0], [1.5, 50.0, 0.0], [1.5, 0.0, 50.0]]),
        faces=np.array([[0, 1, 2]]),
    )
    out = rasterize_hard(big, cam)
    assert np.all(out.mask_np == 1)
    np.testing.assert_allclose(out.depth_np, 1.0, atol=1e-9)


def test_rasterize_hard_sphere_footprint():
    # projected-disk solid angle: sin(theta) = r / d
    r, d = 0.6, 2.5
    g = tet.build_grid(48)
    s = np.linalg.norm(g.verts, axis=1) - r
    mesh = tet.marching_tets(g, tet.VertexFields(sdf=s, deform=np.zeros((len(s), 3))))
    cam = axial_cam(256, dist=d)
    out = rasterize_hard(mesh, cam)
    # apparent half-angle of the sphere silhouette
    theta = np.arcsin(r / d)
    t = np.tan(cam.fov_y / 2)
    frac_expected = np.pi * (np.tan(theta) / t) ** 2 / 4.0  # disk in ndc units
    frac = out.mask_np.mean()
    assert abs(frac - frac_expected) / frac_expected < 0.02


def test_depth_ordering_two_planes():
    # two parallel full-cover quads; the nearer one wins everywhere
    def quad(x, half):
        v = np.array([[x, -half, -half], [x, half, -half], [x, half, half], [x, -half, half]])
        f = np.array([[0, 1, 2], [0, 2, 3]])
        return v, f

    v1, f1 = quad(1.0, 5.0)   # depth 1.5 from eye at 2.5
    v2, f2 = quad(0.0, 5.0)   # depth 2.5
    mesh = tet.TriMesh(vertices=np.concatenate([v1, v2]), faces=np.concatenate([f1, f2 + 4]))
    out = rasterize_hard(mesh, axial_cam(64))
    np.testing.assert_allclose(out.depth_np, 1.5, atol=1e-9)


def test_soft_saturation_inside_triangle():
    cam = axial_cam(64)
    big = tet.TriMesh(
        vertices=np.array([[1.5, -50.0, -50.0], [1.5, 50.0, 0.0], [1.5, 0.0, 50.0]]),
        faces=np.array([[0, 1, 2]]),
    )
    out = rasterize_soft(big, cam, temperature=1e-4)
    hard = rasterize_hard(big, cam)
    center = out.mask_np[32, 32]
    assert center > 1.0 - 1e-6
    assert abs(out.depth_np[32, 32] - hard.depth_np[32, 32]) < 1e-3


def test_soft_edge_pixel_half_weight():
    # pixel center exactly on a triangle edge: that face contributes w = 1/2
    cam = Camera(eye=np.array([2.0, 0.0, 0.0]), resolution=(33, 33), fov_y=np.deg2rad(40))
    # build a triangle whose edge passes through the center pixel (ndc y = 0)
    t = np.tan(cam.fov_y / 2)
    y_world = 0.0  # center row in ndc
    v = np.array([[1.0, -0.5, y_world], [1.0, 0.5, y_world], [1.0, 0.0, -0.5]])
    mesh = tet.TriMesh(vertices=v, faces=np.array([[0, 1, 2]]))
    out = rasterize_soft(mesh, cam, temperature=1e-4)
    assert abs(out.mask_np[16, 16] - 0.5) < 1e-9


def test_soft_hard_consistency_sphere():
    g = tet.build_grid(24)
    s = np.linalg.norm(g.verts, axis=1) - 0.6
    mesh = tet.marching_tets(g, tet.VertexFields(sdf=s, deform=np.zeros((len(s), 3))))
    cam = axial_cam(128)
    hard = rasterize_hard(mesh, cam)
    soft = rasterize_soft(mesh, cam, temperature=1e-5)
    edge = ndimage.binary_dilation(hard.mask_np > 0.5, iterations=2) & ~ndimage.binary_erosion(
        hard.mask_np > 0.5, iterations=2
    )
    keep = ~edge
    diff = np.abs(soft.mask_np - hard.mask_np)[keep]
    assert diff.mean() < 0.01


def test_soft_gradients_full_loss():
    octa = octa_mesh(0.5)
    cam = Camera(eye=np.array([2.2, 0.4, 0.3]), resolution=(32, 32), fov_y=np.deg2rad(40))
    gt = rasterize_hard(tet.TriMesh(vertices=octa.vertices_np * 1.15, faces=octa.faces), cam)

    def f(t):
        mesh = tet.TriMesh(vertices=ad.reshape(t, (6, 3)), faces=octa.faces)
        out = rasterize_soft(mesh, cam, temperature=1e-3, depth_gamma=0.15)
        lm, ld = render_losses(out, gt)
        return lm + ld

    err = grad_check(f, Tensor(octa.vertices_np.reshape(-1)), 1e-5)
    assert err < 1e-3


def test_render_losses():
    m1 = np.zeros((2, 2))
    m2 = np.zeros((2, 2))
    m2[0, 0] = 1.0
    d = np.full((2, 2), 5.0)
    a = RenderOut(mask=m1, depth=d)
    b = RenderOut(mask=m2, depth=d)
    lm, ld = render_losses(a, b)
    assert abs(lm.item() - 0.25) < 1e-12
    same = render_losses(a, a)
    assert same[0].item() == 0.0 and same[1].item() == 0.0
    with pytest.raises(ValueError):
        render_losses(a, RenderOut(mask=np.zeros((3, 3)), depth=np.zeros((3, 3))))
    # symmetry over the full image
    rng = np.random.default_rng(1)
    ra = RenderOut(mask=(rng.random((8, 8)) > 0.5).astype(float), depth=rng.uniform(1, 2, (8, 8)))
    rb = RenderOut(mask=(rng.random((8, 8)) > 0.5).astype(float), depth=rng.uniform(1, 2, (8, 8)))
    ab = render_losses(ra, rb)
    ba = render_losses(rb, ra)
    assert abs(ab[0].item() - ba[0].item()) < 1e-15
    assert abs(ab[1].item() - ba[1].item()) < 1e-15


def test_translated_plane_depth_loss():
    def quad_mesh(x):
        v = np.array([[x, -3.0, -3.0], [x, 3.0, -3.0], [x, 3.0, 3.0], [x, -3.0, 3.0]])
        return tet.TriMesh(vertices=v, faces=np.array([[0, 1, 2], [0, 2, 3]]))

    cam = axial_cam(64)
    delta = 0.23
    a = rasterize_hard(quad_mesh(1.0), cam)
    b = rasterize_hard(quad_mesh(1.0 - delta), cam)
    lm, ld = render_losses(a, b)
    assert abs(ld.item() - delta) < 1e-9


def test_pgm_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    mask = rng.random((9, 7))
    depth = rng.uniform(0.5, 9.5, (9, 7))
    write_pgm(mask, tmp_path / "m.pgm")
    write_pfm(depth, tmp_path / "d.pfm")
    with open(tmp_path / "m.pgm", "rb") as f:
        assert f.readline().strip() == b"P5"
        assert f.readline().split() == [b"7", b"9"]
        assert f.readline().strip() == b"255"
        data = np.frombuffer(f.read(), dtype=np.uint8).reshape(9, 7)
    np.testing.assert_array_equal(data, np.round(mask * 255).astype(np.uint8))
    back = read_pfm(tmp_path / "d.pfm")
    np.testing.assert_allclose(back, depth, rtol=1e-6)
