"""Backend parity: the compiled kernels must match the numpy reference."""

import numpy as np
import pytest

from triforge.kernels import backend_name, reference

try:
    from triforge.kernels import _fastcore
except ImportError:
    _fastcore = None

needs_compiled = pytest.mark.skipif(_fastcore is None, reason="compiled extension not built")


def test_backend_selected():
    assert backend_name() in ("compiled", "python")


@needs_compiled
def test_scatter_add_parity():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 50, 1000)
    src = rng.standard_normal((1000, 4))
    a = np.zeros((50, 4))
    b = np.zeros((50, 4))
    reference.scatter_add_rows(a, idx, src)
    _fastcore.scatter_add_rows(b, idx, src)
    np.testing.assert_allclose(a, b, atol=1e-12)

    a1 = np.zeros(50)
    b1 = np.zeros(50)
    reference.scatter_add_1d(a1, idx, src[:, 0].copy())
    _fastcore.scatter_add_1d(b1, idx, src[:, 0].copy())
    np.testing.assert_allclose(a1, b1, atol=1e-12)


def _scene(seed, n_verts=30, n_faces=40):
    rng = np.random.default_rng(seed)
    v2d = rng.uniform(-0.9, 0.9, (n_verts, 2))
    z = rng.uniform(1.0, 4.0, n_verts)
    faces = rng.integers(0, n_verts, (n_faces, 3))
    return v2d, z, faces


@needs_compiled
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_softras_forward_parity(seed):
    v2d, z, faces = _scene(seed)
    args = (v2d, z, faces, 48, 48, 1e-3, 0.2, 10.0, 1e-3, 0.3)
    ref = reference.softras_forward(*args)
    fast = _fastcore.softras_forward(*args)
    for a, b in zip(ref[:2], fast[:2]):
        np.testing.assert_allclose(a, b, atol=1e-12)
    # accumulators hold exp-weighted sums that can be astronomically scaled;
    # compare relatively
    for a, b in zip(ref[2:], fast[2:]):
        np.testing.assert_allclose(a, b, rtol=1e-9)


@needs_compiled
@pytest.mark.parametrize("seed", [0, 3])
def test_softras_backward_parity(seed):
    v2d, z, faces = _scene(seed)
    h = w = 40
    args = (v2d, z, faces, h, w, 2e-3, 0.25, 10.0, 1e-3, 0.35)
    ref_fwd = reference.softras_forward(*args)
    rng = np.random.default_rng(seed + 100)
    gm = rng.standard_normal((h, w))
    gd = rng.standard_normal((h, w))
    ref_bwd = reference.softras_backward(*args, *ref_fwd[2:], gm, gd)
    fast_bwd = _fastcore.softras_backward(*args, *ref_fwd[2:], gm, gd)
    scale = np.abs(ref_bwd[0]).max() + 1e-9
    np.testing.assert_allclose(fast_bwd[0] / scale, ref_bwd[0] / scale, atol=1e-10)
    zscale = np.abs(ref_bwd[1]).max() + 1e-9
    np.testing.assert_allclose(fast_bwd[1] / zscale, ref_bwd[1] / zscale, atol=1e-10)


def test_softras_empty_faces():
    out = reference.softras_forward(
        np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3), dtype=np.int64),
        8, 8, 1e-4, 0.1, 10.0, 1e-3, 0.1,
    )
    np.testing.assert_allclose(out[0], 0.0)
    np.testing.assert_allclose(out[1], 10.0)


@needs_compiled
def test_softras_determinism():
    v2d, z, faces = _scene(7)
    args = (v2d, z, faces, 32, 32, 1e-3, 0.2, 10.0, 1e-3, 0.3)
    a = _fastcore.softras_forward(*args)
    b = _fastcore.softras_forward(*args)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
