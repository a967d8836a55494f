"""Triplane feature grids: rollout, bilinear sampling, resize, 3D-aware conv.

Convention (fixed and tested): planes are ordered (xz, xy, yz) and stored
stacked as one (3, C, H, W) tensor.  For plane "ab", rows index coordinate a
and columns coordinate b.  A point p in [-1, 1]^3 maps to grid coordinates
with align-corners scaling u = (p + 1)/2 * (res - 1), so grid nodes are
sampled exactly and bilinear fields are closed under resizing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import scatter_add_rows

PLANE_NAMES = ("xz", "xy", "yz")
# (row_axis, col_axis) of each plane in xyz coordinates
PLANE_AXES = ((0, 2), (0, 1), (1, 2))


class Triplane:
    """Three square feature planes of identical resolution and channel count."""

    def __init__(self, planes):
        planes = ad.as_tensor(planes)
        if planes.ndim != 4 or planes.shape[0] != 3:
            raise ValueError(f"expected (3, C, H, W), got {planes.shape}")
        if planes.shape[2] != planes.shape[3]:
            raise ValueError("planes must be square")
        self.planes = planes

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> int:
        return self.planes.shape[2]

    @classmethod
    def zeros(cls, resolution: int, channels: int) -> "Triplane":
        return cls(Tensor(np.zeros((3, channels, resolution, resolution))))

    def plane(self, name: str) -> Tensor:
        return self.planes[PLANE_NAMES.index(name)]

    def detach(self) -> "Triplane":
        return Triplane(self.planes.detach())

    def numpy(self) -> np.ndarray:
        return self.planes.data


def rollout(tp: Triplane) -> Tensor:
    """Concatenate the planes along width: (H, 3W, C), order (xz, xy, yz)."""
    hwc = ad.transpose(tp.planes, (0, 2, 3, 1))  # (3, H, W, C)
    return ad.concat([hwc[0], hwc[1], hwc[2]], axis=1)


def unroll(image: Tensor, channels: int | None = None) -> Triplane:
    """Inverse of rollout; image must be (H, 3W, C)."""
    image = ad.as_tensor(image)
    h, w3, _ = image.shape
    if w3 != 3 * h:
        raise ValueError(f"expected width 3H, got {image.shape}")
    w = w3 // 3
    parts = [ad.transpose(image[:, k * w : (k + 1) * w, :], (2, 0, 1)) for k in range(3)]
    return Triplane(ad.stack(parts, axis=0))


def _grid_coords(coords: np.ndarray, res: int):
    """Align-corners cell indices and fractions for 1-D coordinates in [-1, 1]."""
    u = (np.clip(coords, -1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    i0 = np.maximum(i0, 0)
    return u, i0, u - i0


def sample_features(tp: Triplane, pts) -> Tensor:
    """Bilinear triplane features at 3-D points; output (N, 3C).

    Points outside [-1, 1]^3 are clamped.  Differentiable in the plane values
    and (when pts is a Tensor) in the points themselves.
    """
    planes = tp.planes
    pts_t = pts if isinstance(pts, Tensor) else None
    p = np.asarray(pts.data if pts_t is not None else pts, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite sample points")
    n = p.shape[0]
    c = tp.channels
    res = tp.resolution
    data = planes.data
    wdt = data.dtype

    corners = []  # per plane: (i0, j0, fu, fv, gathered corner features)
    out = np.empty((n, 3 * c), dtype=wdt)
    for k, (ra, ca) in enumerate(PLANE_AXES):
        _, i0, fu = _grid_coords(p[:, ra], res)
        _, j0, fv = _grid_coords(p[:, ca], res)
        pl = data[k]  # (C, H, W)
        c00 = pl[:, i0, j0]
        c01 = pl[:, i0, j0 + 1]
        c10 = pl[:, i0 + 1, j0]
        c11 = pl[:, i0 + 1, j0 + 1]
        w00 = ((1 - fu) * (1 - fv)).astype(wdt)
        w01 = ((1 - fu) * fv).astype(wdt)
        w10 = (fu * (1 - fv)).astype(wdt)
        w11 = (fu * fv).astype(wdt)
        out[:, k * c : (k + 1) * c] = (w00 * c00 + w01 * c01 + w10 * c10 + w11 * c11).T
        # corner features are only needed for point gradients; drop them otherwise
        saved = (c00, c01, c10, c11) if pts_t is not None and pts_t.requires_grad else ()
        corners.append((i0, j0, fu, fv) + saved)

    parents = (planes,) if pts_t is None else (planes, pts_t)

    def bw(g):
        # accumulate in float64: the scatter kernels are f8-only
        gp = np.zeros(data.shape, dtype=np.float64)
        g_pts = np.zeros((n, 3)) if pts_t is not None else None
        for k, (ra, ca) in enumerate(PLANE_AXES):
            i0, j0, fu, fv, *saved = corners[k]
            gk = np.asarray(g[:, k * c : (k + 1) * c], dtype=np.float64)  # (N, C)
            flat = gp[k].reshape(c, res * res).T  # (H*W, C) view
            base = i0 * res + j0
            scatter_add_rows(flat, base, gk * ((1 - fu) * (1 - fv))[:, None])
            scatter_add_rows(flat, base + 1, gk * ((1 - fu) * fv)[:, None])
            scatter_add_rows(flat, base + res, gk * (fu * (1 - fv))[:, None])
            scatter_add_rows(flat, base + res + 1, gk * (fu * fv)[:, None])
            if g_pts is not None and saved:
                c00, c01, c10, c11 = saved
                dgu = (1 - fv) * ((c10 - c00) * gk.T).sum(axis=0) + fv * ((c11 - c01) * gk.T).sum(axis=0)
                dgv = (1 - fu) * ((c01 - c00) * gk.T).sum(axis=0) + fu * ((c11 - c10) * gk.T).sum(axis=0)
                scale = 0.5 * (res - 1)
                in_a = np.abs(p[:, ra]) <= 1.0
                in_b = np.abs(p[:, ca]) <= 1.0
                g_pts[:, ra] += dgu * scale * in_a
                g_pts[:, ca] += dgv * scale * in_b
        pairs = [(planes, gp)]
        if pts_t is not None:
            pairs.append((pts_t, g_pts))
        return pairs

    return ad.from_op(out, parents, bw)


def _resize_matrix(new_res: int, res: int) -> np.ndarray:
    """Align-corners linear interpolation matrix (new_res, res)."""
    m = np.zeros((new_res, res))
    if new_res == 1:
        m[0, 0] = 1.0
        return m
    x = np.arange(new_res) * (res - 1) / (new_res - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), res - 2)
    f = x - i0
    m[np.arange(new_res), i0] = 1.0 - f
    m[np.arange(new_res), i0 + 1] += f
    return m


def resize(tp: Triplane, new_res: int) -> Triplane:
    """Bilinear align-corners resampling of all planes to new_res x new_res."""
    if new_res < 2:
        raise ValueError(f"new_res must be >= 2, got {new_res}")
    planes = tp.planes
    res = tp.resolution
    if new_res == res:
        return Triplane(planes)
    m = _resize_matrix(new_res, res)
    out = np.einsum("ph,kchw,qw->kcpq", m, planes.data, m, optimize=True)

    def bw(g):
        return [(planes, np.einsum("ph,kcpq,qw->kchw", m, g, m, optimize=True))]

    return Triplane(ad.from_op(out, (planes,), bw))


def aware_augment(x: Tensor) -> Tensor:
    """Append cross-plane mean-pool profiles to each plane's channels.

    x: (B, 3, C, H, W) -> (B, 3, 3C, H, W).  For each target plane the two
    other planes are pooled along their non-shared axis; the resulting 1-D
    profiles are broadcast along the target's other axis and concatenated in
    source-plane order.
    """
    b, three, c, h, w = x.shape
    if three != 3:
        raise ValueError("expected plane axis of size 3")
    # pooled over rows (axis H) -> profile over columns; over cols -> rows
    pool_rows = ad.tmean(x, axis=3)  # (B, 3, C, W)
    pool_cols = ad.tmean(x, axis=4)  # (B, 3, C, H)

    def prof(source: int, pooled: Tensor, along: str) -> Tensor:
        pr = pooled[:, source]  # (B, C, L)
        if along == "row":  # profile indexes rows, broadcast across columns
            pr = ad.reshape(pr, (b, c, h, 1))
            return ad.broadcast_to(pr, (b, c, h, w))
        pr = ad.reshape(pr, (b, c, 1, w))
        return ad.broadcast_to(pr, (b, c, h, w))

    # target plane -> ((source, pooled-over, broadcast alignment), ...)
    spec = {
        0: ((1, "cols", "row"), (2, "rows", "col")),
        1: ((0, "cols", "row"), (2, "cols", "col")),
        2: ((0, "rows", "col"), (1, "rows", "row")),
    }
    outs = []
    for k in range(3):
        parts = [x[:, k]]
        for source, pooled_over, along in spec[k]:
            pooled = pool_cols if pooled_over == "cols" else pool_rows
            parts.append(prof(source, pooled, along))
        outs.append(ad.concat(parts, axis=1))  # (B, 3C, H, W)
    return ad.stack(outs, axis=1)


def conv3d_aware(tp: Triplane, weight: Tensor, bias: Tensor | None = None) -> Triplane:
    """3D-aware convolution: pool-broadcast-concat augmentation + shared 2-D conv.

    weight: (C_out, 3C, k, k) with odd k; same padding; output resolution
    preserved.
    """
    c = tp.channels
    if weight.shape[1] != 3 * c:
        raise ValueError(f"weight expects {weight.shape[1]} input channels, triplane supplies {3 * c}")
    x = ad.reshape(tp.planes, (1,) + tuple(tp.planes.shape))
    aug = aware_augment(x)  # (1, 3, 3C, H, W)
    h = tp.resolution
    flat = ad.reshape(aug, (3, 3 * c, h, h))
    y = ad.conv2d(flat, weight, bias)
    return Triplane(y)
