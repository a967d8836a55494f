"""Neural building blocks: PointNet encoder, triplane UNet, MLP heads.

Parameters are ``Param`` leaves collected by walking module attributes, so
checkpoint names follow attribute paths.  All forward passes run on the
autodiff graph; UNets operate internally on stacked planes (B, 3, C, H, W)
with the plane axis folded into the batch for plain 2-D convolutions and
coupled through ``triplane.aware_augment`` inside residual blocks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import triplane as tpl
from .autodiff import Param, Tensor
from .kernels import scatter_add_rows


class Module:
    """Minimal parameter container; traversal follows attribute order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Param):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, p in self.named_parameters():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.data.dtype))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, init: str = "linear", bias: bool = True):
        if init == "zero":
            w = np.zeros((d_in, d_out))
        else:
            gain = np.sqrt(2.0 / d_in) if init == "relu" else np.sqrt(1.0 / d_in)
            w = rng.standard_normal((d_in, d_out)) * gain
        self.w = Param(w)
        self.b = Param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, init: str = "relu"):
        if init == "zero":
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
        self.w = Param(w)
        self.b = Param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b)


def _group_count(channels: int, groups: int) -> int:
    g = min(groups, channels)
    if channels % g != 0:
        raise ValueError(f"channels {channels} not divisible into {g} groups")
    return g


def _fit_groups(channels: int, groups: int) -> int:
    """Largest divisor of channels not exceeding groups (for UNet-internal norms,
    where skip concatenation makes channel counts like c_i + c_{i+1})."""
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, H, W) within channel groups to zero mean, unit variance."""
    b, c, h, w = x.shape
    g = _group_count(c, groups)
    xr = ad.reshape(x, (b, g, (c // g) * h * w))
    return ad.reshape(ad.layer_norm_op(xr, eps), (b, c, h, w))


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        self.groups = _group_count(channels, groups)
        self.eps = eps
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        xn = group_norm(x, self.groups, self.eps)
        c = x.shape[1]
        return xn * ad.reshape(self.gamma, (1, c, 1, 1)) + ad.reshape(self.beta, (1, c, 1, 1))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    return ad.layer_norm_op(x, eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Param(np.ones(dim))
        self.beta = Param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.eps) * self.gamma + self.beta


def fourier_embed(p, n_freqs: int = 6, base: float = np.pi):
    """Per-axis Fourier features: [sin(f_k p), cos(f_k p)], f_k = base * 2^k.

    p: (N, 3) array or Tensor -> (N, 6 * n_freqs).
    """
    p = ad.as_tensor(p)
    parts = []
    for k in range(n_freqs):
        f = base * (2.0**k)
        parts.append(ad.sin(p * f))
        parts.append(ad.cos(p * f))
    return ad.concat(parts, axis=1)


class ColorEmbed(Module):
    """Affine embedding of RGB values in [0, 1]^3 (out-of-range is a data bug)."""

    def __init__(self, rng, m: int):
        self.w = Param(rng.standard_normal((3, m)) * np.sqrt(1.0 / 3.0))
        self.b = Param(np.zeros(m))

    def __call__(self, rgb) -> Tensor:
        vals = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("rgb values outside [0, 1]")
        return ad.matmul(ad.as_tensor(rgb), self.w) + self.b


class MlpHead(Module):
    """Residual MLP head: input layer, then h <- h + relu(LN(linear(h)))."""

    def __init__(self, rng, d_in: int, width: int, depth: int, d_out: int, out_init: str = "linear"):
        self.inp = Linear(rng, d_in, width, init="relu")
        self.blocks = [Linear(rng, width, width, init="relu") for _ in range(depth)]
        self.norms = [LayerNorm(width) for _ in range(depth)]
        self.out = Linear(rng, width, d_out, init=out_init)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.inp(x)
        for lin, norm in zip(self.blocks, self.norms):
            h = h + ad.relu(norm(lin(h)))
        return self.out(h)


class SdfDeformHead(Module):
    """Predicts (sdf, raw deformation) from sampled features + query position."""

    def __init__(self, rng, feat_dim: int, width: int, depth: int, n_freqs: int = 6):
        self.n_freqs = n_freqs
        # zero-init output: the initial surface is exactly the decoder prior
        self.mlp = MlpHead(rng, feat_dim + 6 * n_freqs, width, depth, 4, out_init="zero")

    def __call__(self, feats: Tensor, pts, pts_emb=None) -> tuple[Tensor, Tensor]:
        emb = Tensor(pts_emb) if pts_emb is not None else fourier_embed(pts, self.n_freqs)
        out = self.mlp(ad.concat([feats, emb], axis=1))
        return out[:, 0], out[:, 1:4]


class ColorHead(Module):
    """Predicts rgb in [0, 1] from sampled features + query position."""

    def __init__(self, rng, feat_dim: int, width: int, depth: int, n_freqs: int = 6):
        self.n_freqs = n_freqs
        # zero-init output: colors start at the neutral sigmoid(0) = 0.5
        self.mlp = MlpHead(rng, feat_dim + 6 * n_freqs, width, depth, 3, out_init="zero")

    def __call__(self, feats: Tensor, pts) -> Tensor:
        emb = fourier_embed(pts, self.n_freqs)
        return ad.sigmoid(self.mlp(ad.concat([feats, emb], axis=1)))


def point_cell_indices(p: np.ndarray, res: int) -> np.ndarray:
    """Nearest-node cell ids (3, N) for scattering points onto the planes."""
    idx = np.empty((3, len(p)), dtype=np.int64)
    for k, (ra, ca) in enumerate(tpl.PLANE_AXES):
        r = np.clip(np.rint((p[:, ra] + 1.0) * 0.5 * (res - 1)).astype(np.int64), 0, res - 1)
        c = np.clip(np.rint((p[:, ca] + 1.0) * 0.5 * (res - 1)).astype(np.int64), 0, res - 1)
        idx[k] = r * res + c
    return idx


def scatter_mean_planes(feats: Tensor, cells: np.ndarray, res: int) -> Tensor:
    """Mean-aggregate per-point features into plane cells (empty cells -> 0)."""
    n, f = feats.shape
    sums = np.zeros((3, res * res, f))
    counts = np.empty((3, res * res))
    vals = np.asarray(feats.data, dtype=np.float64)
    for k in range(3):
        scatter_add_rows(sums[k], cells[k], vals)
        counts[k] = np.bincount(cells[k], minlength=res * res)
    denom = np.maximum(counts, 1.0)
    means = sums / denom[:, :, None]
    out = means.transpose(0, 2, 1).reshape(3, f, res, res)

    def bw(g):
        gf = np.zeros((n, f))
        for k in range(3):
            gflat = g[k].reshape(f, res * res).T / denom[k][:, None]
            gf += gflat[cells[k]]
        return [(feats, gf)]

    return ad.from_op(out, (feats,), bw)


class PointNetEncoder(Module):
    """Point MLP + plane scatter producing a raw-feature triplane.

    Input points are sorted lexicographically first so aggregation order is
    canonical and the output is bit-identical under input permutation.
    """

    def __init__(self, rng, feat_dim: int, res: int, color_emb_dim: int = 0, n_freqs: int = 6):
        self.res = res
        self.n_freqs = n_freqs
        self.color = ColorEmbed(rng, color_emb_dim) if color_emb_dim else None
        d_in = 3 + 6 * n_freqs + color_emb_dim
        self.l1 = Linear(rng, d_in, feat_dim, init="relu")
        self.l2 = Linear(rng, feat_dim, feat_dim, init="relu")

    def __call__(self, points: np.ndarray) -> tpl.Triplane:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] not in (3, 6):
            raise ValueError(f"expected (N, 3) or (N, 6) points, got {points.shape}")
        if len(points) == 0:
            raise ValueError("empty point cloud")
        xyz = points[:, :3]
        if np.abs(xyz).max() > 1.0:
            raise ValueError("points outside [-1, 1]^3")
        order = np.lexsort(points.T[::-1])  # canonical order: x, then y, z, colors
        points = points[order]
        xyz = points[:, :3]

        parts = [ad.Tensor(xyz), fourier_embed(xyz, self.n_freqs)]
        if self.color is not None:
            if points.shape[1] != 6:
                raise ValueError("textured encoder expects (N, 6) points with rgb")
            parts.append(self.color(points[:, 3:6]))
        h = ad.concat(parts, axis=1)
        h = ad.relu(self.l1(h))
        h = ad.relu(self.l2(h))
        cells = point_cell_indices(xyz, self.res)
        return tpl.Triplane(scatter_mean_planes(h, cells, self.res))


def sinusoid_embedding(t, dim: int) -> np.ndarray:
    """Raw timestep sinusoid: sines then cosines over log-spaced frequencies."""
    if dim % 2:
        raise ValueError("dim must be even")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ang = tt[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return out if np.ndim(t) else out[0]


class TimestepEmbed(Module):
    def __init__(self, rng, sin_dim: int, out_dim: int):
        self.sin_dim = sin_dim
        self.l1 = Linear(rng, sin_dim, out_dim, init="relu")
        self.l2 = Linear(rng, out_dim, out_dim)

    def __call__(self, t) -> Tensor:
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 0):
            raise ValueError("timestep must be non-negative")
        raw = Tensor(sinusoid_embedding(t_arr, self.sin_dim))
        return self.l2(ad.silu(self.l1(raw)))


class AdaGN(Module):
    """GroupNorm modulated by an embedding: gn(h) * (1 + scale) + shift."""

    def __init__(self, rng, channels: int, emb_dim: int, groups: int = 8):
        self.channels = channels
        self.groups = _group_count(channels, groups)
        self.proj = Linear(rng, emb_dim, 2 * channels, init="zero") if emb_dim else None

    def __call__(self, h: Tensor, emb: Tensor | None) -> Tensor:
        hn = group_norm(h, self.groups)
        if self.proj is None or emb is None:
            return hn
        ss = self.proj(emb)  # (B, 2C)
        b, c = h.shape[0], self.channels
        scale = ad.reshape(ss[:, :c], (b, c, 1, 1))
        shift = ad.reshape(ss[:, c:], (b, c, 1, 1))
        return hn * (1.0 + scale) + shift


class CondFuse(Module):
    """LayerNorm(condition) ++ timestep embedding -> linear fusion."""

    def __init__(self, rng, cond_dim: int, t_dim: int, out_dim: int):
        self.cond_dim = cond_dim
        self.fuse = Linear(rng, cond_dim + t_dim, out_dim)

    def __call__(self, cond: Tensor, t_emb: Tensor) -> Tensor:
        if cond.shape[-1] != self.cond_dim:
            raise ValueError(f"conditioning dim {cond.shape[-1]}, expected {self.cond_dim}")
        return self.fuse(ad.concat([layer_norm(cond), t_emb], axis=1))


def _fold_planes(x: Tensor) -> Tensor:
    b, three, c, h, w = x.shape
    return ad.reshape(x, (b * three, c, h, w))


def _unfold_planes(x: Tensor, b: int) -> Tensor:
    bt, c, h, w = x.shape
    return ad.reshape(x, (b, 3, c, h, w))


class AwareConv(Module):
    """3D-aware convolution over stacked planes (B, 3, C, H, W)."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, init: str = "relu"):
        self.conv = Conv2d(rng, 3 * c_in, c_out, k, init=init)

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        aug = tpl.aware_augment(x)
        return _unfold_planes(self.conv(_fold_planes(aug)), b)


class ResBlock(Module):
    """GroupNorm - SiLU - aware conv - AdaGN(emb) - SiLU - aware conv + skip."""

    def __init__(self, rng, c_in: int, c_out: int, emb_dim: int = 0, groups: int = 8):
        self.norm = GroupNorm(c_in, _fit_groups(c_in, groups))
        self.conv1 = AwareConv(rng, c_in, c_out)
        self.ada = AdaGN(rng, c_out, emb_dim, _fit_groups(c_out, groups))
        self.conv2 = AwareConv(rng, c_out, c_out, init="zero")
        self.skip = Conv2d(rng, c_in, c_out, 1, init="linear") if c_in != c_out else None

    def __call__(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        b = x.shape[0]
        if emb is not None:
            # plane axis folds into batch: replicate the embedding per plane
            emb = ad.reshape(ad.broadcast_to(ad.reshape(emb, (b, 1, -1)), (b, 3, emb.shape[-1])), (b * 3, -1))
        h = _unfold_planes(self.norm(_fold_planes(x)), b)
        h = self.conv1(ad.silu(h))
        h = _unfold_planes(self.ada(_fold_planes(h), emb), b)
        h = self.conv2(ad.silu(h))
        if self.skip is not None:
            x = _unfold_planes(self.skip(_fold_planes(x)), b)
        return h + x


class UNet(Module):
    """Symmetric encoder/decoder over stacked triplanes with skip connections."""

    def __init__(self, rng, c_in: int, c_out: int, channels: tuple[int, ...] = (32, 64, 128),
                 emb_dim: int = 0, groups: int = 8, zero_out: bool = False):
        self.channels = tuple(channels)
        self.emb_dim = emb_dim
        self.stem = Conv2d(rng, c_in, channels[0], 3)
        self.down = []
        prev = channels[0]
        for ch in channels:
            self.down.append(ResBlock(rng, prev, ch, emb_dim, groups))
            prev = ch
        self.middle = ResBlock(rng, prev, prev, emb_dim, groups)
        self.up = []
        for i in range(len(channels) - 2, -1, -1):
            self.up.append(ResBlock(rng, channels[i + 1] + channels[i], channels[i], emb_dim, groups))
        self.out_norm = GroupNorm(channels[0], _fit_groups(channels[0], groups))
        self.out_conv = Conv2d(rng, channels[0], c_out, 3, init="zero" if zero_out else "relu")

    def forward_planes(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        b, three, _, h, w = x.shape
        levels = len(self.channels)
        div = 2 ** (levels - 1)
        if h % div or w % div:
            raise ValueError(f"resolution {h}x{w} not divisible by {div}")
        hcur = _unfold_planes(self.stem(_fold_planes(x)), b)
        skips = []
        for i, block in enumerate(self.down):
            hcur = block(hcur, emb)
            if i < levels - 1:
                skips.append(hcur)
                hcur = _unfold_planes(ad.avg_pool2(_fold_planes(hcur)), b)
        hcur = self.middle(hcur, emb)
        for i, block in enumerate(self.up):
            hcur = _unfold_planes(ad.upsample2(_fold_planes(hcur)), b)
            hcur = ad.concat([hcur, skips[-(i + 1)]], axis=2)
            hcur = block(hcur, emb)
        out = self.out_conv(ad.silu(self.out_norm(_fold_planes(hcur))))
        return _unfold_planes(out, b)

    def __call__(self, image: Tensor, emb: Tensor | None = None) -> Tensor:
        """Rolled-out form: (H, 3W, C) in, (H, 3W, C_out) out."""
        tp = tpl.unroll(image)
        x = ad.reshape(tp.planes, (1,) + tuple(tp.planes.shape))
        if emb is not None and emb.ndim == 1:
            emb = ad.reshape(emb, (1, -1))
        y = self.forward_planes(x, emb)
        return tpl.rollout(tpl.Triplane(ad.reshape(y, tuple(y.shape[1:]))))
