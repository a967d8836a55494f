"""Synthetic ground truth: CSG signed-distance shapes with procedural colors.

Primitive SDFs are exact; CSG combines them with min/max, which keeps a safe
(never over-estimating) bound for sphere tracing and an exact zero level
set.  Sign convention: s < 0 inside.  Round primitives (torus, cylinder,
capsule default) take z as their axis, matching the camera up vector.

Shapes used as dataset fixtures keep their isosurface strictly inside
[-0.95, 0.95]^3 so no normalization step sits between the SDF and the
renderers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .render import Camera, RenderOut

_PRIMS = ("sphere", "box", "torus", "cylinder", "capsule")
_OPS = ("union", "intersection", "subtraction")


@dataclass
class ShapeSpec:
    name: str
    tree: tuple
    color_fn: tuple = ("constant", (0.7, 0.7, 0.7))

    def to_dict(self) -> dict[str, Any]:
        def conv(node):
            kind = node[0]
            if kind in _OPS:
                return [kind, conv(node[1]), conv(node[2])]
            return [kind] + [list(np.atleast_1d(x).astype(float)) if np.ndim(x) else float(x) for x in node[1:]]

        color = [self.color_fn[0]] + [
            list(map(list, c)) if isinstance(c, (list, tuple)) and c and isinstance(c[0], (list, tuple)) else
            (list(c) if isinstance(c, (list, tuple)) else c)
            for c in self.color_fn[1:]
        ]
        return {"name": self.name, "tree": conv(self.tree), "color_fn": color}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ShapeSpec":
        def conv(node):
            kind = node[0]
            if kind in _OPS:
                return (kind, conv(node[1]), conv(node[2]))
            return tuple([kind] + [np.asarray(x, dtype=float) if isinstance(x, list) else float(x) for x in node[1:]])

        color = d["color_fn"]
        return cls(name=d["name"], tree=conv(d["tree"]), color_fn=tuple([color[0]] + [
            tuple(tuple(c) for c in item) if isinstance(item, list) and item and isinstance(item[0], list)
            else (tuple(item) if isinstance(item, list) else item)
            for item in color[1:]
        ]))


def _leaf_sdfs(tree, p):
    """SDF of every leaf primitive, in left-to-right tree order: (L, N)."""
    kind = tree[0]
    if kind in _OPS:
        return np.concatenate([_leaf_sdfs(tree[1], p), _leaf_sdfs(tree[2], p)], axis=0)
    return _prim_sdf(tree, p)[None, :]


def _prim_sdf(node, p):
    kind = node[0]
    if kind == "sphere":
        _, c, r = node
        return np.linalg.norm(p - c, axis=1) - r
    if kind == "box":
        _, c, half = node
        q = np.abs(p - c) - np.asarray(half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)
    if kind == "torus":
        _, c, big_r, small_r = node
        d = p - c
        ring = np.hypot(np.hypot(d[:, 0], d[:, 1]) - big_r, d[:, 2])
        return ring - small_r
    if kind == "cylinder":
        _, c, r, hh = node
        d = p - c
        dx = np.hypot(d[:, 0], d[:, 1]) - r
        dz = np.abs(d[:, 2]) - hh
        q = np.stack([dx, dz], axis=1)
        return np.minimum(q.max(axis=1), 0.0) + np.linalg.norm(np.maximum(q, 0.0), axis=1)
    if kind == "capsule":
        _, a, b, r = node
        ab = np.asarray(b) - np.asarray(a)
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = np.asarray(a) + t[:, None] * ab
        return np.linalg.norm(p - closest, axis=1) - r
    raise ValueError(f"unknown primitive {kind!r}")


def eval_sdf(spec: ShapeSpec, p) -> np.ndarray:
    """Signed distance of points (N, 3) or a single point; s < 0 inside."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite query point")

    def rec(node):
        kind = node[0]
        if kind == "union":
            return np.minimum(rec(node[1]), rec(node[2]))
        if kind == "intersection":
            return np.maximum(rec(node[1]), rec(node[2]))
        if kind == "subtraction":
            return np.maximum(rec(node[1]), -rec(node[2]))
        return _prim_sdf(node, p)

    out = rec(spec.tree)
    return out if out.shape[0] > 1 else out.reshape(-1)


def grad_sdf(spec: ShapeSpec, p, h: float = 1e-5) -> np.ndarray:
    """Central-difference SDF gradient."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    g = np.empty_like(p)
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = h
        g[:, k] = (eval_sdf(spec, p + dp) - eval_sdf(spec, p - dp)) / (2 * h)
    return g


def eval_color(spec: ShapeSpec, p) -> np.ndarray:
    """Procedural rgb in [0, 1]^3 for points near the surface."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    rule = spec.color_fn
    kind = rule[0]
    if kind == "constant":
        return np.broadcast_to(np.asarray(rule[1], dtype=float), (len(p), 3)).copy()
    if kind == "stripes":
        _, axis, period, colors = rule
        colors = np.asarray(colors, dtype=float)
        idx = np.floor(p[:, axis] / period).astype(np.int64) % len(colors)
        return colors[idx]
    if kind == "checker":
        _, period, colors = rule
        colors = np.asarray(colors, dtype=float)
        parity = np.floor(p / period).astype(np.int64).sum(axis=1) % 2
        return colors[parity]
    if kind == "per_primitive":
        colors = np.asarray(rule[1], dtype=float)
        leaf = np.abs(_leaf_sdfs(spec.tree, p))
        return colors[np.argmin(leaf, axis=0)]
    raise ValueError(f"unknown color rule {kind!r}")


def sample_colored_pointcloud(spec: ShapeSpec, n: int, seed) -> np.ndarray:
    """(n, 6) surface points with colors, via rejection + Newton projection.

    Uniform candidates in [-1, 1]^3 are projected with p <- p - s(p) grad(p)
    (central-difference gradient) and accepted at |s| < 1e-4; deterministic
    per seed.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    collected = 0
    for _ in range(60):
        cand = rng.uniform(-1.0, 1.0, (max(2 * n, 1024), 3))
        for _ in range(12):
            s = eval_sdf(spec, cand)
            g = grad_sdf(spec, cand, h=1e-5)
            gn = np.maximum((g * g).sum(axis=1), 1e-12)
            cand = cand - (s / gn)[:, None] * g
        s = eval_sdf(spec, cand)
        ok = (np.abs(s) < 1e-4) & (np.abs(cand).max(axis=1) <= 1.0)
        good = cand[ok]
        if len(good):
            chunks.append(good)
            collected += len(good)
        if collected >= n:
            break
    else:
        raise RuntimeError(f"surface sampling failed for {spec.name!r}: degenerate spec?")
    pts = np.concatenate(chunks, axis=0)[:n]
    cols = eval_color(spec, pts)
    return np.concatenate([pts, cols], axis=1)


def sphere_trace_render(spec: ShapeSpec, cam: Camera, tol: float = 1e-4, max_steps: int = 256) -> RenderOut:
    """Ground-truth mask/depth by sphere tracing; semantics match rasterize_hard."""
    w, h = cam.resolution
    basis = cam.basis()
    right, up, fwd = basis[0], basis[1], basis[2]
    t_half = np.tan(cam.fov_y / 2.0)
    aspect = w / h
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    ndc_x = 2.0 * (jj + 0.5) / w - 1.0
    ndc_y = 1.0 - 2.0 * (ii + 0.5) / h
    dirs = (
        fwd[None, :]
        + right[None, :] * (ndc_x.reshape(-1) * t_half * aspect)[:, None]
        + up[None, :] * (ndc_y.reshape(-1) * t_half)[:, None]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cos_f = dirs @ fwd

    t = np.zeros(h * w)
    hit = np.zeros(h * w, dtype=bool)
    active = np.ones(h * w, dtype=bool)
    t_max = cam.far / np.maximum(cos_f, 1e-6)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        p = cam.eye[None, :] + t[idx, None] * dirs[idx]
        s = eval_sdf(spec, p)
        newly_hit = s < tol
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        t[idx] += np.maximum(s, 0.0)
        overshoot = t[idx] > t_max[idx]
        active[idx[overshoot]] = False
    z = t * cos_f
    valid = hit & (z >= cam.near) & (z <= cam.far)
    depth = np.where(valid, z, cam.far)
    return RenderOut(mask=valid.astype(np.float64).reshape(h, w), depth=depth.reshape(h, w))


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Uniform scale + translation fitting the tight bbox into [-0.95, 0.95]^3."""
    p = np.asarray(points, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    half = (hi - lo) / 2.0
    if half.max() <= 0:
        raise ValueError("degenerate bounding box")
    center = (hi + lo) / 2.0
    return (p - center) * (0.95 / half.max())


def desk4() -> list[ShapeSpec]:
    """The canonical 4-shape fixture: sphere, box, torus, sphere-box union."""
    return [
        ShapeSpec(
            name="sphere",
            tree=("sphere", np.zeros(3), 0.6),
            color_fn=("constant", (0.8, 0.25, 0.2)),
        ),
        ShapeSpec(
            name="box",
            tree=("box", np.zeros(3), np.array([0.55, 0.45, 0.38])),
            color_fn=("stripes", 2, 0.2, ((0.9, 0.85, 0.2), (0.2, 0.3, 0.8))),
        ),
        ShapeSpec(
            name="torus",
            tree=("torus", np.zeros(3), 0.55, 0.2),
            color_fn=("checker", 0.5, ((0.85, 0.85, 0.85), (0.15, 0.15, 0.15))),
        ),
        ShapeSpec(
            name="hybrid",
            tree=(
                "union",
                ("sphere", np.array([-0.28, 0.0, 0.0]), 0.5),
                ("box", np.array([0.3, 0.0, 0.0]), np.array([0.4, 0.36, 0.3])),
            ),
            color_fn=("per_primitive", ((0.9, 0.3, 0.3), (0.3, 0.5, 0.9))),
        ),
    ]


def get_dataset(name: str) -> list[ShapeSpec]:
    if name == "desk4":
        return desk4()
    raise ValueError(f"unknown dataset {name!r}")
