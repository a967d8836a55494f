"""Tetrahedral grids and differentiable marching tetrahedra.

Grids use the Kuhn (Freudenthal) 6-tet subdivision of each cube with a
globally consistent main diagonal, so faces between neighbouring cells
conform and every tet is stored with positive signed volume.  The sign
convention is s <= 0 inside; surface triangles are oriented with normals
toward s > 0.

The 16-entry case table is derived at import time on the canonical
positively-oriented tet by orienting each candidate triangle toward the
outside corners; positive-determinant affine maps preserve that orientation
on every grid tet, which the test suite re-verifies by brute force.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import scatter_add_1d, scatter_add_rows

TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


@dataclass
class TetGrid:
    resolution: int
    verts: np.ndarray  # ((r+1)^3, 3) in [-1, 1]^3
    tets: np.ndarray  # (6 r^3, 4) int64, positive signed volume

    @property
    def spacing(self) -> float:
        return 2.0 / self.resolution


@dataclass
class VertexFields:
    """Per-grid-vertex SDF values and (bounded) deformations."""

    sdf: Tensor | np.ndarray
    deform: Tensor | np.ndarray


@dataclass
class TriMesh:
    vertices: Tensor | np.ndarray  # (M, 3)
    faces: np.ndarray  # (F, 3) int64, CCW from outside
    colors: np.ndarray | None = None  # (M, 3) in [0, 1]

    @property
    def vertices_np(self) -> np.ndarray:
        return self.vertices.data if isinstance(self.vertices, Tensor) else self.vertices

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_np)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def _build_case_table() -> list[list[tuple[int, int, int]]]:
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    table: list[list[tuple[int, int, int]]] = []
    for case in range(16):
        inside = np.array([bool(case & (1 << v)) for v in range(4)])
        n_in = int(inside.sum())
        if n_in in (0, 4):
            table.append([])
            continue
        cross = [e for e, (a, b) in enumerate(TET_EDGES) if inside[a] != inside[b]]
        mid = {e: 0.5 * (verts[TET_EDGES[e][0]] + verts[TET_EDGES[e][1]]) for e in cross}
        outdir = verts[~inside].mean(axis=0) - verts[inside].mean(axis=0)

        def oriented(tri):
            m0, m1, m2 = (mid[e] for e in tri)
            normal = np.cross(m1 - m0, m2 - m0)
            return tri if float(normal @ outdir) > 0 else (tri[0], tri[2], tri[1])

        if n_in in (1, 3):
            table.append([oriented(tuple(cross))])
        else:
            # order the four crossing edges into a cycle (adjacent = shared corner)
            cycle = [cross[0]]
            remaining = set(cross[1:])
            while remaining:
                last = set(TET_EDGES[cycle[-1]])
                nxt = next(e for e in remaining if last & set(TET_EDGES[e]))
                cycle.append(nxt)
                remaining.discard(nxt)
            quad = [
                oriented((cycle[0], cycle[1], cycle[2])),
                oriented((cycle[0], cycle[2], cycle[3])),
            ]
            table.append(quad)
    return table


CASE_TABLE = _build_case_table()

_GRID_CACHE: dict[int, TetGrid] = {}


def build_grid(r: int) -> TetGrid:
    """Regular tet grid over [-1, 1]^3 with r cells per axis (cached)."""
    if r < 1:
        raise ValueError(f"resolution must be >= 1, got {r}")
    if r in _GRID_CACHE:
        return _GRID_CACHE[r]
    n = r + 1
    axis = np.linspace(-1.0, 1.0, n)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    ii, jj, kk = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    base = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)  # cell corners

    def vid(offset):
        p = base + offset
        return (p[:, 0] * n + p[:, 1]) * n + p[:, 2]

    tets = []
    eye = np.eye(3, dtype=np.int64)
    for perm in permutations(range(3)):
        sign = np.sign(np.linalg.det(eye[list(perm)].astype(float)))
        v0 = vid(np.zeros(3, dtype=np.int64))
        v1 = vid(eye[perm[0]])
        v2 = vid(eye[perm[0]] + eye[perm[1]])
        v3 = vid(np.ones(3, dtype=np.int64))
        if sign > 0:
            tets.append(np.stack([v0, v1, v2, v3], axis=1))
        else:
            tets.append(np.stack([v0, v2, v1, v3], axis=1))
    tets = np.concatenate(tets, axis=0).astype(np.int64)
    verts.setflags(write=False)
    tets.setflags(write=False)
    grid = TetGrid(resolution=r, verts=verts, tets=tets)
    _GRID_CACHE[r] = grid
    return grid


def tet_volumes(grid: TetGrid) -> np.ndarray:
    v = grid.verts[grid.tets]
    return np.linalg.det(v[:, 1:] - v[:, :1]) / 6.0


def bound_deform(raw, r: int):
    """Map raw deformation to |dv| < 0.99 * h/2 per axis (h = 2/r)."""
    limit = 0.99 * (2.0 / r) / 2.0
    if isinstance(raw, Tensor):
        return ad.tanh(raw) * limit
    return np.tanh(raw) * limit


def marching_tets(grid: TetGrid, fields: VertexFields) -> TriMesh:
    """Extract the s=0 surface; differentiable in sdf and deform.

    Vertex positions sit at linear zero crossings of straddling edges of the
    deformed grid, deduplicated by sorted edge key; faces are oriented with
    normals toward s > 0.  Case selection carries no gradient.
    """
    sdf_t = fields.sdf if isinstance(fields.sdf, Tensor) else None
    def_t = fields.deform if isinstance(fields.deform, Tensor) else None
    s = np.asarray(fields.sdf.data if sdf_t is not None else fields.sdf, dtype=np.float64)
    dv = np.asarray(fields.deform.data if def_t is not None else fields.deform, dtype=np.float64)
    nv = len(grid.verts)
    if s.shape != (nv,) or dv.shape != (nv, 3):
        raise ValueError("fields not sized to grid")

    inside = s <= 0.0
    tets = grid.tets
    code = (
        inside[tets[:, 0]] * 1
        + inside[tets[:, 1]] * 2
        + inside[tets[:, 2]] * 4
        + inside[tets[:, 3]] * 8
    )
    corner_edges = []  # (n_tris, 3, 2) global vertex pairs, sorted per edge
    for case in range(1, 15):
        tris = CASE_TABLE[case]
        if not tris:
            continue
        rows = np.nonzero(code == case)[0]
        if len(rows) == 0:
            continue
        sub = tets[rows]
        for tri in tris:
            pairs = np.empty((len(rows), 3, 2), dtype=np.int64)
            for c, e in enumerate(tri):
                a, b = TET_EDGES[e]
                pairs[:, c, 0] = sub[:, a]
                pairs[:, c, 1] = sub[:, b]
            corner_edges.append(pairs)

    if not corner_edges:
        verts_out = np.zeros((0, 3))
        parents = tuple(t for t in (sdf_t, def_t) if t is not None)
        vertices = ad.from_op(verts_out, parents, lambda g: []) if parents else verts_out
        return TriMesh(vertices=vertices, faces=np.zeros((0, 3), dtype=np.int64))

    pairs = np.concatenate(corner_edges, axis=0)  # (F, 3, 2)
    pairs.sort(axis=2)  # canonical undirected edge key
    flat = pairs.reshape(-1, 2)
    edges, inv = np.unique(flat, axis=0, return_inverse=True)
    faces = inv.reshape(-1, 3).astype(np.int64)

    ea, eb = edges[:, 0], edges[:, 1]
    sa, sb = s[ea], s[eb]
    va = grid.verts[ea] + dv[ea]
    vb = grid.verts[eb] + dv[eb]
    d = sb - sa
    verts_out = (sb[:, None] * va - sa[:, None] * vb) / d[:, None]

    parents = tuple(t for t in (sdf_t, def_t) if t is not None)
    if not parents:
        return TriMesh(vertices=verts_out, faces=faces)

    def bw(g):
        delta = va - vb  # (M, 3)
        proj = (g * delta).sum(axis=1)  # (M,)
        d2 = d * d
        out = []
        if sdf_t is not None:
            gs = np.zeros(nv)
            scatter_add_1d(gs, ea, proj * sb / d2)
            scatter_add_1d(gs, eb, -proj * sa / d2)
            out.append((sdf_t, gs))
        if def_t is not None:
            gd = np.zeros((nv, 3))
            scatter_add_rows(gd, ea, g * (sb / d)[:, None])
            scatter_add_rows(gd, eb, g * (-sa / d)[:, None])
            out.append((def_t, gd))
        return out

    vt = ad.from_op(verts_out, parents, bw)
    return TriMesh(vertices=vt, faces=faces)


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (K, 2) of a triangle list."""
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    e.sort(axis=1)
    return np.unique(e, axis=0)


def laplacian_loss(mesh: TriMesh) -> Tensor:
    """Mean over vertices of |v - mean(1-ring)|^2; isolated vertices contribute 0."""
    verts = ad.as_tensor(mesh.vertices)
    m = verts.shape[0]
    if m == 0:
        raise ValueError("mesh has no vertices")
    edges = mesh_edges(mesh.faces)
    if len(edges) == 0:
        return ad.tsum(verts * 0.0)
    deg = np.bincount(edges.reshape(-1), minlength=m).astype(np.float64)
    nb = ad.index_add(m, edges[:, 0], ad.take(verts, edges[:, 1])) + ad.index_add(
        m, edges[:, 1], ad.take(verts, edges[:, 0])
    )
    safe = np.maximum(deg, 1.0)[:, None]
    mask = (deg > 0).astype(np.float64)[:, None]
    diff = (verts - nb / safe) * mask
    return ad.tsum(diff * diff) / m


def sample_surface(mesh: TriMesh, n: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples; returns (points, face_idx, bary)."""
    if mesh.n_faces == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = mesh.vertices_np
    tri = v[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    fid = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1.0
    u[flip], w[flip] = 1.0 - u[flip], 1.0 - w[flip]
    bary = np.stack([1.0 - u - w, u, w], axis=1)
    pts = (tri[fid] * bary[:, :, None]).sum(axis=1)
    return pts, fid, bary


@dataclass
class WatertightReport:
    is_closed: bool
    boundary_edges: int
    non_manifold_edges: int


def watertight_report(mesh: TriMesh) -> WatertightReport:
    """Edge-incidence audit; closed needs every edge in exactly 2 opposed faces."""
    faces = mesh.faces
    if len(faces) == 0:
        return WatertightReport(is_closed=False, boundary_edges=0, non_manifold_edges=0)
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    und = np.sort(directed, axis=1)
    keys, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    boundary = int((counts == 1).sum())
    non_manifold = int((counts > 2).sum())
    # orientation check for edges shared by exactly two faces: directions must differ
    forward = directed[:, 0] < directed[:, 1]
    fwd_count = np.bincount(inv, weights=forward.astype(np.float64), minlength=len(keys))
    two = counts == 2
    misoriented = int((two & (fwd_count != 1)).sum())
    non_manifold += misoriented
    closed = boundary == 0 and non_manifold == 0
    return WatertightReport(is_closed=closed, boundary_edges=boundary, non_manifold_edges=non_manifold)
