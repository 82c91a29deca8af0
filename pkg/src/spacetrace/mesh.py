"""Background triangulations, uniform time partitions and prism subdivision."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Invalid mesh or partition parameters."""


@dataclass(frozen=True)
class BackgroundMesh:
    """Conforming triangulation of a rectangle whose triangles fit inside grid cells.

    ``cell_tris`` lists, for every cell of the ``nx`` x ``ny`` grid, the two
    triangles it contains; it is what makes point location O(1).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    h: float
    bounds: tuple[float, float, float, float]
    nx: int
    ny: int
    cell_tris: np.ndarray = field(repr=False)
    # barycentric maps: lambda_a(x) = bary_const[t, a] + bary_grad[t, a] @ x
    bary_grad: np.ndarray = field(init=False, repr=False)
    bary_const: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(det <= 0):
            raise MeshError("triangles must be positively oriented")
        # inverse of [d1 d2] gives gradients of lambda_1, lambda_2
        g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
        g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
        g0 = -g1 - g2
        grad = np.stack([g0, g1, g2], axis=1)
        const = -np.einsum("tad,td->ta", grad, p[:, 0])
        const[:, 0] += 1.0
        object.__setattr__(self, "bary_grad", grad)
        object.__setattr__(self, "bary_const", const)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def barycentric(self, tri: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of points ``x[..., 2]`` in triangles ``tri[...]``."""
        return self.bary_const[tri] + np.einsum("...ad,...d->...a", self.bary_grad[tri], x)

    def locate(self, x: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Triangle index containing each point; -1 outside the domain."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x0, x1, y0, y1 = self.bounds
        hx = (x1 - x0) / self.nx
        hy = (y1 - y0) / self.ny
        i = np.clip(np.floor((x[:, 0] - x0) / hx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor((x[:, 1] - y0) / hy).astype(int), 0, self.ny - 1)
        cand = self.cell_tris[j * self.nx + i]
        lam0 = self.barycentric(cand[:, 0], x).min(axis=1)
        lam1 = self.barycentric(cand[:, 1], x).min(axis=1)
        out = np.where(lam0 >= lam1, cand[:, 0], cand[:, 1])
        best = np.maximum(lam0, lam1)
        out[best < -tol] = -1
        return out

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)


def _cell_map(vertices, triangles, bounds, nx, ny):
    x0, x1, y0, y1 = bounds
    c = vertices[triangles].mean(axis=1)
    i = np.floor((c[:, 0] - x0) / ((x1 - x0) / nx)).astype(int)
    j = np.floor((c[:, 1] - y0) / ((y1 - y0) / ny)).astype(int)
    cell = j * nx + i
    order = np.argsort(cell, kind="stable")
    counts = np.bincount(cell, minlength=nx * ny)
    if np.any(counts != 2):
        raise MeshError("every grid cell must contain exactly two triangles")
    return order.reshape(nx * ny, 2)


def build_uniform_mesh(bounds, h: float) -> BackgroundMesh:
    """Structured mesh of ``bounds = (x0, x1, y0, y1)`` with cells of size <= h.

    Each cell is split along one diagonal, alternating in a checkerboard
    pattern, so every triangle is right-angled and min angle is 45 degrees.
    """
    x0, x1, y0, y1 = map(float, bounds)
    if not (h > 0 and math.isfinite(h)):
        raise MeshError(f"mesh size must be positive, got {h}")
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate bounds {bounds}")
    nx = max(1, math.ceil((x1 - x0) / h - 1e-10))
    ny = max(1, math.ceil((y1 - y0) / h - 1e-10))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    tris = []
    for j in range(ny):
        for i in range(nx):
            v00 = j * (nx + 1) + i
            v10 = v00 + 1
            v01 = v00 + nx + 1
            v11 = v01 + 1
            if (i + j) % 2 == 0:
                tris += [(v00, v10, v11), (v00, v11, v01)]
            else:
                tris += [(v00, v10, v01), (v10, v11, v01)]
    triangles = np.array(tris, dtype=np.int64)
    return BackgroundMesh(vertices, triangles, float(h), (x0, x1, y0, y1), nx, ny,
                          _cell_map(vertices, triangles, (x0, x1, y0, y1), nx, ny))


def refine_mesh(mesh: BackgroundMesh) -> tuple[BackgroundMesh, np.ndarray]:
    """Regular (red) refinement: each triangle is split into four.

    Returns the refined mesh and ``parent[child] -> coarse triangle``.
    """
    x0, x1, y0, y1 = mesh.bounds
    nx, ny = 2 * mesh.nx, 2 * mesh.ny
    # refined vertices are the (2nx+1) x (2ny+1) grid; coarse vertex (i, j) -> (2i, 2j)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def gid(ij):
        return ij[..., 1] * (nx + 1) + ij[..., 0]

    cx = mesh.nx + 1
    coarse_ij = np.stack([mesh.triangles % cx, mesh.triangles // cx], axis=-1) * 2
    a, b, c = coarse_ij[:, 0], coarse_ij[:, 1], coarse_ij[:, 2]
    ab, bc, ca = (a + b) // 2, (b + c) // 2, (c + a) // 2
    children = np.stack([
        np.stack([gid(a), gid(ab), gid(ca)], axis=1),
        np.stack([gid(ab), gid(b), gid(bc)], axis=1),
        np.stack([gid(ca), gid(bc), gid(c)], axis=1),
        np.stack([gid(ab), gid(bc), gid(ca)], axis=1),
    ], axis=1)
    triangles = children.reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)
    fine = BackgroundMesh(vertices, triangles, mesh.h / 2, mesh.bounds, nx, ny,
                          _cell_map(vertices, triangles, mesh.bounds, nx, ny))
    return fine, parent


@dataclass(frozen=True)
class TimePartition:
    T: float
    N: int
    times: np.ndarray

    @property
    def dt(self) -> float:
        return self.T / self.N

    def interval(self, n: int) -> tuple[float, float]:
        """Bounds of slab ``n`` (1-based, as I_n = (t_{n-1}, t_n])."""
        return float(self.times[n - 1]), float(self.times[n])


def build_time_partition(T: float, N: int) -> TimePartition:
    if not T > 0:
        raise MeshError(f"final time must be positive, got {T}")
    if int(N) != N or N < 1:
        raise MeshError(f"slab count must be a positive integer, got {N}")
    N = int(N)
    times = np.arange(N + 1) * (T / N)
    times[-1] = T
    return TimePartition(float(T), N, times)


@dataclass(frozen=True)
class Prism:
    """Space-time prism ``triangle x (t_{n-1}, t_n]``."""

    triangle: int
    slab: int

    def volume(self, mesh: BackgroundMesh, partition: TimePartition) -> float:
        return float(mesh.areas()[self.triangle]) * partition.dt


def kuhn_local_tets(vertex_ids: np.ndarray) -> np.ndarray:
    """Kuhn split of ``triangle x interval`` into 3 tetrahedra.

    ``vertex_ids[..., 3]`` are global vertex numbers of the triangle. The
    result ``[..., 3 tets, 4 nodes, 2]`` holds (local vertex position, level)
    pairs with level 0 = bottom, 1 = top. Vertices are ordered by global id,
    so every quadrilateral face is cut along the diagonal from its lower-id
    bottom node to its higher-id top node, independent of which prism
    looks at it.
    """
    order = np.argsort(vertex_ids, axis=-1, kind="stable")
    a, b, c = order[..., 0], order[..., 1], order[..., 2]
    z = np.zeros_like(a)
    o = np.ones_like(a)

    def node(v, lev):
        return np.stack([v, lev], axis=-1)

    tets = [
        [node(a, z), node(b, z), node(c, z), node(c, o)],
        [node(a, z), node(b, z), node(b, o), node(c, o)],
        [node(a, z), node(a, o), node(b, o), node(c, o)],
    ]
    return np.stack([np.stack(t, axis=-2) for t in tets], axis=-3)


def prism_to_tetrahedra(prism: Prism, mesh: BackgroundMesh,
                        partition: TimePartition) -> np.ndarray:
    """Coordinates ``(3, 4, 3)`` in (x, y, t) of the Kuhn tetrahedra of a prism."""
    tri = mesh.triangles[prism.triangle]
    t0, t1 = partition.interval(prism.slab)
    local = kuhn_local_tets(tri)
    xy = mesh.vertices[tri[local[..., 0]]]
    t = np.where(local[..., 1] == 0, t0, t1)
    return np.concatenate([xy, t[..., None]], axis=-1)


def tet_volumes(tets: np.ndarray) -> np.ndarray:
    d = tets[..., 1:, :] - tets[..., :1, :]
    return np.abs(np.linalg.det(d)) / 6.0
