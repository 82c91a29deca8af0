"""Discrete space-time surface per slab, time cross-sections and cut quadrature.

The zero set of the piecewise linear level-set interpolant on the Kuhn
tetrahedra of the refined prisms is a set of flat triangles in (x, y, t).
Each one is tagged with the outer (coarse) triangle that contains it, so
assembly can evaluate outer basis functions without a search.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .mesh import kuhn_local_tets
from .surface import DiscreteLevelSet


class GeometryError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# quadrature rules

_TRI_RULES = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.full(3, 1 / 3)),
}
# 6-point Dunavant rule (degree 4), used for degree 3
_a, _b = 0.445948490915965, 0.091576213509771
_TRI_RULES[3] = (
    np.array([[1 - 2 * _a, _a, _a], [_a, 1 - 2 * _a, _a], [_a, _a, 1 - 2 * _a],
              [1 - 2 * _b, _b, _b], [_b, 1 - 2 * _b, _b], [_b, _b, 1 - 2 * _b]]),
    np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
)


def triangle_rule(degree: int):
    """Barycentric points and weights (summing to 1) exact to ``degree``."""
    if degree not in _TRI_RULES:
        raise ValueError(f"unsupported quadrature degree {degree}; use 1, 2 or 3")
    return _TRI_RULES[degree]


def segment_rule(degree: int):
    """Gauss-Legendre points on [0, 1] and weights summing to 1."""
    if degree not in (1, 2, 3):
        raise ValueError(f"unsupported quadrature degree {degree}; use 1, 2 or 3")
    x, w = np.polynomial.legendre.leggauss((degree + 2) // 2)
    return 0.5 * (x + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# marching tetrahedra


@lru_cache(maxsize=None)
def _tet_cases():
    """Sign mask (bit i set when phi_i < 0) -> tuple of triangles of edges."""
    table = {}
    for mask in range(16):
        neg = [i for i in range(4) if mask >> i & 1]
        pos = [i for i in range(4) if not mask >> i & 1]
        if len(neg) in (1, 3):
            lone, rest = (neg, pos) if len(neg) == 1 else (pos, neg)
            i = lone[0]
            table[mask] = (((i, rest[0]), (i, rest[1]), (i, rest[2])),)
        elif len(neg) == 2:
            (i, j), (k, l) = neg, pos
            table[mask] = (((i, k), (i, l), (j, l)), ((i, k), (j, l), (j, k)))
    return table


def _edge_points(pts, phi, key, a, b):
    """Zero crossing on edges ``(a, b)``, computed from the lower-key end.

    Interpolating from a canonical endpoint makes the point bitwise equal
    for every element sharing the edge.
    """
    r = np.arange(len(pts))
    a = np.broadcast_to(a, r.shape)
    b = np.broadcast_to(b, r.shape)
    swap = key[r, a] > key[r, b]
    ia = np.where(swap, b, a)
    ib = np.where(swap, a, b)
    pa, pb = pts[r, ia], pts[r, ib]
    fa, fb = phi[r, ia], phi[r, ib]
    s = fa / (fa - fb)
    return pa + s[:, None] * (pb - pa)


def cut_tetrahedron(xyz, phi) -> np.ndarray:
    """Zero set of the linear interpolant on one tetrahedron as ``(k, 3, 3)``
    triangles: k = 0, 1 (one vertex separated) or 2 (quad, two and two)."""
    xyz = np.asarray(xyz, dtype=float)[None]
    phi = np.asarray(phi, dtype=float)[None]
    if np.any(phi == 0):
        raise GeometryError("vertex values must be nonzero; perturb exact zeros first")
    key = np.arange(4)[None]
    mask = int(((phi[0] < 0) * (1 << np.arange(4))).sum())
    tris = [np.stack([_edge_points(xyz, phi, key, a, b)[0] for a, b in edges])
            for edges in _tet_cases().get(mask, ())]
    return np.array(tris).reshape(-1, 3, 3)


@dataclass(frozen=True)
class SurfacePatchSet:
    """Flat triangles approximating the space-time surface inside one slab.

    ``normal`` is the unit space-time normal (nu_x, nu_y, nu_t) pointing to
    increasing phi; ``mu = |nu_x|`` converts surface measure to ds dt.
    """

    slab: int
    t0: float
    t1: float
    vertices: np.ndarray  # (P, 3, 3)
    owner: np.ndarray  # (P,) outer triangle index
    normal: np.ndarray  # (P, 3)
    area: np.ndarray  # (P,)

    @property
    def n_patches(self) -> int:
        return len(self.owner)

    @property
    def mu(self) -> np.ndarray:
        return np.hypot(self.normal[:, 0], self.normal[:, 1])

    @property
    def spatial_normal(self) -> np.ndarray:
        return self.normal[:, :2] / self.mu[:, None]

    @property
    def normal_velocity(self) -> np.ndarray:
        return -self.normal[:, 2] / self.mu

    def quadrature(self, degree: int = 2):
        """Points ``(P, q, 3)`` and area-scaled weights ``(P, q)``."""
        bary, w = triangle_rule(degree)
        pts = np.einsum("qa,pad->pqd", bary, self.vertices)
        return pts, self.area[:, None] * w[None, :]

    def measure(self, degree: int = 2) -> float:
        """``sum area * mu``, i.e. the discrete ``int int 1 ds dt``."""
        _, w = self.quadrature(degree)
        return float(np.sum(w * self.mu[:, None]))

    def restrict(self, keep: np.ndarray) -> SurfacePatchSet:
        """Patches selected by the boolean mask ``keep``."""
        return replace(self, vertices=self.vertices[keep], owner=self.owner[keep],
                       normal=self.normal[keep], area=self.area[keep])

    def containment_error(self, mesh) -> float:
        """Largest violation of 'patch inside its owner prism' (0 when contained)."""
        x = self.vertices[..., :2]
        lam = mesh.barycentric(np.repeat(self.owner[:, None], 3, axis=1), x)
        t = self.vertices[..., 2]
        return float(max(0.0, -lam.min(initial=0.0), (self.t0 - t).max(initial=0.0),
                         (t - self.t1).max(initial=0.0)))


def extract_patches(slab: int, dls: DiscreteLevelSet) -> SurfacePatchSet:
    """Marching tetrahedra over the refined prisms of slab ``slab`` (1-based)."""
    fine = dls.fine
    tris = fine.triangles
    nv = fine.n_vertices
    pts_all, phi_all, key_all, own_all = [], [], [], []
    for sub in (0, 1):
        lo = 2 * (slab - 1) + sub
        vals = dls.values[[lo, lo + 1]][:, tris]
        cut = (vals.min(axis=(0, 2)) < 0) & (vals.max(axis=(0, 2)) > 0)
        ids = np.nonzero(cut)[0]
        if len(ids) == 0:
            continue
        local = kuhn_local_tets(tris[ids])  # (m, 3, 4, 2)
        vid = tris[ids][np.arange(len(ids))[:, None, None], local[..., 0]]
        lev = local[..., 1] + lo
        xyz = np.concatenate([fine.vertices[vid], dls.times[lev][..., None]], axis=-1)
        pts_all.append(xyz.reshape(-1, 4, 3))
        phi_all.append(dls.values[lev, vid].reshape(-1, 4))
        key_all.append((lev * nv + vid).reshape(-1, 4))
        own_all.append(np.repeat(dls.parent[ids], 3))
    t0, t1 = dls.times[2 * (slab - 1)], dls.times[2 * slab]
    if not pts_all:
        empty = np.zeros((0, 3, 3))
        return SurfacePatchSet(slab, t0, t1, empty, np.zeros(0, int), np.zeros((0, 3)), np.zeros(0))

    pts = np.concatenate(pts_all)
    phi = np.concatenate(phi_all)
    key = np.concatenate(key_all)
    owner = np.concatenate(own_all)

    mask = ((phi < 0) * (1 << np.arange(4))).sum(axis=1)
    verts, owners, grads = [], [], []
    # tetrahedron gradients of the linear interpolant
    D = pts[:, 1:] - pts[:, :1]
    dphi = phi[:, 1:] - phi[:, :1]
    for m, tri_edges in sorted(_tet_cases().items()):
        sel = np.nonzero(mask == m)[0]
        if len(sel) == 0:
            continue
        g = np.linalg.solve(D[sel], dphi[sel][..., None])[..., 0]
        for edges in tri_edges:
            corners = [_edge_points(pts[sel], phi[sel], key[sel], a, b) for a, b in edges]
            verts.append(np.stack(corners, axis=1))
            owners.append(owner[sel])
            grads.append(g)
            # keep tet order within a case for determinism; sorting by owner below
    verts = np.concatenate(verts)
    owners = np.concatenate(owners)
    grads = np.concatenate(grads)

    gnorm = np.linalg.norm(grads, axis=1)
    gx = np.hypot(grads[:, 0], grads[:, 1])
    if np.any(gx <= 1e-14 * gnorm):
        raise GeometryError(f"slab {slab}: level-set gradient has no spatial component")
    normal = grads / gnorm[:, None]
    cr = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
    area = 0.5 * np.linalg.norm(cr, axis=1)
    keep = area > 0
    order = np.argsort(owners[keep], kind="stable")
    return SurfacePatchSet(slab, float(t0), float(t1), verts[keep][order], owners[keep][order],
                           normal[keep][order], area[keep][order])


# ---------------------------------------------------------------------------
# cross sections


@dataclass(frozen=True)
class CrossSection:
    """Segments of the discrete curve at a fixed time."""

    t: float
    segments: np.ndarray  # (S, 2, 2)
    owner: np.ndarray  # (S,) outer triangle
    normals: np.ndarray  # (S, 2)
    # fine-mesh edge carrying each endpoint (marching-triangle sections only)
    edge_keys: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        d = self.segments[:, 1] - self.segments[:, 0]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def length(self) -> float:
        return float(self.lengths.sum())

    def restrict(self, keep: np.ndarray) -> CrossSection:
        keys = None if self.edge_keys is None else self.edge_keys[keep]
        return CrossSection(self.t, self.segments[keep], self.owner[keep], self.normals[keep], keys)

    def quadrature(self, degree: int = 2):
        s, w = segment_rule(degree)
        a, b = self.segments[:, 0], self.segments[:, 1]
        pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        return pts, self.lengths[:, None] * w[None, :]


def _marching_triangles(dls: DiscreteLevelSet, level: int, t: float) -> CrossSection:
    fine = dls.fine
    tris = fine.triangles
    vals = dls.values[level][tris]
    cut = (vals.min(axis=1) < 0) & (vals.max(axis=1) > 0)
    ids = np.nonzero(cut)[0]
    v = vals[ids]
    neg = v < 0
    lone_is_neg = neg.sum(axis=1) == 1
    lone = np.where(lone_is_neg, np.argmax(neg, axis=1), np.argmin(neg, axis=1))
    j = (lone + 1) % 3
    k = (lone + 2) % 3
    pts = fine.vertices[tris[ids]]
    key = tris[ids]
    p = _edge_points(pts, v, key, lone, j)
    q = _edge_points(pts, v, key, lone, k)
    g = np.einsum("sa,sad->sd", v, fine.bary_grad[ids])
    n = g / np.linalg.norm(g, axis=1, keepdims=True)
    nv = fine.n_vertices
    r = np.arange(len(ids))

    def ekey(a, b):
        va, vb = key[r, a], key[r, b]
        return np.minimum(va, vb) * nv + np.maximum(va, vb)

    keys = np.stack([ekey(lone, j), ekey(lone, k)], axis=1)
    order = np.argsort(dls.parent[ids], kind="stable")
    return CrossSection(float(t), np.stack([p, q], axis=1)[order], dls.parent[ids][order], n[order],
                        keys[order])


def _slice_patches(patches: SurfacePatchSet, t: float) -> CrossSection:
    v = patches.vertices
    d = v[..., 2] - t
    pos = d >= 0
    found = np.zeros(len(v), dtype=int)
    seg = np.zeros((len(v), 2, 2))
    for a, b in ((0, 1), (1, 2), (2, 0)):
        cross = pos[:, a] != pos[:, b]
        s = d[:, a] / np.where(cross, d[:, a] - d[:, b], 1.0)
        p = v[:, a, :2] + s[:, None] * (v[:, b, :2] - v[:, a, :2])
        slot = np.minimum(found, 1)
        rows = np.nonzero(cross)[0]
        seg[rows, slot[rows]] = p[rows]
        found += cross
    sel = found == 2
    return CrossSection(float(t), seg[sel], patches.owner[sel], patches.spatial_normal[sel])


def extract_cross_section(t: float, dls: DiscreteLevelSet,
                          patches: SurfacePatchSet | None = None) -> CrossSection:
    """Discrete curve at time ``t``.

    At refined time levels (slab boundaries among them) the curve is the
    zero set of the nodal P1 interpolant, single-valued from both sides.
    Between levels it is the slice of the slab's space-time patches.
    """
    level = dls.level_index(t)
    if level is not None:
        return _marching_triangles(dls, level, t)
    if patches is None:
        raise GeometryError(f"time {t} lies between refined levels; patches are required")
    if not patches.t0 < t < patches.t1:
        raise GeometryError(f"time {t} outside slab ({patches.t0}, {patches.t1}]")
    return _slice_patches(patches, t)


def unmatched_endpoints(xs: CrossSection, tol: float = 1e-12) -> int:
    """Number of segment endpoints not matched by exactly one partner.

    Endpoints pair up through the mesh edge they lie on; paired points must
    agree to ``tol``. A curve through (nearly) a mesh vertex produces several
    distinct endpoints at the same location, so matching by distance alone
    would be ambiguous.
    """
    if xs.edge_keys is None:
        raise GeometryError("closedness check needs a marching-triangle cross section")
    if len(xs.segments) == 0:
        return 0
    keys = xs.edge_keys.ravel()
    pts = xs.segments.reshape(-1, 2)
    order = np.argsort(keys, kind="stable")
    keys, pts = keys[order], pts[order]
    uniq, start, counts = np.unique(keys, return_index=True, return_counts=True)
    bad = int(np.sum(counts[counts != 2]))
    pair = start[counts == 2]
    gap = np.linalg.norm(pts[pair] - pts[pair + 1], axis=1)
    return bad + 2 * int(np.sum(gap > tol))


def vertex_levelset_distance(patches: SurfacePatchSet, surface) -> float:
    """Max |phi| over patch vertices; phi is a distance function for the catalog."""
    v = patches.vertices.reshape(-1, 3)
    if len(v) == 0:
        return 0.0
    return float(np.max(np.abs(surface.phi(v[:, :2], v[:, 2]))))


def write_vtk(patches: SurfacePatchSet, path, cell_data: dict | None = None) -> Path:
    """Legacy ASCII VTK POLYDATA of the patches in (x, y, t) coordinates.

    Cell scalars ``owner``, ``mu`` and ``normal_velocity`` are always written;
    ``cell_data`` adds more (name -> one value per patch).
    """
    path = Path(path)
    P = patches.n_patches
    data = {"owner": patches.owner.astype(float), "mu": patches.mu,
            "normal_velocity": patches.normal_velocity}
    for name, arr in (cell_data or {}).items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (P,):
            raise ValueError(f"cell data {name!r} has shape {arr.shape}, expected ({P},)")
        data[name] = arr
    pts = patches.vertices.reshape(-1, 3)
    lines = ["# vtk DataFile Version 3.0", f"space-time surface slab {patches.slab}", "ASCII",
             "DATASET POLYDATA", f"POINTS {len(pts)} double"]
    lines += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in pts]
    lines.append(f"POLYGONS {P} {4 * P}")
    lines += [f"3 {3 * i} {3 * i + 1} {3 * i + 2}" for i in range(P)]
    lines.append(f"CELL_DATA {P}")
    for name, arr in data.items():
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{v:.17g}" for v in arr]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path
