"""Active prisms and degrees of freedom of the trace space on one slab.

Bulk functions on a slab are ``phi0(x) + t * phi1(x)`` with phi0, phi1
continuous P1; the trace space is their restriction to the discrete
space-time surface. Outer nodal basis functions are kept as a frame:
nothing is pruned even when their traces are (nearly) dependent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cutgeom import SurfacePatchSet
from .mesh import BackgroundMesh


class EmptyActiveSet(RuntimeError):
    pass


@dataclass(frozen=True)
class TraceSpaceSlab:
    slab: int
    active_triangles: np.ndarray  # sorted outer triangle indices
    active_vertices: np.ndarray  # sorted outer vertex indices
    vertex_dof: np.ndarray  # (n_vertices,), position in active_vertices or -1

    @property
    def n_dof(self) -> int:
        return 2 * len(self.active_vertices)

    def dof(self, vertex, family):
        """Global index of the phi0 (family 0) or phi1 (family 1) DOF of ``vertex``."""
        k = self.vertex_dof[vertex]
        return np.where(k >= 0, 2 * k + family, -1)

    def local_dofs(self, mesh: BackgroundMesh, tri: np.ndarray) -> np.ndarray:
        """``(..., 6)`` DOFs of outer triangles ordered [phi0 x 3 vertices, phi1 x 3 vertices]."""
        k = self.vertex_dof[mesh.triangles[tri]]
        return np.concatenate([2 * k, 2 * k + 1], axis=-1)

    def dof_table(self) -> np.ndarray:
        """Rows (dof, vertex, family)."""
        v = np.repeat(self.active_vertices, 2)
        fam = np.tile([0, 1], len(self.active_vertices))
        return np.column_stack([np.arange(self.n_dof), v, fam])


def mark_active(patches: SurfacePatchSet, min_measure: float = 0.0) -> np.ndarray:
    """Outer triangles owning at least one positive-area patch.

    ``min_measure > 0`` additionally drops triangles whose summed patch
    measure ``sum area * mu`` does not exceed it (small-cut pruning; off by
    default).
    """
    cut = patches.owner[patches.area > 0]
    if min_measure > 0:
        tot = np.zeros(patches.owner.max(initial=-1) + 1)
        np.add.at(tot, patches.owner, patches.area * patches.mu)
        cut = cut[tot[cut] > min_measure]
    owners = np.unique(cut)
    if len(owners) == 0:
        raise EmptyActiveSet(f"slab {patches.slab}: no prism is cut; surface left the domain?")
    return owners


def build_dofs(mesh: BackgroundMesh, active_triangles: np.ndarray, slab: int) -> TraceSpaceSlab:
    verts = np.unique(mesh.triangles[active_triangles])
    vmap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    vmap[verts] = np.arange(len(verts))
    return TraceSpaceSlab(slab, np.asarray(active_triangles), verts, vmap)


def build_trace_space(mesh: BackgroundMesh, patches: SurfacePatchSet,
                      min_measure: float = 0.0) -> TraceSpaceSlab:
    return build_dofs(mesh, mark_active(patches, min_measure), patches.slab)


def local_basis(mesh: BackgroundMesh, tri: np.ndarray, x: np.ndarray, t):
    """Values, spatial gradients and time derivatives of the 6 local functions.

    ``tri[...]`` selects outer triangles, ``x[..., 2]`` and ``t[...]`` the
    points. Returns arrays shaped ``(..., 6)``, ``(..., 6, 2)``, ``(..., 6)``.
    """
    lam = mesh.barycentric(tri, x)
    grad = np.broadcast_to(mesh.bary_grad[tri], lam.shape + (2,))
    t = np.broadcast_to(np.asarray(t, dtype=float), lam.shape[:-1])[..., None]
    val = np.concatenate([lam, t * lam], axis=-1)
    gx = np.concatenate([grad, t[..., None] * grad], axis=-2)
    dt = np.concatenate([np.zeros_like(lam), lam], axis=-1)
    return val, gx, dt


@dataclass(frozen=True)
class BasisEval:
    value: float
    grad: np.ndarray
    dt: float
    inside: bool


def eval_basis(space: TraceSpaceSlab, mesh: BackgroundMesh, dof: int, x, t: float,
               tri: int | None = None) -> BasisEval:
    """Evaluate one global DOF at ``(x, t)``.

    ``tri`` picks the owning outer triangle when ``x`` is on a shared edge.
    Outside the active support the function is zero and ``inside`` is False.
    """
    x = np.asarray(x, dtype=float)
    if tri is None:
        tri = int(mesh.locate(x[None])[0])
    if tri < 0 or tri not in set(space.active_triangles.tolist()):
        return BasisEval(0.0, np.zeros(2), 0.0, False)
    dofs = space.local_dofs(mesh, np.array(tri))
    hit = np.nonzero(dofs == dof)[0]
    if len(hit) == 0:
        return BasisEval(0.0, np.zeros(2), 0.0, True)
    val, gx, dt = local_basis(mesh, np.array(tri), x, t)
    j = hit[0]
    return BasisEval(float(val[j]), gx[j].copy(), float(dt[j]), True)
