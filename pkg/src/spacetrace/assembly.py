"""Per-slab assembly of the space-time trace FEM system.

Component matrices, with ``A[i, j] = form(trial_j, test_i)``:

``M``  material derivative ``int int (d_t u + w . grad u) v``
``K``  tangential diffusion ``int int grad_G u . grad_G v``
``C``  reaction ``int int (div_G w) u v``
``J``  bottom cross-section mass ``(u_+, v_+)`` at ``t_{n-1}``
``T``  top cross-section mass ``(u_-, v_-)`` at ``t_n``
``M0`` space-time mass ``int int u v``
``S``  mean stabilization ``sum_r alpha_r z_r z_r^T``
``G``  coupling ``(u^{n-1}_-, v_+)`` to the previous slab's DOFs

All ``int int . ds dt`` integrals run over the discrete patches with the
metric factor ``mu``. Three algebraically equivalent (on exact geometry)
ways of combining them are offered:

``direct``        ``M + nu K + C + J + S``
``conservative``  ``T - M^T + nu K + S``  (time derivative moved to the test
                  function; constants and ``t - t_{n-1}`` are tested exactly,
                  so the discrete mass identities hold to round-off)
``skew``          ``(M - M^T)/2 + (T + J)/2 + C/2 + nu K + S`` (the energy
                  identity holds exactly on the discrete surface)
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .cutgeom import CrossSection, SurfacePatchSet, extract_cross_section, extract_patches
from .mesh import BackgroundMesh, TimePartition
from .surface import DiscreteLevelSet, ProblemSpec
from .tracespace import TraceSpaceSlab, build_trace_space, local_basis

FORMULATIONS = ("direct", "conservative", "skew")
VELOCITIES = ("exact", "tangent")


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SlabGeometry:
    """Everything geometric one slab needs: patches and cross sections."""

    slab: int
    t0: float
    t1: float
    patches: SurfacePatchSet
    bottom: CrossSection
    top: CrossSection
    stab_times: np.ndarray
    stab_weights: np.ndarray  # Gauss weights scaled to the interval
    stab_sections: tuple[CrossSection, ...]

    def restrict(self, triangles: np.ndarray) -> SlabGeometry:
        """Drop patches and segments owned by outer triangles not in ``triangles``."""
        def keep(owner):
            return np.isin(owner, triangles)

        return replace(self, patches=self.patches.restrict(keep(self.patches.owner)),
                       bottom=self.bottom.restrict(keep(self.bottom.owner)),
                       top=self.top.restrict(keep(self.top.owner)),
                       stab_sections=tuple(xs.restrict(keep(xs.owner)) for xs in self.stab_sections))


def gauss_nodes(t0: float, t1: float, k: int):
    x, w = np.polynomial.legendre.leggauss(k)
    return t0 + 0.5 * (t1 - t0) * (x + 1.0), 0.5 * (t1 - t0) * w


def build_slab_geometry(slab: int, dls: DiscreteLevelSet, partition: TimePartition,
                        stab_nodes: int = 2) -> SlabGeometry:
    if stab_nodes < 1:
        raise ValueError("stabilization needs at least one quadrature node")
    t0, t1 = partition.interval(slab)
    patches = extract_patches(slab, dls)
    bottom = extract_cross_section(t0, dls)
    top = extract_cross_section(t1, dls)
    xi, wi = gauss_nodes(t0, t1, stab_nodes)
    sections = tuple(extract_cross_section(float(x), dls, patches) for x in xi)
    return SlabGeometry(slab, t0, t1, patches, bottom, top, xi, wi, sections)


@dataclass
class SlabSystem:
    slab: int
    space: TraceSpaceSlab
    formulation: str
    nu: float
    sigma: float
    M: sp.csr_matrix
    K: sp.csr_matrix
    C: sp.csr_matrix
    J: sp.csr_matrix
    T: sp.csr_matrix
    M0: sp.csr_matrix
    G: sp.csr_matrix | None
    z: np.ndarray  # (k, n_dof)
    alpha: np.ndarray  # (k,)
    f_load: np.ndarray
    inflow: np.ndarray
    A_base: sp.csr_matrix = field(init=False)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A_base = combine(self.formulation, self.nu, self.M, self.K, self.C, self.J, self.T)

    @property
    def n_dof(self) -> int:
        return self.space.n_dof

    @property
    def S(self) -> sp.csr_matrix:
        if self.sigma == 0 or len(self.alpha) == 0:
            return sp.csr_matrix((self.n_dof, self.n_dof))
        zs = self.z * np.sqrt(self.alpha)[:, None]
        return sp.csr_matrix(zs.T @ zs)

    @property
    def A(self) -> sp.csr_matrix:
        return (self.A_base + self.S).tocsr()

    @property
    def b(self) -> np.ndarray:
        return self.f_load + self.inflow

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``A @ x`` without forming the dense-ish stabilization block."""
        y = self.A_base @ x
        if self.sigma and len(self.alpha):
            y = y + self.z.T @ (self.alpha * (self.z @ x))
        return y


def combine(formulation, nu, M, K, C, J, T):
    if formulation == "direct":
        A = M + nu * K + C + J
    elif formulation == "conservative":
        A = T - M.T + nu * K
    elif formulation == "skew":
        A = 0.5 * (M - M.T) + 0.5 * (T + J) + 0.5 * C + nu * K
    else:
        raise ValueError(f"unknown formulation {formulation!r}; choose from {FORMULATIONS}")
    return A.tocsr()


def _sparse(rows, cols, vals, n_rows, n_cols=None):
    n_cols = n_rows if n_cols is None else n_cols
    # duplicate triplets are summed in the given order: deterministic
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(n_rows, n_cols)).tocsr()


def _pairs(dofs):
    r = np.broadcast_to(dofs[:, :, None], dofs.shape + (dofs.shape[-1],))
    c = np.broadcast_to(dofs[:, None, :], r.shape)
    return r, c


def section_basis(mesh: BackgroundMesh, space: TraceSpaceSlab, xs: CrossSection, degree: int):
    """Basis values of ``space`` on the cross section, with quadrature weights and DOFs."""
    pts, w = xs.quadrature(degree)
    tri = np.broadcast_to(xs.owner[:, None], w.shape)
    val, _, _ = local_basis(mesh, tri, pts, xs.t)
    dofs = space.local_dofs(mesh, xs.owner)
    return pts, w, val, dofs


def section_mass(mesh, space, xs, degree):
    _, w, val, dofs = section_basis(mesh, space, xs, degree)
    _check_dofs(dofs, xs.t)
    loc = np.einsum("sq,sqi,sqj->sij", w, val, val)
    r, c = _pairs(dofs)
    return _sparse(r, c, loc, space.n_dof)


def section_integrals(mesh, space, xs, degree):
    """Vector of ``int_{Gamma_h(t)} phi_i ds``."""
    _, w, val, dofs = section_basis(mesh, space, xs, degree)
    _check_dofs(dofs, xs.t)
    z = np.zeros(space.n_dof)
    np.add.at(z, dofs.ravel(), np.einsum("sq,sqi->si", w, val).ravel())
    return z


def _check_dofs(dofs, where):
    if np.any(dofs < 0):
        raise AssemblyError(f"geometry at {where} references a prism without DOFs")


def assemble_slab(mesh: BackgroundMesh, geom: SlabGeometry, problem: ProblemSpec,
                  space: TraceSpaceSlab | None = None, prev=None, degree: int = 2,
                  formulation: str = "direct", velocity: str = "exact") -> SlabSystem:
    """Assemble slab ``geom.slab``.

    ``prev`` is ``(space, coefficients)`` of slab n-1 and is required for
    n > 1; for n = 1 the initial data enters through the inflow vector.

    ``velocity="tangent"`` replaces the normal component of ``w`` by the
    patch normal velocity ``V_h`` in the material derivative, so ``(w_h, 1)``
    is tangent to the discrete space-time surface and ``d_t + w_h . grad``
    only differentiates along it.
    """
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}; choose from {FORMULATIONS}")
    if velocity not in VELOCITIES:
        raise ValueError(f"unknown velocity {velocity!r}; choose from {VELOCITIES}")
    patches = geom.patches
    space = space or build_trace_space(mesh, patches)
    n = space.n_dof
    surf = problem.surface

    pts, w = patches.quadrature(degree)
    wm = w * patches.mu[:, None]
    x, t = pts[..., :2], pts[..., 2]
    tri = np.broadcast_to(patches.owner[:, None], w.shape)
    dofs = space.local_dofs(mesh, patches.owner)
    if np.any(dofs < 0):
        raise AssemblyError(f"slab {geom.slab}: patch owned by an inactive prism")

    val, gx, dt = local_basis(mesh, tri, x, t)
    wfield = surf.w(x, t)
    nh = patches.spatial_normal
    if velocity == "tangent":
        beta = patches.normal_velocity[:, None] - np.einsum("pqd,pd->pq", wfield, nh)
        wfield = wfield + beta[..., None] * nh[:, None, :]
    matder = dt + np.einsum("pqd,pqid->pqi", wfield, gx)
    gn = np.einsum("pqid,pd->pqi", gx, nh)
    gtan = gx - gn[..., None] * nh[:, None, None, :]
    divw = surf.div_gamma_w(x, t)

    r, c = _pairs(dofs)
    M = _sparse(r, c, np.einsum("pq,pqi,pqj->pij", wm, val, matder), n)
    K = _sparse(r, c, np.einsum("pq,pqid,pqjd->pij", wm, gtan, gtan), n)
    C = _sparse(r, c, np.einsum("pq,pq,pqi,pqj->pij", wm, divw, val, val), n)
    M0 = _sparse(r, c, np.einsum("pq,pqi,pqj->pij", wm, val, val), n)

    fq = problem.f(x, t)
    correction = (0.0, 0.0)
    if problem.zero_mean_rhs:
        tau = t - geom.t0
        gram = np.array([[wm.sum(), (wm * tau).sum()], [(wm * tau).sum(), (wm * tau**2).sum()]])
        rhs = np.array([(wm * fq).sum(), (wm * fq * tau).sum()])
        a, bcoef = np.linalg.solve(gram, rhs)
        fq = fq - a - bcoef * tau
        correction = (float(a), float(bcoef))
    f_load = np.zeros(n)
    np.add.at(f_load, dofs.ravel(), np.einsum("pq,pq,pqi->pi", wm, fq, val).ravel())

    J = section_mass(mesh, space, geom.bottom, degree)
    T = section_mass(mesh, space, geom.top, degree)

    G = None
    info = {"rhs_mean_correction": correction, "dropped_coupling_points": 0}
    if geom.slab == 1:
        bpts, bw, bval, bdofs = section_basis(mesh, space, geom.bottom, degree)
        _check_dofs(bdofs, geom.t0)
        inflow = np.zeros(n)
        u0 = problem.u0(bpts)
        np.add.at(inflow, bdofs.ravel(), np.einsum("sq,sq,sqi->si", bw, u0, bval).ravel())
    else:
        if prev is None:
            raise AssemblyError(f"slab {geom.slab}: previous slab solution is required")
        pspace, pcoef = prev
        _, bw, bval, bdofs = section_basis(mesh, space, geom.bottom, degree)
        _check_dofs(bdofs, geom.t0)
        pdofs = pspace.local_dofs(mesh, geom.bottom.owner)
        ok = np.all(pdofs >= 0, axis=1)
        info["dropped_coupling_points"] = int(np.sum(~ok))
        loc = np.einsum("sq,sqi,sqj->sij", bw[ok], bval[ok], bval[ok])
        rr = np.broadcast_to(bdofs[ok][:, :, None], loc.shape)
        cc = np.broadcast_to(pdofs[ok][:, None, :], loc.shape)
        G = _sparse(rr, cc, loc, n, pspace.n_dof)
        inflow = G @ pcoef

    z = np.array([section_integrals(mesh, space, xs, degree) for xs in geom.stab_sections])
    alpha = problem.sigma * geom.stab_weights
    return SlabSystem(geom.slab, space, formulation, problem.nu, problem.sigma,
                      M, K, C, J, T, M0, G, z, alpha, f_load, inflow, info=info)


def dump_matrix_market(system: SlabSystem, directory) -> list[Path]:
    """Write A, its components and b as MatrixMarket files; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for name in ("A", "M", "K", "C", "J", "T", "M0", "S"):
        p = d / f"slab{system.slab:04d}_{name}.mtx"
        scipy.io.mmwrite(str(p), getattr(system, name).tocoo())
        out.append(p)
    p = d / f"slab{system.slab:04d}_b.mtx"
    scipy.io.mmwrite(str(p), system.b[:, None])
    out.append(p)
    return out


def total_form(systems, coeffs) -> float:
    """Global ``B(u, u)`` for per-slab coefficient vectors ``coeffs``."""
    val = 0.0
    for n, (sys_, u) in enumerate(zip(systems, coeffs)):
        val += u @ sys_.apply(u)
        if n > 0:
            val -= u @ (sys_.G @ coeffs[n - 1])
    return float(val)
