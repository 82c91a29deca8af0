"""Slab-by-slab time marching with a frame-tolerant sparse direct solve."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import SlabGeometry, SlabSystem, assemble_slab, build_slab_geometry
from .cutgeom import CrossSection
from .mesh import BackgroundMesh, TimePartition
from .surface import DiscreteLevelSet, ProblemSpec, interpolate_levelset
from .tracespace import TraceSpaceSlab, build_trace_space, local_basis

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, slab, message, **diagnostics):
        super().__init__(f"slab {slab}: {message}")
        self.slab = slab
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SolverPolicy:
    """Sparse LU with a diagonal shift, polished by preconditioned GMRES.

    The trace basis is a frame: slab matrices can be singular but
    consistent, and sliver cuts give rows with tiny diagonals. Diagonal
    entries below ``shift * max|diag|`` are lifted by that amount before
    factorization, which keeps coefficients bounded along (near) null
    directions. The shifted LU then preconditions GMRES on the unshifted
    operator, which removes the O(1) perturbation the shift would
    otherwise leave on small-support DOFs. ``krylov=False`` falls back to
    plain iterative refinement.
    """

    tol_rel: float = 1e-10
    shift: float = 1e-12
    apply_shift: bool = True
    permc_spec: str = "COLAMD"
    krylov: bool = True
    krylov_rtol: float = 1e-14
    krylov_restart: int = 50
    krylov_maxiter: int = 2
    refine_steps: int = 2


def _augmented(system: SlabSystem) -> sp.csc_matrix:
    A0 = system.A_base
    if system.sigma == 0 or len(system.alpha) == 0:
        return A0.tocsc()
    k = len(system.alpha)
    Z = sp.csr_matrix(system.z)
    return sp.bmat([[A0, Z.T], [sp.diags(system.alpha) @ Z, -sp.eye(k)]], format="csc")


def _shifted(K: sp.csc_matrix, n: int, shift: float):
    d = np.abs(K.diagonal()[:n])
    thr = shift * d.max()
    small = np.nonzero(d < thr)[0]
    lift = np.zeros(K.shape[0])
    lift[small] = thr
    return (K + sp.diags(lift)).tocsc(), len(small)


def _condition_estimate(K, lu) -> float:
    try:
        inv = spla.LinearOperator(K.shape, matvec=lu.solve, rmatvec=lambda v: lu.solve(v, "T"))
        return float(spla.onenormest(K) * spla.onenormest(inv))
    except Exception:  # noqa: BLE001 - diagnostics only
        return float("nan")


def solve_slab(system: SlabSystem, policy: SolverPolicy = SolverPolicy()) -> np.ndarray:
    """Return coefficients with ``|A x - b| <= tol_rel |b|``.

    The rank-k stabilization is kept out of the factorization by bordering:
    ``[[A0, Z^T], [diag(alpha) Z, -I]]`` acting on ``(x, alpha Z x)``.
    """
    b = system.b
    n = system.n_dof
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        system.info.update(relative_residual=0.0, shifted_pivots=0)
        return np.zeros(n)
    K = _augmented(system)
    shifted = 0
    if policy.apply_shift:
        K, shifted = _shifted(K, n, policy.shift)
    try:
        lu = spla.splu(K, permc_spec=policy.permc_spec)
    except RuntimeError as exc:
        raise SolverError(system.slab, f"factorization failed: {exc}", shifted_pivots=shifted,
                          n_dof=n) from None
    pad = np.zeros(K.shape[0] - n)

    def precond(r):
        return lu.solve(np.concatenate([r, pad]))[:n]

    x = precond(b)
    if policy.krylov:
        A = spla.LinearOperator((n, n), matvec=system.apply, dtype=float)
        P = spla.LinearOperator((n, n), matvec=precond, dtype=float)
        x, _ = spla.gmres(A, b, x0=x, M=P, rtol=policy.krylov_rtol, atol=0.0,
                          restart=min(n, policy.krylov_restart), maxiter=policy.krylov_maxiter)
    else:
        for _ in range(policy.refine_steps):
            x = x + precond(b - system.apply(x))
    rel = float(np.linalg.norm(system.apply(x) - b) / bnorm)
    if not np.isfinite(rel) or rel > policy.tol_rel:
        raise SolverError(system.slab, f"relative residual {rel:.3e} above {policy.tol_rel:g}",
                          relative_residual=rel, condition_estimate=_condition_estimate(K, lu),
                          shifted_pivots=shifted, n_dof=n)
    system.info.update(relative_residual=rel, shifted_pivots=shifted)
    return x


@dataclass
class SlabResult:
    geometry: SlabGeometry
    space: TraceSpaceSlab
    coeffs: np.ndarray
    system: SlabSystem | None = None
    timing: dict = field(default_factory=dict)

    @property
    def n_dof(self) -> int:
        return self.space.n_dof


@dataclass
class SolutionTrace:
    """Discrete solution: one coefficient vector per slab."""

    problem: ProblemSpec
    mesh: BackgroundMesh
    partition: TimePartition
    levelset: DiscreteLevelSet
    slabs: list[SlabResult]
    degree: int = 2

    @property
    def n_dof_total(self) -> int:
        return sum(s.n_dof for s in self.slabs)

    def values_at(self, slab: int, tri, x, t) -> np.ndarray:
        """``u_h`` from slab ``slab`` (1-based) at points in outer triangles ``tri``."""
        res = self.slabs[slab - 1]
        tri = np.asarray(tri)
        dofs = res.space.local_dofs(self.mesh, tri)
        val, _, _ = local_basis(self.mesh, tri, x, t)
        coef = np.where(dofs >= 0, res.coeffs[np.maximum(dofs, 0)], np.nan)
        return np.einsum("...i,...i->...", val, coef)

    def evaluate(self, x, t: float, slab: int | None = None) -> np.ndarray:
        """u_h at points ``x`` and a time ``t``; slab defaults to the one with t in I_n."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if slab is None:
            slab = int(np.clip(np.searchsorted(self.partition.times, t, side="left"), 1,
                               self.partition.N))
        tri = self.mesh.locate(x)
        out = np.full(len(x), np.nan)
        ok = tri >= 0
        out[ok] = self.values_at(slab, tri[ok], x[ok], t)
        return out

    def section_values(self, slab: int, xs: CrossSection, degree: int | None = None):
        pts, w = xs.quadrature(degree or self.degree)
        tri = np.broadcast_to(xs.owner[:, None], w.shape)
        return pts, w, self.values_at(slab, tri, pts, xs.t)

    def section_mean(self, slab: int, xs: CrossSection) -> float:
        _, w, v = self.section_values(slab, xs)
        return float(np.sum(w * v))

    def top_mean(self, n: int) -> float:
        """``u_{h,-}`` integrated over Gamma_h(t_n)."""
        return self.section_mean(n, self.slabs[n - 1].geometry.top)

    def slab_mean_integral(self, n: int) -> float:
        """``int_{I_n} ubar_h dt`` with the bilinear-form quadrature on the patches."""
        g = self.slabs[n - 1].geometry
        pts, w = g.patches.quadrature(self.degree)
        tri = np.broadcast_to(g.patches.owner[:, None], w.shape)
        v = self.values_at(n, tri, pts[..., :2], pts[..., 2])
        return float(np.sum(w * g.patches.mu[:, None] * v))

    def max_abs(self) -> float:
        m = 0.0
        for n, res in enumerate(self.slabs, start=1):
            g = res.geometry
            pts, w = g.patches.quadrature(self.degree)
            tri = np.broadcast_to(g.patches.owner[:, None], w.shape)
            v = self.values_at(n, tri, pts[..., :2], pts[..., 2])
            for xs in (g.bottom, g.top):
                v = np.concatenate([v.ravel(), self.section_values(n, xs)[2].ravel()])
            if v.size:
                m = max(m, float(np.nanmax(np.abs(v))))
        return m


@dataclass(frozen=True)
class MarchOptions:
    degree: int = 2
    stab_nodes: int = 2
    formulation: str = "conservative"
    velocity: str = "tangent"
    solver: SolverPolicy = SolverPolicy()
    keep_systems: bool = True
    # small-cut pruning: drop outer triangles whose cut measure is below
    # prune * h * dt; 0 keeps every cut
    prune: float = 0.0


def run_march(problem: ProblemSpec, mesh: BackgroundMesh, partition: TimePartition,
              options: MarchOptions = MarchOptions(), levelset: DiscreteLevelSet | None = None,
              hook=None) -> SolutionTrace:
    """Solve slabs 1..N in order, each fed the previous slab's solution.

    ``hook(slab_result)`` is called after every slab (checkpointing, logging).
    """
    if abs(partition.T - problem.T) > 1e-12 * max(1.0, problem.T):
        raise ValueError(f"partition ends at {partition.T}, problem at {problem.T}")
    dls = levelset or interpolate_levelset(problem.surface, mesh, partition)
    slabs: list[SlabResult] = []
    prev = None
    for n in range(1, partition.N + 1):
        tic = time.perf_counter()
        geom = build_slab_geometry(n, dls, partition, options.stab_nodes)
        space = build_trace_space(mesh, geom.patches, options.prune * mesh.h * partition.dt)
        if options.prune > 0:
            geom = geom.restrict(space.active_triangles)
        t_geom = time.perf_counter()
        system = assemble_slab(mesh, geom, problem, space, prev, options.degree,
                              options.formulation, options.velocity)
        t_asm = time.perf_counter()
        try:
            x = solve_slab(system, options.solver)
        except SolverError:
            log.error("slab %d failed", n)
            raise
        t_sol = time.perf_counter()
        res = SlabResult(geom, space, x, system if options.keep_systems else None,
                         {"geometry": t_geom - tic, "assembly": t_asm - t_geom, "solve": t_sol - t_asm})
        slabs.append(res)
        if hook is not None:
            hook(res)
        log.debug("slab %d: %d dofs, %.3fs", n, space.n_dof, t_sol - tic)
        prev = (space, x)
    return SolutionTrace(problem, mesh, partition, dls, slabs, options.degree)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "# spacetrace checkpoint v1"


def write_checkpoint(trace: SolutionTrace, path) -> Path:
    """Text layout: magic line, then per slab a ``slab <n> <n_dof>`` header
    followed by ``n_dof`` rows ``dof vertex family value``."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"# T={trace.partition.T!r} N={trace.partition.N} h={trace.mesh.h!r}\n")
        for n, res in enumerate(trace.slabs, start=1):
            fh.write(f"slab {n} {res.n_dof}\n")
            for (dof, v, fam), val in zip(res.space.dof_table(), res.coeffs):
                fh.write(f"{dof} {v} {fam} {val:.17e}\n")
    return path


def read_checkpoint(path) -> list[dict]:
    """Inverse of :func:`write_checkpoint`: list of {slab, table, values}."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a spacetrace checkpoint")
    out = []
    i = 1
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line or line.startswith("#"):
            continue
        tag, n, ndof = line.split()
        if tag != "slab":
            raise ValueError(f"{path}: malformed header {line!r}")
        rows = [lines[i + j].split() for j in range(int(ndof))]
        i += int(ndof)
        table = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=np.int64).reshape(-1, 3)
        vals = np.array([float(r[3]) for r in rows])
        out.append({"slab": int(n), "table": table, "values": vals})
    return out
