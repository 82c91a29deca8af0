"""Error norms, EOC tables, mass-conservation and ellipticity diagnostics."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembly import section_integrals, total_form
from .march import SolutionTrace
from .tracespace import local_basis


@dataclass
class ErrorReport:
    """One refinement level. Norms are over the discrete space-time surface."""

    h: float
    dt: float
    N: int
    n_dof: int
    l2: float = math.nan
    grad: float = math.nan
    H: float = math.nan
    energy: float = math.nan
    max_top: float = math.nan  # max_n ||e_-^n||^2
    jump_sum: float = math.nan  # sum_n ||[e]^{n-1}||^2
    H2: float = math.nan  # ||e||_H^2
    mean_max: float = math.nan
    wall: float = math.nan
    extra: dict = field(default_factory=dict)

    def recomposed_energy(self) -> float:
        return math.sqrt(self.max_top + self.jump_sum + self.H2)

    def as_row(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d.update(self.extra)
        return d


def _patch_fields(trace: SolutionTrace, n: int):
    res = trace.slabs[n - 1]
    p = res.geometry.patches
    pts, w = p.quadrature(trace.degree)
    wm = w * p.mu[:, None]
    tri = np.broadcast_to(p.owner[:, None], w.shape)
    x, t = pts[..., :2], pts[..., 2]
    dofs = res.space.local_dofs(trace.mesh, p.owner)
    val, gx, _ = local_basis(trace.mesh, tri, x, t)
    coef = res.coeffs[dofs]
    uh = np.einsum("pqi,pi->pq", val, coef)
    grad = np.einsum("pqid,pi->pqd", gx, coef)
    nh = p.spatial_normal
    grad_t = grad - np.einsum("pqd,pd->pq", grad, nh)[..., None] * nh[:, None, :]
    return x, t, wm, uh, grad_t


def energy_components(trace: SolutionTrace, u=None, grad_u=None):
    """Squared norms of ``e = u - u_h`` (``u = 0`` gives the norms of ``u_h``).

    Returns (l2^2, grad^2, [||e_-^n||^2], [||[e]^{n-1}||^2]).
    """
    zero = (lambda x, t: np.zeros(np.shape(x)[:-1]))
    u = u or zero
    l2 = g2 = 0.0
    tops, jumps = [], []
    for n in range(1, trace.partition.N + 1):
        x, t, wm, uh, gh = _patch_fields(trace, n)
        l2 += float(np.sum(wm * (u(x, t) - uh) ** 2))
        ge = -gh if grad_u is None else grad_u(x, t) - gh
        g2 += float(np.sum(wm * (ge**2).sum(axis=-1)))
        geom = trace.slabs[n - 1].geometry
        pts, w, v = trace.section_values(n, geom.top)
        tops.append(float(np.sum(w * (u(pts, geom.t1) - v) ** 2)))
        pts, w, vplus = trace.section_values(n, geom.bottom)
        if n == 1:
            jump = u(pts, geom.t0) - vplus
        else:
            tri = np.broadcast_to(geom.bottom.owner[:, None], w.shape)
            vminus = np.nan_to_num(trace.values_at(n - 1, tri, pts, geom.t0))
            jump = vminus - vplus
        jumps.append(float(np.sum(w * jump**2)))
    return l2, g2, tops, jumps


def compute_errors(trace: SolutionTrace, wall: float = math.nan) -> ErrorReport:
    rep = ErrorReport(trace.mesh.h, trace.partition.dt, trace.partition.N, trace.n_dof_total, wall=wall)
    cons = conservation_report(trace)
    rep.mean_max = cons["max_abs_mean"]
    ex = trace.problem.exact
    if ex is None:
        return rep
    l2, g2, tops, jumps = energy_components(trace, ex.u, ex.grad_gamma)
    rep.l2 = math.sqrt(l2)
    rep.grad = math.sqrt(g2)
    rep.H2 = l2 + g2
    rep.H = math.sqrt(rep.H2)
    rep.max_top = max(tops)
    rep.jump_sum = sum(jumps)
    rep.energy = rep.recomposed_energy()
    return rep


def solution_energy(trace: SolutionTrace) -> float:
    """Mesh-dependent energy norm of ``u_h`` itself."""
    l2, g2, tops, jumps = energy_components(trace)
    return math.sqrt(max(tops) + sum(jumps) + l2 + g2)


# ---------------------------------------------------------------------------
# EOC


def eoc(errors) -> list[float]:
    e = list(errors)
    return [math.log2(a / b) if a > 0 and b > 0 else math.nan for a, b in zip(e, e[1:])]


THRESHOLDS = {"energy": 0.8, "l2": 1.7}


def eoc_table(rows: list[ErrorReport], keys=("l2", "grad", "H", "energy"), thresholds=THRESHOLDS):
    """EOCs per norm between consecutive levels plus verdicts on the final interval.

    Verdict is SKIPPED below three levels.
    """
    hs = [r.h for r in rows]
    for a, b in zip(hs, hs[1:]):
        if abs(a / b - 2.0) > 1e-9:
            raise ValueError(f"levels are not nested by h-halving: {hs}")
    table = {k: eoc([getattr(r, k) for r in rows]) for k in keys}
    if len(rows) < 3:
        return table, {k: "SKIPPED" for k in thresholds}
    verdicts = {}
    for k, thr in thresholds.items():
        final = table[k][-1] if k in table else eoc([getattr(r, k) for r in rows])[-1]
        verdicts[k] = "PASS" if final >= thr else "FAIL"
    return table, verdicts


def average_eoc(errors) -> float:
    """Mean order over all halvings, ``log2(e_first / e_last) / (levels - 1)``."""
    e = list(errors)
    return math.log2(e[0] / e[-1]) / (len(e) - 1)


# ---------------------------------------------------------------------------
# conservation


def conservation_report(trace: SolutionTrace, k: int | None = None, samples: int = 3) -> dict:
    """Discrete surface means of ``u_h``.

    ``slab_integral`` uses the patch quadrature of the bilinear form;
    ``slab_integral_gauss`` the k-node Gauss rule in time on cross sections.
    ``max_abs_mean`` samples slab ends, Gauss nodes and ``samples`` extra
    interior times per slab.
    """
    from .assembly import gauss_nodes
    from .cutgeom import extract_cross_section

    tops, ints, gints, means = [], [], [], []
    for n in range(1, trace.partition.N + 1):
        res = trace.slabs[n - 1]
        g = res.geometry
        tops.append(trace.top_mean(n))
        ints.append(trace.slab_mean_integral(n))
        if k is None or k == len(g.stab_times):
            xi, wi, secs = g.stab_times, g.stab_weights, g.stab_sections
        else:
            xi, wi = gauss_nodes(g.t0, g.t1, k)
            secs = [extract_cross_section(float(x), trace.levelset, g.patches) for x in xi]
        gm = [trace.section_mean(n, xs) for xs in secs]
        gints.append(float(np.dot(wi, gm)))
        interior = [extract_cross_section(float(t), trace.levelset, g.patches)
                    for t in np.linspace(g.t0, g.t1, samples + 2)[1:-1]
                    if trace.levelset.level_index(float(t)) is None]
        interior += [extract_cross_section(float(t), trace.levelset)
                     for t in np.linspace(g.t0, g.t1, samples + 2)[1:-1]
                     if trace.levelset.level_index(float(t)) is not None]
        means += [abs(trace.section_mean(n, g.bottom)), abs(tops[-1])]
        means += [abs(v) for v in gm] + [abs(trace.section_mean(n, xs)) for xs in interior]
    surf = trace.problem.surface
    ts = np.linspace(0, trace.partition.T, 2001)
    scale = float(np.max(surf.length(ts))) * trace.max_abs()
    return {
        "top_means": np.array(tops),
        "slab_integral": np.array(ints),
        "slab_integral_gauss": np.array(gints),
        "max_abs_mean": max(means) if means else 0.0,
        "scale": scale,
    }


# ---------------------------------------------------------------------------
# ellipticity


def energy_quadratic(systems, coeffs) -> float:
    """``||u_-^N||^2 + sum_n ||[u]^{n-1}||^2 + ||u||_H^2`` from assembled components."""
    N = len(systems)
    val = coeffs[-1] @ (systems[-1].T @ coeffs[-1])
    for n in range(N):
        s, u = systems[n], coeffs[n]
        val += u @ (s.J @ u)
        if n > 0:
            up = coeffs[n - 1]
            val += -2.0 * (u @ (s.G @ up)) + up @ (systems[n - 1].T @ up)
        val += u @ ((s.M0 + s.K) @ u)
    return float(val)


def ellipticity_probe(trace: SolutionTrace, c0: float, nu: float | None = None, m: int = 100,
                      seed: int = 0) -> dict:
    """Minimum of ``B(u, u) / E(u)`` over ``m`` random global coefficient vectors.

    Compare to ``2 c_s`` with ``c_s = min(1, nu, c0) / 4``. Warns when sigma
    is below the threshold that the estimate assumes.
    """
    systems = [s.system for s in trace.slabs]
    if any(s is None for s in systems):
        raise ValueError("ellipticity probe needs the assembled systems (keep_systems=True)")
    prob = trace.problem
    nu = prob.nu if nu is None else nu
    smin = prob.surface.sigma_min(nu)
    if prob.sigma < smin:
        warnings.warn(f"sigma={prob.sigma:g} below sigma_min={smin:.4g}; estimate not guaranteed",
                      stacklevel=2)
    cs = 0.25 * min(1.0, nu, c0)
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(m):
        u = [rng.standard_normal(s.n_dof) for s in systems]
        ratios.append(total_form(systems, u) / energy_quadratic(systems, u))
    ratios = np.array(ratios)
    return {"min_ratio": float(ratios.min()), "bound": 2 * cs, "c_s": cs, "sigma": prob.sigma,
            "sigma_min": smin, "ratios": ratios}


def stabilization_quadratic(system, u) -> float:
    return float(u @ (system.z.T @ (system.alpha * (system.z @ u))))


__all__ = [
    "ErrorReport", "compute_errors", "eoc", "eoc_table", "average_eoc", "conservation_report",
    "ellipticity_probe", "energy_quadratic", "solution_energy", "section_integrals",
    "stabilization_quadratic",
]
