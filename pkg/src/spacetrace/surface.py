"""Analytic evolving circles, manufactured problems and the discrete level set."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mesh import BackgroundMesh, TimePartition, refine_mesh


class SurfaceError(ValueError):
    pass


_SAMPLES = 20001


@dataclass(frozen=True)
class MovingCircle:
    """Circle with center ``c0 + v t`` and radius ``r0 + rate t + amp sin(omega t)``.

    The velocity field is ``w = v + (r'/r) (x - c)``: a rigid translation
    plus a radial scaling about the moving center. On the circle this is
    ``v + r' n``. Particles keep their polar angle about the center.
    The level set is the signed distance ``|x - c| - r`` (negative inside).
    """

    name: str
    T: float
    center0: tuple[float, float] = (0.0, 0.0)
    velocity0: tuple[float, float] = (0.0, 0.0)
    r0: float = 1.0
    rate: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise SurfaceError("final time must be positive")
        ts = np.linspace(0.0, self.T, _SAMPLES)
        if self.r0 <= 0 or np.min(self.radius(ts)) <= 0:
            raise SurfaceError(f"radius of {self.name!r} reaches zero before T={self.T}")

    # --- motion -----------------------------------------------------------
    def center(self, t):
        t = np.asarray(t, dtype=float)
        return np.asarray(self.center0) + np.asarray(self.velocity0) * t[..., None]

    def center_velocity(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.velocity0, dtype=float), t.shape + (2,))

    def radius(self, t):
        t = np.asarray(t, dtype=float)
        return self.r0 + self.rate * t + self.amplitude * np.sin(self.omega * t)

    def radius_rate(self, t):
        t = np.asarray(t, dtype=float)
        return self.rate + self.amplitude * self.omega * np.cos(self.omega * t)

    def flow(self, x, t, s):
        """Position at time ``s`` of the particle located at ``x`` at time ``t``."""
        scale = (self.radius(s) / self.radius(t))[..., None]
        return self.center(s) + scale * (np.asarray(x) - self.center(t))

    # --- fields -----------------------------------------------------------
    def phi(self, x, t):
        d = np.asarray(x, dtype=float) - self.center(t)
        return np.hypot(d[..., 0], d[..., 1]) - self.radius(t)

    def grad_phi(self, x, t):
        d = np.asarray(x, dtype=float) - self.center(t)
        return d / np.hypot(d[..., 0], d[..., 1])[..., None]

    def normal(self, x, t):
        return self.grad_phi(x, t)

    def angle(self, x, t):
        d = np.asarray(x, dtype=float) - self.center(t)
        return np.arctan2(d[..., 1], d[..., 0])

    def w(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        ratio = (self.radius_rate(t) / self.radius(t))[..., None]
        return self.center_velocity(t) + ratio * (x - self.center(t))

    def grad_w(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        ratio = self.radius_rate(t) / self.radius(t)
        return ratio[..., None, None] * np.eye(2)

    def normal_velocity(self, x, t):
        return np.einsum("...i,...i->...", self.w(x, t), self.normal(x, t))

    def div_gamma_w(self, x, t):
        """``div w - n^T (grad w) n`` with the level-set normal at ``x``."""
        J = self.grad_w(x, t)
        n = self.normal(x, t)
        return np.trace(J, axis1=-2, axis2=-1) - np.einsum("...i,...ij,...j->...", n, J, n)

    # --- scalar geometry --------------------------------------------------
    def length(self, t):
        return 2.0 * np.pi * self.radius(t)

    def friedrichs(self, t):
        """First nonzero Laplace-Beltrami eigenvalue, 1/r^2 on a circle."""
        return 1.0 / self.radius(t) ** 2

    def mean_div_gamma_w(self, t):
        # div_gamma w is constant along the circle for this family
        return self.radius_rate(t) / self.radius(t)

    def admissibility_constant(self, nu: float) -> float:
        """``min_t (div_gamma w + nu c_F(t))`` over [0, T]; positive means admissible."""
        ts = np.linspace(0.0, self.T, _SAMPLES)
        return float(np.min(self.mean_div_gamma_w(ts) + nu * self.friedrichs(ts)))

    def sigma_min(self, nu: float) -> float:
        """Smallest stabilization parameter covered by the ellipticity estimate."""
        ts = np.linspace(0.0, self.T, _SAMPLES)
        return float(0.5 * nu * np.max(self.friedrichs(ts) / self.length(ts)))

    def space_time_measure(self) -> float:
        """Exact ``int_0^T |Gamma(t)| dt``."""
        T, a, om = self.T, self.amplitude, self.omega
        val = self.r0 * T + 0.5 * self.rate * T**2
        if a and om:
            val += a * (1.0 - math.cos(om * T)) / om
        return 2.0 * math.pi * val

    def check_inside(self, bounds, margin: float) -> None:
        x0, x1, y0, y1 = bounds
        ts = np.linspace(0.0, self.T, 2001)
        c = self.center(ts)
        r = self.radius(ts)
        inside = ((c[:, 0] - r - margin >= x0) & (c[:, 0] + r + margin <= x1)
                  & (c[:, 1] - r - margin >= y0) & (c[:, 1] + r + margin <= y1))
        if not inside.all():
            raise SurfaceError(f"surface {self.name!r} leaves the domain (margin {margin:g})")


SURFACES = ("stationary", "translating", "shrinking", "oscillating")


def make_test_surface(name: str, T: float = 1.0, **params) -> MovingCircle:
    """Catalog of evolving circles.

    ``stationary``: center, radius. ``translating``: center, radius,
    velocity. ``shrinking``: center, r0, rate (r = r0 + rate t).
    ``oscillating``: center, r0, amplitude, omega.
    """
    center = tuple(map(float, params.pop("center", (0.0, 0.0))))
    try:
        if name == "stationary":
            s = MovingCircle(name, T, center, r0=float(params.pop("radius", 1.0)))
        elif name == "translating":
            s = MovingCircle(name, T, center, tuple(map(float, params.pop("velocity", (0.2, 0.0)))),
                             r0=float(params.pop("radius", 1.0)))
        elif name == "shrinking":
            s = MovingCircle(name, T, center, r0=float(params.pop("r0", 1.0)),
                             rate=float(params.pop("rate", -0.25)))
        elif name == "oscillating":
            s = MovingCircle(name, T, center, r0=float(params.pop("r0", 1.0)),
                             amplitude=float(params.pop("amplitude", 0.2)),
                             omega=float(params.pop("omega", 2 * math.pi)))
        else:
            raise SurfaceError(f"unknown surface {name!r}; choose from {SURFACES}")
    except TypeError as exc:
        raise SurfaceError(str(exc)) from None
    if params:
        raise SurfaceError(f"unexpected parameters for {name!r}: {sorted(params)}")
    return s


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class Amplitude:
    """Time profile ``g(t)``: polynomial coefficients plus an optional sine term."""

    coeffs: tuple[float, ...] = (1.0,)
    sin_amp: float = 0.0
    sin_freq: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.polynomial.polynomial.polyval(t, self.coeffs) + self.sin_amp * np.sin(self.sin_freq * t)

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        dc = np.polynomial.polynomial.polyder(self.coeffs) if len(self.coeffs) > 1 else [0.0]
        return (np.polynomial.polynomial.polyval(t, dc)
                + self.sin_amp * self.sin_freq * np.cos(self.sin_freq * t))

    @classmethod
    def from_config(cls, cfg) -> Amplitude:
        if cfg is None:
            return cls()
        return cls(tuple(float(c) for c in cfg.get("coeffs", (1.0,))),
                   float(cfg.get("sin_amp", 0.0)), float(cfg.get("sin_freq", 0.0)))


@dataclass(frozen=True)
class ExactSolution:
    u: Callable
    grad_gamma: Callable
    udot: Callable


@dataclass(frozen=True)
class ProblemSpec:
    """Surface PDE ``u' + (div_gamma w) u - nu Lap_gamma u = f`` with data."""

    surface: MovingCircle
    nu: float
    sigma: float
    f: Callable
    u0: Callable
    exact: ExactSolution | None = None
    # remove from f, per slab, its discrete projection onto {1, t - t_{n-1}}
    zero_mean_rhs: bool = False
    label: str = ""

    def __post_init__(self):
        if not self.nu > 0:
            raise SurfaceError("diffusion coefficient must be positive")
        if self.sigma < 0:
            raise SurfaceError("stabilization parameter must be non-negative")

    @property
    def T(self) -> float:
        return self.surface.T


def manufacture_problem(surface: MovingCircle, k: int = 1, nu: float = 1.0, sigma: float = 0.0,
                        amplitude: Amplitude | None = None) -> ProblemSpec:
    """``u = g(t) cos(k theta)`` with theta the polar angle about the moving center.

    theta is constant along particle paths, so the material derivative is
    ``g'(t) cos(k theta)``; on the circle ``Lap_gamma u = -(k/r)^2 u``.
    """
    if int(k) != k or k < 1:
        raise SurfaceError("harmonic index must be an integer >= 1 (zero-mean solution)")
    k = int(k)
    g = amplitude or Amplitude()
    s = surface

    def u(x, t):
        return g(t) * np.cos(k * s.angle(x, t))

    def udot(x, t):
        return g.deriv(t) * np.cos(k * s.angle(x, t))

    def grad_gamma(x, t):
        d = np.asarray(x, dtype=float) - s.center(t)
        rho2 = (d**2).sum(axis=-1)
        dtheta = np.stack([-d[..., 1], d[..., 0]], axis=-1) / rho2[..., None]
        amp = -k * g(t) * np.sin(k * s.angle(x, t))
        return amp[..., None] * dtheta

    def f(x, t):
        r = s.radius(t)
        coef = g.deriv(t) + (s.radius_rate(t) / r) * g(t) + nu * (k / r) ** 2 * g(t)
        return coef * np.cos(k * s.angle(x, t))

    def u0(x):
        return u(x, 0.0)

    return ProblemSpec(s, nu, sigma, f, u0, ExactSolution(u, grad_gamma, udot),
                       zero_mean_rhs=True, label=f"harmonic k={k} on {s.name}")


def constant_in_space_problem(surface: MovingCircle, amplitude: Amplitude, nu: float = 1.0,
                              sigma: float = 0.0) -> ProblemSpec:
    """``u = g(t)``: ``f = g' + (div_gamma w) g``; not zero-mean in general."""
    s = surface

    def u(x, t):
        return np.broadcast_to(amplitude(t), np.shape(x)[:-1]).astype(float)

    def udot(x, t):
        return np.broadcast_to(amplitude.deriv(t), np.shape(x)[:-1]).astype(float)

    def grad_gamma(x, t):
        return np.zeros(np.shape(x))

    def f(x, t):
        return udot(x, t) + s.div_gamma_w(x, t) * u(x, t)

    return ProblemSpec(s, nu, sigma, f, lambda x: u(x, 0.0), ExactSolution(u, grad_gamma, udot),
                       zero_mean_rhs=False, label=f"spatially constant on {s.name}")


def zero_problem(surface: MovingCircle, nu: float = 1.0, sigma: float = 0.0) -> ProblemSpec:
    def zero(x, t=None):
        return np.zeros(np.shape(x)[:-1])

    return ProblemSpec(surface, nu, sigma, zero, zero,
                       ExactSolution(zero, lambda x, t: np.zeros(np.shape(x)), zero),
                       label=f"zero data on {surface.name}")


def fd_rhs(problem: ProblemSpec, x: np.ndarray, t: float, step: float = 1e-5) -> np.ndarray:
    """Finite-difference reconstruction of ``f`` at points on Gamma(t).

    Material derivative by central differences along particle paths,
    Laplace-Beltrami by central differences in arclength, div_gamma w from a
    finite-difference velocity Jacobian. Independent of the closed forms.
    """
    s = problem.surface
    u = problem.exact.u
    x = np.asarray(x, dtype=float)
    ud = (u(s.flow(x, t, t + step), t + step) - u(s.flow(x, t, t - step), t - step)) / (2 * step)

    c = s.center(t)
    r = s.radius(t)
    alpha = s.angle(x, t)
    ds = 1e-4

    def on_circle(a):
        return c + r * np.stack([np.cos(a), np.sin(a)], axis=-1)

    da = ds / r
    lap = (u(on_circle(alpha + da), t) - 2 * u(on_circle(alpha), t) + u(on_circle(alpha - da), t)) / ds**2

    J = np.empty(x.shape[:-1] + (2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        J[..., :, j] = (s.w(x + e, t) - s.w(x - e, t)) / (2 * step)
    n = s.normal(x, t)
    divg = np.trace(J, axis1=-2, axis2=-1) - np.einsum("...i,...ij,...j->...", n, J, n)
    return ud + divg * u(x, t) - problem.nu * lap


# ---------------------------------------------------------------------------
# discrete level set


@dataclass(frozen=True)
class DiscreteLevelSet:
    """Nodal level-set values on the once-refined space-time grid.

    ``values[l, v]`` is phi at refined vertex ``v`` and refined time level
    ``l`` (``times[l] = l * dt / 2``). Exact zeros are shifted by
    ``perturbation`` so every node has a strict sign.
    """

    fine: BackgroundMesh
    parent: np.ndarray
    times: np.ndarray
    values: np.ndarray
    perturbation: float

    def level_index(self, t: float, tol: float = 1e-12) -> int | None:
        """Refined level at time ``t`` or None when ``t`` lies strictly between levels."""
        step = self.times[1] - self.times[0]
        l = int(round(t / step))
        if 0 <= l < len(self.times) and abs(self.times[l] - t) <= tol * max(1.0, abs(t)):
            return l
        return None

    def evaluate(self, x, t: float) -> np.ndarray:
        """P1-in-space, linear-in-time reconstruction at points ``x`` and time ``t``."""
        x = np.atleast_2d(x)
        tri = self.fine.locate(x)
        if np.any(tri < 0):
            raise SurfaceError("evaluation point outside the background domain")
        lam = self.fine.barycentric(tri, x)
        step = self.times[1] - self.times[0]
        l = min(int(np.floor(t / step)), len(self.times) - 2)
        l = max(l, 0)
        theta = (t - self.times[l]) / step
        nodes = self.fine.triangles[tri]
        v0 = np.einsum("pa,pa->p", lam, self.values[l][nodes])
        v1 = np.einsum("pa,pa->p", lam, self.values[l + 1][nodes])
        return (1 - theta) * v0 + theta * v1


def interpolate_levelset(surface, mesh: BackgroundMesh, partition: TimePartition,
                         phi: Callable | None = None) -> DiscreteLevelSet:
    """Interpolate phi at refined nodes (mesh size h/2, time step dt/2).

    ``phi(x, t)`` defaults to the surface's level set; passing another field
    is how affine or planar test geometries are set up.
    """
    fine, parent = refine_mesh(mesh)
    phi = phi or surface.phi
    times = np.arange(2 * partition.N + 1) * (partition.dt / 2)
    times[-1] = partition.T
    values = np.stack([np.asarray(phi(fine.vertices, t), dtype=float) for t in times])
    scale = float(np.max(np.abs(values))) or 1.0
    eps = 1e-14 * scale
    values = np.where(values == 0.0, eps, values)
    return DiscreteLevelSet(fine, parent, times, values, eps)
