"""Config-driven experiment runner.

    spacetrace run|converge|stability|geometry [--config cfg.json] [--out DIR]
        [--levels L] [--sigma VALUE|auto] [--deterministic] [--vtk] [--matrix-market]

Exit codes: 0 all verdicts pass (or none requested), 1 a verdict failed,
2 bad configuration, 3 linear solver failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (ErrorReport, average_eoc, compute_errors, conservation_report, eoc_table,
                       ellipticity_probe)
from .assembly import FORMULATIONS, VELOCITIES, build_slab_geometry, dump_matrix_market
from .cutgeom import write_vtk
from .march import MarchOptions, SolverError, SolverPolicy, run_march, write_checkpoint
from .mesh import MeshError, build_time_partition, build_uniform_mesh
from .surface import (SURFACES, Amplitude, SurfaceError, constant_in_space_problem,
                      interpolate_levelset, make_test_surface, manufacture_problem, zero_problem)

log = logging.getLogger("spacetrace")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
MODES = ("run", "converge", "stability", "geometry")
PROBLEMS = ("harmonic", "constant", "zero")
GEOMETRY_EOC = 1.9
ELLIPTICITY_FACTOR = 0.9


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "run"
    surface: str = "translating"
    surface_params: dict = field(default_factory=dict)
    T: float = 1.2
    problem: str = "harmonic"
    k: int = 1
    amplitude: dict | None = None
    nu: float = 1.0
    sigma: float | str = "auto"
    bounds: tuple = (-2.0, 2.0, -2.0, 2.0)
    h: float = 0.4
    levels: int = 1
    dt_factor: float = 1.0
    degree: int = 2
    stab_nodes: int = 2
    tol_rel: float = 1e-10
    shift: float = 1e-12
    formulation: str = "conservative"
    velocity: str = "tangent"
    prune: float = 0.0
    probe_samples: int = 100
    seed: int = 0
    out: str = "out"
    deterministic: bool = False
    vtk: bool = False
    matrix_market: bool = False
    checkpoint: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.surface not in SURFACES:
            raise ConfigError(f"unknown problem surface {self.surface!r}; choose from {SURFACES}")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        if self.formulation not in FORMULATIONS:
            raise ConfigError(f"formulation must be one of {FORMULATIONS}")
        if self.velocity not in VELOCITIES:
            raise ConfigError(f"velocity must be one of {VELOCITIES}")
        if int(self.levels) != self.levels or self.levels < 1:
            raise ConfigError("levels must be an integer >= 1")
        for name in ("T", "h", "dt_factor", "nu", "tol_rel"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if self.sigma != "auto" and (not isinstance(self.sigma, (int, float)) or self.sigma < 0):
            raise ConfigError(f"sigma must be 'auto' or a number >= 0, got {self.sigma!r}")
        if len(self.bounds) != 4:
            raise ConfigError("bounds must be [x0, x1, y0, y1]")
        self.bounds = tuple(float(b) for b in self.bounds)
        if self.degree not in (1, 2, 3):
            raise ConfigError("quadrature degree must be 1, 2 or 3")
        if self.stab_nodes < 1:
            raise ConfigError("stab_nodes must be >= 1")
        if self.prune < 0:
            raise ConfigError("prune must be >= 0")

    # --- derived objects ---------------------------------------------------
    def make_surface(self):
        try:
            s = make_test_surface(self.surface, float(self.T), **dict(self.surface_params))
            if self.bounds is not None:
                s.check_inside(self.bounds, margin=0.0)
        except SurfaceError as exc:
            raise ConfigError(str(exc)) from None
        return s

    def resolved_sigma(self, surface=None) -> float:
        if self.sigma == "auto":
            return (surface or self.make_surface()).sigma_min(self.nu)
        return float(self.sigma)

    def make_problem(self, sigma: float | None = None):
        s = self.make_surface()
        sig = self.resolved_sigma(s) if sigma is None else sigma
        try:
            if self.problem == "harmonic":
                return manufacture_problem(s, self.k, self.nu, sig, Amplitude.from_config(self.amplitude))
            if self.problem == "constant":
                return constant_in_space_problem(s, Amplitude.from_config(self.amplitude), self.nu, sig)
            return zero_problem(s, self.nu, sig)
        except SurfaceError as exc:
            raise ConfigError(str(exc)) from None

    def options(self) -> MarchOptions:
        return MarchOptions(degree=self.degree, stab_nodes=self.stab_nodes,
                            formulation=self.formulation, velocity=self.velocity,
                            solver=SolverPolicy(tol_rel=self.tol_rel, shift=self.shift),
                            keep_systems=self.mode == "stability" or self.matrix_market,
                            prune=self.prune)

    def level(self, i: int):
        h = self.h / 2**i
        N = max(1, round(self.T / (self.dt_factor * h)))
        try:
            mesh = build_uniform_mesh(self.bounds, h)
        except MeshError as exc:
            raise ConfigError(str(exc)) from None
        return mesh, build_time_partition(self.T, N)

    def provenance(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out")  # location, not provenance; keeps deterministic CSVs comparable
        d["sigma_resolved"] = self.resolved_sigma()
        d["version"] = __version__
        return d


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], header: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={json.dumps(v) if not isinstance(v, str) else v}\n")
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
    return path


def _error_row(rep: ErrorReport, deterministic: bool) -> dict:
    row = rep.as_row()
    if deterministic:
        row.pop("wall")
    return row


def _solve_level(cfg: RunConfig, i: int, problem=None):
    mesh, part = cfg.level(i)
    problem = problem or cfg.make_problem()
    tic = time.perf_counter()
    trace = run_march(problem, mesh, part, cfg.options())
    return trace, time.perf_counter() - tic


# ---------------------------------------------------------------------------
# commands


def cmd_run(cfg: RunConfig, out: Path) -> int:
    trace, wall = _solve_level(cfg, 0)
    rep = compute_errors(trace, wall)
    cons = conservation_report(trace)
    rep.extra.update(top_mean_max=float(np.abs(cons["top_means"]).max()),
                     slab_integral_max=float(np.abs(cons["slab_integral"]).max()), scale=cons["scale"])
    write_csv(out / "run.csv", [_error_row(rep, cfg.deterministic)], cfg.provenance())
    if cfg.vtk:
        for n, res in enumerate(trace.slabs, start=1):
            write_vtk(res.geometry.patches, out / f"surface_slab{n:04d}.vtk")
    if cfg.matrix_market:
        for res in trace.slabs:
            dump_matrix_market(res.system, out / "matrices")
    if cfg.checkpoint:
        write_checkpoint(trace, out / "checkpoint.txt")
    print(f"run: h={rep.h:g} N={rep.N} dofs={rep.n_dof} L2={rep.l2:.4e} energy={rep.energy:.4e} "
          f"max|mean|={rep.mean_max:.3e}")
    return EXIT_OK


def cmd_converge(cfg: RunConfig, out: Path) -> int:
    rows = []
    problem = cfg.make_problem()
    for i in range(cfg.levels):
        trace, wall = _solve_level(cfg, i, problem)
        rows.append(compute_errors(trace, wall))
        log.info("level %d: h=%g errors L2=%.3e energy=%.3e", i, rows[-1].h, rows[-1].l2, rows[-1].energy)
    table, verdicts = eoc_table(rows)
    csv_rows = []
    for i, r in enumerate(rows):
        row = _error_row(r, cfg.deterministic)
        for k, vals in table.items():
            row[f"eoc_{k}"] = vals[i - 1] if i > 0 else math.nan
        csv_rows.append(row)
    write_csv(out / "converge.csv", csv_rows, cfg.provenance())
    lines = [f"{k}: final EOC {table[k][-1] if table[k] else math.nan:.3f} >= {thr} -> {verdicts[k]}"
             for k, thr in (("energy", 0.8), ("l2", 1.7))]
    _verdicts(out / "converge_verdicts.txt", lines)
    return EXIT_FAIL if "FAIL" in verdicts.values() else EXIT_OK


def cmd_stability(cfg: RunConfig, out: Path) -> int:
    surface = cfg.make_surface()
    c0 = surface.admissibility_constant(cfg.nu)
    if not c0 > 0:
        raise ConfigError(f"surface {cfg.surface!r} violates the admissibility condition (c0={c0:.4g})")
    smin = surface.sigma_min(cfg.nu)
    sigmas = [0.0, smin, 2 * smin] if cfg.sigma == "auto" else [float(cfg.sigma)]
    rows, lines, failed = [], [], False
    for sig in sigmas:
        trace, wall = _solve_level(cfg, 0, cfg.make_problem(sig))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = ellipticity_probe(trace, c0, cfg.nu, cfg.probe_samples, cfg.seed)
        target = ELLIPTICITY_FACTOR * res["bound"]
        if sig < smin * (1 - 1e-12):
            verdict = "WARN"  # hypothesis of the estimate not met; recorded only
        else:
            verdict = "PASS" if res["min_ratio"] >= target else "FAIL"
            failed |= verdict == "FAIL"
        rows.append({"sigma": sig, "sigma_min": smin, "c0": c0, "min_ratio": res["min_ratio"],
                     "bound": res["bound"], "target": target, "verdict": verdict})
        lines.append(f"sigma={sig:.4g}: min ratio {res['min_ratio']:.4f} vs {target:.4f} -> {verdict}")
    write_csv(out / "stability.csv", rows, cfg.provenance())
    _verdicts(out / "stability_verdicts.txt", lines)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_geometry(cfg: RunConfig, out: Path) -> int:
    surface = cfg.make_surface()
    exact = surface.space_time_measure()
    rows, errs = [], []
    for i in range(cfg.levels):
        mesh, part = cfg.level(i)
        dls = interpolate_levelset(surface, mesh, part)
        meas = sum(build_slab_geometry(n, dls, part, cfg.stab_nodes).patches.measure(cfg.degree)
                   for n in range(1, part.N + 1))
        errs.append(abs(meas - exact))
        rows.append({"h": mesh.h, "dt": part.dt, "N": part.N, "measure": meas, "exact": exact,
                     "error": errs[-1], "eoc": math.log2(errs[-2] / errs[-1]) if i else math.nan})
    write_csv(out / "geometry.csv", rows, cfg.provenance())
    if len(errs) < 3:
        verdict, avg = "SKIPPED", math.nan
    else:
        avg = average_eoc(errs)
        verdict = "PASS" if avg >= GEOMETRY_EOC else "FAIL"
    _verdicts(out / "geometry_verdicts.txt",
              [f"measure: average EOC {avg:.3f} over {len(errs) - 1} halvings >= {GEOMETRY_EOC} -> {verdict}"])
    return EXIT_FAIL if verdict == "FAIL" else EXIT_OK


def _verdicts(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)


COMMANDS = {"run": cmd_run, "converge": cmd_converge, "stability": cmd_stability,
            "geometry": cmd_geometry}


def _sigma_arg(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spacetrace", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--out", help="output directory (default: config value or ./out)")
    p.add_argument("--levels", type=int)
    p.add_argument("--sigma", type=_sigma_arg, help="stabilization parameter or 'auto'")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="omit wall times so repeated runs give identical CSV")
    p.add_argument("--vtk", action="store_true", default=None, help="write patches as VTK (run)")
    p.add_argument("--matrix-market", dest="matrix_market", action="store_true", default=None,
                   help="dump slab matrices (run)")
    p.add_argument("--formulation", choices=FORMULATIONS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"mode": args.mode, "out": args.out, "levels": args.levels, "sigma": args.sigma,
                 "deterministic": args.deterministic, "vtk": args.vtk,
                 "matrix_market": args.matrix_market, "formulation": args.formulation}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[cfg.mode](cfg, Path(cfg.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
