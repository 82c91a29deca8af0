import math

import numpy as np
import pytest
from conftest import march

from spacetrace.analysis import (ErrorReport, average_eoc, compute_errors, conservation_report,
                                 ellipticity_probe, energy_components, eoc, eoc_table,
                                 energy_quadratic, solution_energy, stabilization_quadratic)
from spacetrace.assembly import total_form
from spacetrace.surface import (Amplitude, constant_in_space_problem, make_test_surface,
                                manufacture_problem, zero_problem)


def report(h, l2, energy):
    return ErrorReport(h, h, 1, 1, l2=l2, grad=l2, H=l2, energy=energy)


def test_eoc_arithmetic():
    assert eoc([0.4, 0.1, 0.025]) == pytest.approx([2.0, 2.0])
    assert average_eoc([1.0, 0.25, 1 / 16]) == pytest.approx(2.0)
    assert math.isnan(eoc([0.0, 1.0])[0])


def test_eoc_table_verdicts():
    rows = [report(0.4 / 2**i, 4.0**-i, 2.0**-i) for i in range(3)]
    table, verdicts = eoc_table(rows)
    assert table["l2"] == pytest.approx([2.0, 2.0])
    assert verdicts == {"energy": "PASS", "l2": "PASS"}
    rows[-1].l2 = rows[-2].l2 / 2.5
    assert eoc_table(rows)[1]["l2"] == "FAIL"


def test_eoc_table_skips_and_rejects():
    rows = [report(0.4, 1.0, 1.0), report(0.2, 0.25, 0.5)]
    assert set(eoc_table(rows)[1].values()) == {"SKIPPED"}
    with pytest.raises(ValueError):
        eoc_table([report(0.4, 1.0, 1.0), report(0.3, 0.5, 0.5), report(0.15, 0.1, 0.1)])


def test_exact_zero_error_is_zero():
    tr = march(zero_problem(make_test_surface("oscillating", 0.5)), 0.25, 2)
    rep = compute_errors(tr)
    assert rep.l2 == rep.grad == rep.energy == 0.0
    assert solution_energy(tr) == 0.0


def test_energy_recomposes_from_parts():
    s = make_test_surface("shrinking", 0.5)
    tr = march(manufacture_problem(s, 1, 1.0, 0.2), 0.2, 3)
    rep = compute_errors(tr)
    assert rep.energy**2 == pytest.approx(rep.max_top + rep.jump_sum + rep.l2**2 + rep.grad**2, rel=1e-12)
    assert rep.H**2 == pytest.approx(rep.l2**2 + rep.grad**2, rel=1e-12)


def test_l2_norm_of_constant_is_patch_measure():
    s = make_test_surface("translating", 0.8)
    tr = march(zero_problem(s), 0.2, 4)
    one = lambda x, t: np.ones(np.shape(x)[:-1])  # noqa: E731
    l2, g2, tops, _ = energy_components(tr, one)
    meas = sum(r.geometry.patches.measure(2) for r in tr.slabs)
    assert l2 == pytest.approx(meas, rel=1e-13)
    assert g2 == 0.0
    assert tops[-1] == pytest.approx(tr.slabs[-1].geometry.top.length, rel=1e-13)


def test_l2_norm_closed_form_on_stationary_circle():
    # int_0^1 (1 + t)^2 |Gamma| dt = 2 pi * 7 / 3, up to the O(h^2) geometry error
    s = make_test_surface("stationary", 1.0)
    g = lambda x, t: (1 + t) * np.ones(np.shape(x)[:-1])  # noqa: E731
    errs = []
    for h in (0.4, 0.2, 0.1, 0.05):
        l2, *_ = energy_components(march(zero_problem(s), h, 2), g)
        errs.append(abs(l2 - 14 * math.pi / 3))
    assert average_eoc(errs) >= 1.8 and errs[-1] < 1e-3


def test_conservation_report_on_oscillating_circle():
    s = make_test_surface("oscillating", 0.5)
    tr = march(manufacture_problem(s, 2, 1.0, 0.0), 0.25, 2)
    rep = conservation_report(tr)
    assert rep["top_means"].shape == rep["slab_integral"].shape == (2,)
    assert np.abs(rep["top_means"]).max() <= 1e-9 * rep["scale"]
    assert np.abs(rep["slab_integral"]).max() <= 1e-9 * rep["scale"]
    assert rep["scale"] > 0


def test_constant_solution_has_nonzero_mean():
    s = make_test_surface("stationary", 0.5)
    tr = march(constant_in_space_problem(s, Amplitude((1.0, 2.0))), 0.25, 2)
    assert conservation_report(tr)["top_means"][-1] == pytest.approx(2 * s.length(0.5), rel=1e-2)


def test_energy_quadratic_matches_norms_of_solution():
    s = make_test_surface("translating", 0.4)
    tr = march(manufacture_problem(s, 1, 1.0, 0.1), 0.2, 2)
    coeffs = [r.coeffs for r in tr.slabs]
    systems = [r.system for r in tr.slabs]
    l2, g2, tops, jumps = energy_components(tr)
    # with u = 0 the first "jump" is ||u_h,+^0||^2, as in the quadratic form
    direct = tops[-1] + sum(jumps) + l2 + g2
    assert energy_quadratic(systems, coeffs) == pytest.approx(direct, rel=1e-10)
    assert total_form(systems, coeffs) > 0
    assert stabilization_quadratic(systems[0], coeffs[0]) >= 0


def test_ellipticity_probe_and_warning():
    s = make_test_surface("shrinking", 0.5)
    c0 = s.admissibility_constant(1.0)
    tr = march(manufacture_problem(s, 1, 1.0, 0.2), 0.25, 2)
    res = ellipticity_probe(tr, c0, m=20)
    assert res["bound"] == pytest.approx(0.375)
    assert res["min_ratio"] >= 0.9 * res["bound"]
    assert res["ratios"].shape == (20,)
    low = march(manufacture_problem(s, 1, 1.0, 0.05), 0.25, 2)
    with pytest.warns(UserWarning, match="sigma_min"):
        ellipticity_probe(low, c0, m=5)


def test_ellipticity_probe_needs_systems():
    s = make_test_surface("shrinking", 0.5)
    tr = march(zero_problem(s), 0.25, 2, keep_systems=False)
    with pytest.raises(ValueError):
        ellipticity_probe(tr, 0.75, m=2)


def test_interior_means_need_not_vanish_on_moving_surface():
    # the identities fix the means at t_n and their slab integrals only
    s = make_test_surface("oscillating", 1.0)
    tr = march(manufacture_problem(s, 1, 1.0, 0.0), 0.25, 4)
    rep = conservation_report(tr)
    ends = max(np.abs(rep["top_means"]).max(), np.abs(rep["slab_integral"]).max())
    assert rep["max_abs_mean"] > 1e3 * max(ends, 1e-16)
