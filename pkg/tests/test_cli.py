import json

import pytest

from spacetrace.cli import (EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, ConfigError, RunConfig, load_config,
                            main)


def write_cfg(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(kw))
    return str(path)


def rows(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def test_unknown_keys_and_values_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"meshsize": 0.1})
    out = str(tmp_path / "o")
    for bad in ({"surface": "ellipse"}, {"problem": "wave"}, {"h": -1.0}, {"formulation": "x"}):
        assert main(["run", "--config", write_cfg(tmp_path, **bad), "--out", out]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_surface_leaving_domain_rejected(tmp_path):
    cfg = write_cfg(tmp_path, surface="translating", T=12.0)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_run_writes_outputs(tmp_path):
    cfg = write_cfg(tmp_path, T=0.8, h=0.4, checkpoint=True)
    out = tmp_path / "o"
    assert main(["run", "--config", cfg, "--out", str(out), "--vtk", "--matrix-market"]) == EXIT_OK
    head, body = rows(out / "run.csv")
    assert {"h", "l2", "energy", "wall"} <= set(head) and len(body) == 1
    assert len(list(out.glob("surface_slab*.vtk"))) == 2
    assert (out / "matrices" / "slab0002_A.mtx").exists()
    assert (out / "checkpoint.txt").read_text().startswith("# spacetrace checkpoint")
    assert "# sigma_resolved=" in (out / "run.csv").read_text()


def test_deterministic_csv_is_bitwise_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, T=0.8, h=0.4, levels=2)
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        main(["converge", "--config", cfg, "--out", str(d), "--deterministic"])
    assert (a / "converge.csv").read_bytes() == (b / "converge.csv").read_bytes()
    assert "wall" not in rows(a / "converge.csv")[0]


def test_converge_below_three_levels_is_skipped(tmp_path, capsys):
    cfg = write_cfg(tmp_path, T=0.8, h=0.4)
    assert main(["converge", "--config", cfg, "--out", str(tmp_path / "o"), "--levels", "1"]) == EXIT_OK
    assert capsys.readouterr().out.count("SKIPPED") == 2


def test_stability_three_sigmas(tmp_path):
    cfg = write_cfg(tmp_path, surface="shrinking", T=0.5, h=0.25, probe_samples=10)
    out = tmp_path / "o"
    assert main(["stability", "--config", cfg, "--out", str(out)]) == EXIT_OK
    head, body = rows(out / "stability.csv")
    verdicts = [r[head.index("verdict")] for r in body]
    assert verdicts == ["WARN", "PASS", "PASS"]


def test_stability_rejects_inadmissible_surface(tmp_path):
    # shrinking fast enough that div_gamma w + nu c_F goes negative
    cfg = write_cfg(tmp_path, surface="shrinking", surface_params={"rate": -0.3}, T=0.5,
                    nu=0.01, h=0.25)
    assert main(["stability", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_geometry_mode(tmp_path, capsys):
    cfg = write_cfg(tmp_path, surface="stationary", T=0.8, h=0.4, levels=4)
    assert main(["geometry", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    cfg = write_cfg(tmp_path, surface="stationary", T=0.8, h=0.4, levels=2)
    main(["geometry", "--config", cfg, "--out", str(tmp_path / "p")])
    assert "SKIPPED" in capsys.readouterr().out


def test_solver_failure_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, T=0.4, h=0.2, tol_rel=1e-300)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_SOLVER


def test_overrides_beat_config(tmp_path):
    cfg = load_config(write_cfg(tmp_path, sigma=0.5, levels=2), {"sigma": "auto", "levels": None})
    assert cfg.sigma == "auto" and cfg.levels == 2
    mesh, part = RunConfig(h=0.4, T=1.2, dt_factor=2.0).level(1)
    assert mesh.h == pytest.approx(0.2) and part.N == 3
