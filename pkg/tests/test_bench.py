import csv
import json

import numpy as np
import pytest

from esfd import bench
from esfd.bench import (
    EXIT_INADMISSIBLE,
    EXIT_OK,
    ConfigError,
    l2_error,
    local_maxima,
    parse_config,
    rates,
    reference_solution,
    shock_position,
)
from esfd.cli import _int_list, main
from esfd.euler import conservative_to_primitive, pressure
from esfd.problems import LEBLANC, SOD, ExactRiemann, PRESETS, preset_initial_conditions


def test_preset_values():
    dw = preset_initial_conditions("density_wave")
    u = dw.initial(np.array([[0.0], [0.5]]))
    assert np.allclose(u[0], [1.0, 1.7, 1.0 / 0.4 + 0.5 * 1.7**2])
    assert u[1, 0] == pytest.approx(1.5)
    khi = preset_initial_conditions("khi2d")
    rho, vel, p = conservative_to_primitive(khi.initial(np.array([[0.0, 0.0]])))
    assert rho[0] == pytest.approx(0.5 + 0.75 * 2 * np.tanh(7.5))
    assert vel[0, 0] == pytest.approx(0.5 * (2 * np.tanh(7.5) - 1))
    lb = preset_initial_conditions("leblanc")
    u = lb.initial(np.array([[-1.0], [1.0]]))
    assert pressure(u) == pytest.approx([1e9, 1.0])
    assert u[:, 0] == pytest.approx([2.0, 1e-3])
    assert lb.step_size(400) == pytest.approx(6e-7)
    assert dw.step_size(512) == dw.dt
    with pytest.raises(ValueError):
        preset_initial_conditions("sedov")


@pytest.mark.parametrize(
    "left, right, p_star, u_star",
    [
        # Toro, Riemann Solvers and Numerical Methods for Fluid Dynamics, Table 4.2
        ((1.0, 0.0, 1.0), (0.125, 0.0, 0.1), 0.30313, 0.92745),
        ((1.0, -2.0, 0.4), (1.0, 2.0, 0.4), 0.00189, 0.0),
        ((1.0, 0.0, 1000.0), (1.0, 0.0, 0.01), 460.894, 19.5975),
        ((1.0, 0.0, 0.01), (1.0, 0.0, 100.0), 46.0950, -6.19633),
        ((5.99924, 19.5975, 460.894), (5.99242, -6.19633, 46.0950), 1691.64, 8.68975),
    ],
)
def test_exact_riemann_star_states(left, right, p_star, u_star):
    rs = ExactRiemann(left, right)
    assert rs.p_star == pytest.approx(p_star, rel=1e-4, abs=1e-5)
    assert rs.u_star == pytest.approx(u_star, rel=1e-4, abs=1e-5)


def test_exact_riemann_sampling():
    rs = ExactRiemann(SOD[0], SOD[1])
    rho, u, p = rs.sample(np.array([-2.0, 0.5, 1.5, 2.0]))
    # Toro star densities for the Sod data
    assert rho[1] == pytest.approx(0.42632, rel=1e-4)
    assert rho[2] == pytest.approx(0.26557, rel=1e-4)
    assert (rho[0], p[0], rho[3], p[3]) == pytest.approx((1.0, 1.0, 0.125, 0.1))
    assert rs.shock_speed_right() == pytest.approx(1.75216, rel=1e-4)
    with pytest.raises(ValueError):
        ExactRiemann((1.0, -20.0, 0.1), (1.0, 20.0, 0.1))
    with pytest.raises(ValueError):
        rs.solution(np.zeros(3), 0.0)


def test_leblanc_exact_shock_location():
    rs = ExactRiemann(LEBLANC[0], LEBLANC[1])
    assert rs.shock_speed_right() * 1e-4 == pytest.approx(8.283, abs=2e-3)


def test_config_errors_report_field_and_line():
    text = "problem: sod\nn: 100\nscheme:\n  name: ecav\n  order: 9\n"
    with pytest.raises(ConfigError, match=r":5: field 'scheme.order'"):
        parse_config(text, "cfg.yaml")
    with pytest.raises(ConfigError, match=r":2: field 'n'"):
        parse_config("problem: sod\nn: many\n")
    with pytest.raises(ConfigError, match=r"field 'problem'"):
        parse_config("problem: sedov\n")
    with pytest.raises(ConfigError, match=r":3: field 'scheme.positivity'"):
        parse_config("problem: sod\nscheme:\n  positivity: true\n")
    with pytest.raises(ConfigError, match=r":4: field 'time.method'"):
        parse_config("problem: leblanc\nn: 400\ntime:\n  method: rk4\n")
    with pytest.raises(ConfigError, match=r"field 'colour'"):
        parse_config("problem: sod\ncolour: red\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        parse_config("problem: [sod\n")
    with pytest.raises(ConfigError):
        bench.load_config("/nonexistent/config.yaml")


def test_config_defaults_follow_preset():
    cfg = parse_config("problem: leblanc\nn: 400\n")
    assert cfg.scheme.scheme == "kl" and cfg.scheme.positivity and cfg.scheme.low_flux == "hllc"
    assert cfg.method == "ssprk43" and cfg.dt == pytest.approx(6e-7)
    cfg = parse_config("problem: khi2d\nn: 16\nscheme:\n  name: kl\n")
    assert cfg.method == "adaptive" and (cfg.atol, cfg.rtol) == (1e-6, 1e-4)


def test_run_writes_artifacts(tmp_path):
    cfg = tmp_path / "sod.yaml"
    cfg.write_text(
        "problem: sod\nn: 64\nscheme:\n  name: kl\n  order: 4\ntime:\n  method: ssprk43\n"
        "  dt: 2.0e-3\n  t_final: 0.02\noutput:\n  snapshot_times: [0.01]\n"
    )
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"config.json", "run_log.jsonl", "snapshot_initial.csv", "snapshot_t0.01.csv",
            "snapshot_final.csv", "diagnostics.csv"} <= names
    assert json.loads((out / "config.json").read_text())["scheme"]["scheme"] == "kl"
    log = [json.loads(s) for s in (out / "run_log.jsonl").read_text().splitlines()]
    assert log[-1]["event"] == "done" and log[-1]["steps"] == 10
    with (out / "diagnostics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and float(rows[1]["t"]) == pytest.approx(0.02)


def test_run_reports_inadmissible_state(tmp_path):
    cfg = tmp_path / "lb.yaml"
    cfg.write_text("problem: leblanc\nn: 200\nscheme:\n  name: high\ntime:\n  method: rk4\n  dt: 1.0e-6\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INADMISSIBLE
    log = [json.loads(s) for s in (tmp_path / "o" / "run_log.jsonl").read_text().splitlines()]
    assert log[-1]["event"] == "abort"


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("problem: sod\nscheme:\n  alpha: 2.0\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "scheme.alpha" in capsys.readouterr().err


def test_density_wave_fourth_order_error():
    spec = PRESETS["density_wave"]
    disc, res = bench.simulate(spec, 64, bench.scheme_for(spec, "ecav", 4))
    err = l2_error(disc.mass, res.u, spec.exact(disc.grid.coordinates(), res.t))
    # frozen from an independent run of this configuration
    assert err == pytest.approx(2.53e-4, rel=0.05)


def test_rates_and_ranges():
    r = rates([1.0, 0.25, 0.0625, 0.01], [16, 32, 64, 100])
    assert r[:3] == [None, 2.0, 2.0] and r[3] is None
    assert _int_list("16..512") == [16, 32, 64, 128, 256, 512]
    assert _int_list("2,3,5") == [2, 3, 5]
    import argparse

    with pytest.raises(argparse.ArgumentTypeError):
        _int_list("64..16")
    with pytest.raises(argparse.ArgumentTypeError):
        _int_list("a,b")


def test_cli_converge_smoke(tmp_path, capsys):
    out = tmp_path / "conv"
    assert main(["converge", "--orders", "2", "--grids", "16..32", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "N=2 n=   16" in text and "rate=1.98" in text
    with (out / "density_wave_ecav.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["error"]) == pytest.approx(1.65e-1, rel=5e-3)


def test_worker_count_honours_env(monkeypatch):
    monkeypatch.setenv("ESFD_THREADS", "1")
    assert bench.worker_count() == 1
    monkeypatch.setenv("ESFD_THREADS", "lots")
    assert bench.worker_count() >= 1


def test_reference_cache_and_recovery(tmp_path):
    x, u = reference_solution("sod", 64, cache=tmp_path)
    files = list(tmp_path.glob("reference_sod_64_*.npz"))
    assert len(files) == 1
    x2, u2 = reference_solution("sod", 64, cache=tmp_path)
    assert np.array_equal(u, u2)
    files[0].write_bytes(b"not a numpy archive")
    x3, u3 = reference_solution("sod", 64, cache=tmp_path)
    assert np.array_equal(u, u3)
    with pytest.raises(ValueError):
        reference_solution("khi2d", 16, cache=tmp_path)


def test_sod_reference_converges_to_exact(tmp_path):
    rs = ExactRiemann(SOD[0], SOD[1])
    errs = []
    for n in (100, 200, 400):
        x, u = reference_solution("sod", n, cache=tmp_path)
        exact = rs.solution(x, 0.2, SOD[2])
        errs.append(np.mean(np.abs(u[:, 0] - exact[:, 0])))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02


def test_shock_and_peak_helpers():
    x = np.linspace(0, 1, 101)
    rho = np.where(x < 0.4, 4.0, 1.0)
    # the 1.5 level is crossed 5/6 of the way from 0.39 to 0.40
    assert shock_position(x, rho, 1.0) == pytest.approx(0.39 + 0.01 * 2.5 / 3)
    with pytest.raises(ValueError):
        shock_position(x, np.ones_like(x), 1.0)
    y = np.exp(-200 * (x - 0.3) ** 2) + 0.8 * np.exp(-200 * (x - 0.7) ** 2)
    assert local_maxima(x, y, 0.0, 1.0, 0.5) == pytest.approx([0.3, 0.7])
    assert local_maxima(x, y, 0.5, 1.0) == pytest.approx([0.7])


def test_shipped_configs_parse():
    from pathlib import Path

    files = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert {f.stem for f in files} >= set(PRESETS)
    for f in files:
        cfg = bench.load_config(f)
        assert cfg.problem in PRESETS
        assert cfg.method == "adaptive" or cfg.dt == pytest.approx(PRESETS[cfg.problem].step_size(cfg.n))
