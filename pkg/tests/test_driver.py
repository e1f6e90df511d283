import filecmp
from importlib import resources

import numpy as np
import pytest

from locsim.case import load_case, parse_case, to_dict
from locsim.cli import main
from locsim.driver import SolverFailure, compute_ma, run_case, timestep_schedule
from locsim.errors import ConfigurationError
from locsim.solvers import NewtonReport


def small_cfg(kind="localized", name="case1", days=100.0):
    return load_case(name).replace(**{"grid.nx": 20, "grid.ny": 20, "time.total_days": days,
                                      "time.dt_max_days": min(days, 25.0), "solver.kind": kind,
                                      "output.report_every_days": 50.0})


def test_schedule_uniform_when_dt0_is_dt_max():
    assert timestep_schedule(100.0, 10.0, 10.0) == [10.0] * 10


def test_schedule_sums_exactly_and_ramps():
    s = timestep_schedule(1500.0, 0.1, 100.0, 1.2)
    assert sum(s) == pytest.approx(1500.0, abs=1e-9)
    assert 48 <= len(s) <= 55
    assert s[0] == 0.1 and max(s) == 100.0
    with pytest.raises(ValueError):
        timestep_schedule(10.0, 2.0, 1.0)


def test_compute_ma():
    rep = NewtonReport(iterations=1, n_active=[50], n_cells=100)
    assert compute_ma(rep, 100) == (0.5, 0.5)
    rep = NewtonReport(iterations=3, n_active=[100] * 3, n_cells=100)
    assert compute_ma(rep, 100) == (3.0, 1.0)
    with pytest.raises(ValueError):
        compute_ma(NewtonReport(), 10)


def test_builtin_cases_parse():
    for name in ("case1", "case2", "case3", "case2_1", "case2_2"):
        cfg = load_case(name)
        assert cfg.fractures
    assert load_case("case2_1").solver.kind == "adaptive_dd"


def test_config_errors():
    with pytest.raises(ConfigurationError):
        parse_case("[grid]\nnx = 0\n")
    with pytest.raises(ConfigurationError):
        parse_case("[grid]\nbogus = 1\n")
    with pytest.raises(ConfigurationError):
        parse_case("not toml [")
    with pytest.raises(ConfigurationError):
        load_case("case1").replace(**{"time.dt0_days": 500.0})
    with pytest.raises(ConfigurationError):
        load_case("case1").replace(**{"solver.nonsense": 1})


def test_case_roundtrip_through_dict():
    cfg = load_case("case3")
    d = to_dict(cfg)
    assert d["fluid"]["components"][0]["name"] == "C1"
    assert len(d["fractures"]) == 6


def test_standard_metrics_consistency():
    res = run_case(small_cfg("standard"))
    m = res.metrics
    assert m.total_ma == m.total_iterations
    assert m.average_ma == 1.0
    assert sum(s.dt_days for s in m.steps) == pytest.approx(100.0)


@pytest.mark.parametrize("kind,name", [("localized", "case1"), ("adaptive_dd", "case1"),
                                       ("localized", "case3")])
def test_mass_balance(kind, name):
    res = run_case(small_cfg(kind, name))
    balance = res.moles_in_place() + res.produced_moles
    assert np.all(np.abs(balance - res.initial_moles) <= 1e-6 * res.initial_moles)


def test_outputs_are_deterministic(tmp_path):
    cfg = small_cfg("localized", days=60.0)
    run_case(cfg, tmp_path / "a", trace_flags=True, trace_steps={3})
    run_case(cfg, tmp_path / "b", trace_flags=True, trace_steps={3})
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"rates.csv", "metrics.csv", "summary.txt"} <= set(files)
    assert any(f.startswith("flags_t") for f in files)
    assert any(f.startswith("pressure_t") for f in files)
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors


def test_field_dump_shapes(tmp_path):
    run_case(small_cfg("standard", days=50.0), tmp_path)
    p = np.loadtxt(tmp_path / "pressure_t50.txt")
    assert p.shape == (20, 20)
    status = np.loadtxt(tmp_path / "phasestatus_t50.txt")
    assert set(np.unique(status)) <= {0, 1, 2}
    rates = np.genfromtxt(tmp_path / "rates.csv", delimiter=",", names=True)
    assert list(rates.dtype.names) == ["time_days", "oil_rate", "gas_rate", "bhp"]
    assert np.all(rates["bhp"] == pytest.approx(1000.0))


def test_solver_failure_when_cuts_exhausted():
    cfg = small_cfg("standard", days=10.0).replace(**{"solver.max_iter": 1, "solver.eps_p_psi": 1e-9,
                                                      "time.min_dt_days": 0.05})
    with pytest.raises(SolverFailure):
        run_case(cfg)


def write_case(tmp_path, **over):
    raw = resources.files("locsim.cases").joinpath("case1.toml").read_text()
    raw = raw.replace("nx = 200", "nx = 20").replace("ny = 200", "ny = 20")
    raw = raw.replace("total_days = 1500.0", "total_days = 5.0")
    raw = raw.replace("dt_max_days = 100.0", "dt_max_days = 5.0")
    for k, v in over.items():
        raw = raw.replace(k, v)
    path = tmp_path / "c.toml"
    path.write_text(raw)
    return path


def test_cli_success(tmp_path, capsys):
    case = write_case(tmp_path)
    code = main([str(case), "--solver", "localized", "--m", "3", "--eps-p", "0.3",
                 "--out", str(tmp_path / "out"), "--trace-flags", "--report-every", "1"])
    assert code == 0
    out = capsys.readouterr().out
    assert "total ratio M_A" in out
    # fields are written at the first step end on or after each report interval
    dumps = [p.name for p in (tmp_path / "out").iterdir() if p.name.startswith("pressure_t")]
    assert len(dumps) >= 6 and "pressure_t5.txt" in dumps
    assert any(p.name.startswith("flags_t") for p in (tmp_path / "out").iterdir())


def test_cli_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nnx = -1\n")
    assert main([str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main([str(tmp_path / "missing.toml")]) == 2
    assert main([str(write_case(tmp_path)), "--m", "0", "--out", str(tmp_path / "o")]) == 2


def test_cli_solver_failure(tmp_path):
    case = write_case(tmp_path, **{"eps_p_psi = 0.3": "eps_p_psi = 0.3\nmax_iter = 1",
                                   "dt_max_days = 5.0": "dt_max_days = 5.0\nmin_dt_days = 1.0"})
    assert main([str(case), "--solver", "standard", "--eps-p", "1e-9", "--out", str(tmp_path / "o")]) == 3
