import json

import numpy as np
import pytest

from prosumer_bilevel.cli import main, run_compare
from prosumer_bilevel.market_model import ProsumerProfile, profiles_to_json
from prosumer_bilevel.simulate import (
    BenchRecord,
    bench_from_csv,
    bench_to_csv,
    loglog_slope,
    read_price_series,
    run_bench,
    run_simulate,
    shape_for,
)

from conftest import FIXTURE_A


def write_profiles(path, **changes):
    base = dict(q=[2, 2], h0=[1, 1], h_lb=[0, 0], h_ub=[4, 4], h_tot=2, s=[1, 3])
    base.update(changes)
    path.write_text(profiles_to_json([ProsumerProfile(**base)], [1.0, 1.0]))
    return str(path)


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen", "--n", "2", "--K", "3", "--seed", "7", "-o", str(a)]) == 0
    assert main(["gen", "--n", "2", "--K", "3", "--seed", "7", "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["validate", "-i", str(a), "-o", str(tmp_path / "report.json")]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["passed"]


def test_compare_fixture_a(tmp_path):
    out = tmp_path / "cmp.json"
    assert main(["compare", "-i", str(FIXTURE_A), "-o", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["verdict"] == "PASS"
    assert report["phi_gap"] <= 1e-3
    np.testing.assert_allclose(report["cvx"]["x"], [0, 0], atol=1e-8)
    np.testing.assert_allclose(report["cvx"]["y"], [0, 2], atol=1e-8)
    np.testing.assert_allclose(report["cvx"]["demand"], [1, 1], atol=1e-8)


def test_solve_and_oracle_outputs(tmp_path, capsys):
    assert main(["solve", "-i", str(FIXTURE_A)]) == 0
    sol = json.loads(capsys.readouterr().out)
    assert sol["certified"] is True and sol["phi"] == pytest.approx(-2.0)
    assert main(["oracle", "-i", str(FIXTURE_A), "--steps", "21"]) == 0
    assert json.loads(capsys.readouterr().out)["phi"] == pytest.approx(-2.0, abs=1e-6)


def test_reduce_dumps_matrix(tmp_path, capsys):
    mpath = tmp_path / "M.txt"
    assert main(["reduce", "-i", str(FIXTURE_A), "--matrix", str(mpath)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["r"] == [0.0, 2.0] and doc["cert_mmatrix"]["passed"]
    np.testing.assert_allclose(np.loadtxt(mpath), [[0.25, -0.25], [-0.25, 0.25]])


def test_exit_codes(tmp_path, capsys):
    assert main(["solve", "-i", write_profiles(tmp_path / "h.json", h_lb=[1, 1])]) == 2
    assert main(["validate", "-i", write_profiles(tmp_path / "v.json", h_lb=[1, 1])]) == 2
    with pytest.warns(UserWarning, match="u_gt_r"):
        assert main(["solve", "--force", "-i", write_profiles(tmp_path / "f.json", h_lb=[1, 1])]) == 0
    assert main(["solve", "-i", write_profiles(tmp_path / "i.json", h_tot=9.0)]) == 3
    assert main(["solve", "-i", write_profiles(tmp_path / "u.json", s=[0.5, 0.5])]) == 4
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "K": 2,\n  "grid_prices": [1, NaN]\n}')
    assert main(["solve", "-i", str(bad)]) == 1
    assert main(["solve", "-i", str(tmp_path / "missing.json")]) == 1
    err = capsys.readouterr().err
    assert "bad.json" in err and "missing.json" in err


def test_parse_error_has_line(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text('{\n  "K": 2,\n  "grid_prices": [1 2]\n}')
    assert main(["validate", "-i", str(bad)]) == 1
    assert "broken.json:3:" in capsys.readouterr().err


def test_run_compare_reports_argmin_distance():
    report = run_compare(FIXTURE_A)
    assert report["argmin_distance"] <= 1e-6
    assert report["oracle"]["boundary"] == []


def stationary_profiles():
    prof = ProsumerProfile(q=[1, 1, 1], h0=[1, 1, 1], h_lb=[0, 0, 0], h_ub=[3, 3, 3], h_tot=3, s=[2, 2, 2])
    return [prof], np.ones(3)


def test_simulate_stationary_inputs():
    profiles, prices = stationary_profiles()
    rows = run_simulate(profiles, prices, 3)
    assert [r.interval for r in rows] == [0, 1, 2]
    for r in rows:
        assert r.x == pytest.approx([0.0], abs=1e-8)
        assert r.y == pytest.approx([1.0])
        assert r.h == pytest.approx([1.0])
        assert r.aggregator_profit == pytest.approx(1.0)


def test_simulate_cli_with_price_series(tmp_path, capsys):
    profiles, prices = stationary_profiles()
    inst = tmp_path / "inst.json"
    inst.write_text(profiles_to_json(profiles, prices))
    series = tmp_path / "prices.csv"
    series.write_text("interval,k,price\n" + "".join(f"{t},{k},1.0\n" for t in range(3) for k in range(t, 3)))
    assert main(["simulate", "-i", str(inst), "-T", "3", "--prices", str(series)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 3 and rows[0] == {**rows[2], "interval": 0}


def test_price_series_errors(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("interval,k,price\n0,0,1.0\n0,1,oops\n")
    with pytest.raises(ValueError, match=r"p\.csv:3"):
        read_price_series(path)
    path.write_text("interval,k,price\n0,0,1.0\n")
    profiles, prices = stationary_profiles()
    with pytest.raises(ValueError, match="interval 0"):
        run_simulate(profiles, prices, 1, read_price_series(path))


def test_bench_csv_round_trip():
    records = run_bench([20, 200], [0, 1])
    assert bench_from_csv(bench_to_csv(records)) == records
    assert all(r.primal_residual <= 1e-8 and r.dual_residual <= 1e-8 for r in records)


def test_bench_small_sizes_under_limit(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--sizes", "20,200,2000", "--seeds", "0,1,2", "-o", str(out)]) == 0
    records = bench_from_csv(out.read_text())
    assert max(r.wall_time for r in records) < 10.0
    medians = [np.median([r.wall_time for r in records if r.m == m]) for m in (20, 200, 2000)]
    assert medians == sorted(medians)
    assert "slope" in capsys.readouterr().err


def test_shape_rule():
    assert shape_for(20) == (2, 10)
    assert shape_for(2000) == (200, 10)
    assert shape_for(19200) == (200, 96)
    assert shape_for(7) == (1, 7)


def test_loglog_slope_of_linear_data():
    recs = [BenchRecord(m, 1, m, 0, "cvx", 1e-4 * m, 1, 0.0, 0.0, 0.0) for m in (10, 100, 1000)]
    assert loglog_slope(recs) == pytest.approx(1.0)


def test_sweep_records_and_csv():
    from prosumer_bilevel.sweep import run_sweep, sweep_to_csv

    records = run_sweep(2, "both", start_seed=0, budget=2_000)
    assert [(r.n, r.K) for r in records] == [(1, 2), (1, 3)]
    assert all(r.passed and r.certified for r in records)
    lines = sweep_to_csv(records).splitlines()
    assert lines[0].startswith("seed,n,K,bound_mode") and lines[0].endswith(",passed")
    assert len(lines) == 3
