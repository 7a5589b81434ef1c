import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from fabcn import ChannelGenConfig, SystemConfig
from fabcn.cli import main
from fabcn.experiments import (SCHEMES, ExperimentConfig, ResultTable, emit, load_config,
                               load_results, run_convergence, run_sweep, summary_table,
                               validate_table)
from fabcn.multi import solve_multi_bd
from fabcn.region import RESTART_ALPHAS


def small_config(**kw):
    base = dict(scenario="unit", system=SystemConfig(M=2, N=16, n_cp=8, p_peak=20 / 32),
                channel=ChannelGenConfig(L_h=8, L_v=6), snr_db=20.0, n_realizations=2, seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


def write_yaml(path, cfg: ExperimentConfig):
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    return path


# ---------------------------------------------------------------- config

def test_config_roundtrip_and_yaml(tmp_path):
    cfg = small_config(sweep_variable="D", sweep_values=[0.5, 1.0])
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    loaded = load_config(write_yaml(tmp_path / "c.yaml", cfg), {"seed": 9, "out": None})
    assert loaded.seed == 9 and loaded.sweep_values == [0.5, 1.0]


@pytest.mark.parametrize("bad", [
    {"n_realizations": 0},
    {"sweep_variable": "D", "sweep_values": [1.0, float("inf")]},
    {"sweep_variable": "Q", "sweep_values": [1.0]},
    {"sweep_variable": "D", "sweep_values": []},
    {"schemes": ["nope"]},
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        small_config(**bad)


def test_shipped_configs_load():
    paths = sorted((Path(__file__).parents[1] / "configs").glob("*.yaml"))
    assert paths
    for path in paths:
        cfg = load_config(path)
        assert cfg.system.M == cfg.channel.M == 2


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"sytem": {}})


def test_instance_applies_sweep_value():
    cfg = small_config(sweep_variable="p_peak_factor", sweep_values=[5.0])
    sys, ch = cfg.instance(5.0, 1)
    assert sys.p_peak == pytest.approx(5.0 / 32)
    cfg2 = small_config(sweep_variable="snr_db", sweep_values=[10.0, 20.0])
    s10, ch10 = cfg2.instance(10.0, 1)
    s20, ch20 = cfg2.instance(20.0, 1)
    assert s10.sigma2 == pytest.approx(10 * s20.sigma2)
    np.testing.assert_array_equal(ch10.F, ch20.F)


# ---------------------------------------------------------------- tables

def test_emit_empty_writes_nothing(tmp_path):
    with pytest.raises(ValueError):
        emit(ResultTable("sweep", ["a"], []), tmp_path / "x")
    assert list(tmp_path.iterdir()) == []


def test_emit_reports_path_on_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write"):
        emit(ResultTable("t", ["a"], [{"a": 1}]), blocker / "sub" / "x")


def test_json_roundtrip_is_byte_identical(tmp_path):
    t = ResultTable("t", ["a", "b"], [{"a": 0.1, "b": "x", "extra": [1, 2]}], {"k": np.float64(2.5)})
    text = t.to_json()
    assert ResultTable.from_json(text).to_json() == text
    emit(t, tmp_path / "t")
    assert (tmp_path / "t.json").read_text() == text
    assert (tmp_path / "t.csv").read_text() == "a,b\n0.1,x\n"


def test_json_rejects_other_schema():
    with pytest.raises(ValueError):
        ResultTable.from_json(json.dumps({"schema_version": 99}))


@pytest.fixture(scope="module")
def sweep():
    return run_sweep(small_config(sweep_variable="D", sweep_values=[0.5, 1.5]))


def test_sweep_row_count_and_order(sweep):
    assert len(sweep.rows) == 2 * 2 * len(SCHEMES)
    assert len(sweep.to_csv().splitlines()) == 1 + 2 * 2 * len(SCHEMES)
    keys = [(r["value"], r["realization"], r["scheme"]) for r in sweep.rows]
    assert keys == [(v, r, s) for v in (0.5, 1.5) for r in range(2) for s in SCHEMES]
    assert len(sweep.wall_times) == len(sweep.rows)
    assert "wall_time" not in sweep.to_json()


def test_sweep_single_point_one_row_per_scheme():
    t = run_sweep(small_config(n_realizations=1), schemes=["fabcn_equal", "habcn_opt"])
    assert [r["scheme"] for r in t.rows] == ["fabcn_equal", "habcn_opt"]


def test_sweep_rows_consistent(sweep):
    for r in sweep.rows:
        if r["status"] == "optimal":
            assert r["Q"] == pytest.approx(min(r["R_1"], r["R_2"]))
            assert r["lu_rate"] >= r["value"] - 1e-9
    validate_table(sweep)


def test_sweep_monotone_in_D(sweep):
    by = {(r["realization"], r["scheme"], r["value"]): r for r in sweep.rows}
    for k in range(2):
        for s in SCHEMES:
            lo, hi = by[(k, s, 0.5)], by[(k, s, 1.5)]
            if lo["status"] == hi["status"] == "optimal":
                assert hi["Q"] <= lo["Q"] + 1e-4


def test_continuation_never_loses_to_independent_solves():
    cfg = small_config(sweep_variable="E_min", sweep_values=[4e-6, 12e-6, 8e-6],
                       n_realizations=2, schemes=["fabcn_opt"])
    chained = run_sweep(cfg)
    cfg.continuation = False
    plain = run_sweep(cfg)
    assert [(r["value"], r["realization"]) for r in chained.rows] == \
        [(r["value"], r["realization"]) for r in plain.rows]
    for c, p in zip(chained.rows, plain.rows):
        assert c["Q"] >= p["Q"] - 1e-12
    validate_table(chained)
    by = {(r["realization"], r["value"]): r["Q"] for r in chained.rows}
    for k in range(2):
        assert by[(k, 4e-6)] >= by[(k, 8e-6)] >= by[(k, 12e-6)]


def test_summary_common_mean(sweep):
    summ = summary_table(sweep, bandwidth_hz=20e6)
    assert summ.columns[-1] == "mean_Q_common_bps"
    for row in summ.rows:
        assert row["n_common"] <= row["n_ok"] <= row["n_total"] == 2
        if row["n_common"]:
            assert row["mean_Q_common_bps"] == pytest.approx(row["mean_Q_common"] * 20e6)


def test_load_results_revalidates(tmp_path, sweep):
    emit(sweep, tmp_path / "s")
    assert len(load_results(tmp_path / "s.json").rows) == len(sweep.rows)
    doc = json.loads((tmp_path / "s.json").read_text())
    row = next(r for r in doc["rows"] if r["alloc"] and r["scheme"] == "fabcn_opt")
    row["alloc"]["tau"] = [1.0, 1.0]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="violates"):
        load_results(tmp_path / "bad.json")


def test_sweep_is_deterministic_with_workers():
    cfg = small_config(n_realizations=2, schemes=["fabcn_equal", "fabcn_opt"])
    a = run_sweep(cfg)
    cfg.workers = 2
    b = run_sweep(cfg)
    assert a.to_csv() == b.to_csv()
    assert json.dumps(a.rows, sort_keys=True) == json.dumps(b.rows, sort_keys=True)


# ---------------------------------------------------------------- convergence

def test_convergence_trace():
    cfg = small_config(n_realizations=3)
    t = run_convergence(cfg)
    traces = t.meta["traces"]
    assert t.rows[0]["iteration"] == 0 and t.rows[-1]["n"] == 3
    for tr in traces:
        assert np.all(np.diff(tr["trace"]) >= 0)
    first_flat = [next(j for j in range(1, len(tr["trace"]))
                       if tr["trace"][j] - tr["trace"][j - 1] < 1e-4) for tr in traces]
    assert np.median(first_flat) <= 15
    # final mean within 1% of the best of three starts
    best = []
    for r in range(3):
        sys, ch = cfg.instance(None, r)
        best.append(max(solve_multi_bd(ch, sys, alpha0=a0).Q for a0 in RESTART_ALPHAS))
    assert t.rows[-1]["mean_Q"] >= 0.99 * np.mean(best)


# ---------------------------------------------------------------- CLI

def test_cli_exit_codes(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", small_config(n_realizations=1))
    out = tmp_path / "o"
    assert main(["multi-bd", "--config", str(cfg), "--out", str(out)]) == 0
    assert out.with_suffix(".csv").exists() and out.with_suffix(".json").exists()
    bad = write_yaml(tmp_path / "bad.yaml", small_config(system=SystemConfig(M=2, N=16, E_min=1.0)))
    assert main(["multi-bd", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
    assert main(["sweep", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_cli_bench_writes_summary(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", small_config(n_realizations=1))
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(cfg), "--out", str(out), "--scheme", "fabcn_equal",
                 "--scheme", "fabcn_opt", "--bandwidth", "2e7"]) == 0
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert len(rows) == 3
    summ = (tmp_path / "bench_summary.csv").read_text().splitlines()
    assert summ[0].endswith("mean_Q_common_bps")


def test_cli_same_seed_same_bytes(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", small_config(n_realizations=1))
    out = tmp_path / "a"
    runs = []
    for _ in range(2):
        assert main(["single-bd", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        runs.append((out.with_suffix(".csv").read_bytes(), out.with_suffix(".json").read_bytes()))
    assert runs[0] == runs[1]
