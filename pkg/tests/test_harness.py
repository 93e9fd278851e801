import logging
import math
import os
import sys

import numpy as np
import pytest
import yaml

import main
from config_loader import config_from_dict, load_config
from errors import ConfigValidationError, ConfigurationError, OutputError
from harness import (
    CSV_HEADER, compare_schemes, format_comparison_table, read_trace_csv, run_experiment, write_summary,
    write_trace_csv
)
from logger_setup import ExperimentFilter, experiment_context, setup_logger


def _data(**overrides):
    data = {
        "name": "box",
        "geometry": {"kind": "euclidean", "d": 2},
        "mapping": {
            "kind": "metric_projection",
            "set": {"type": "box", "lower": [-1, -1], "upper": [1, 1]},
            "k_schedule": {"kind": "geometric", "ratio": 0.5},
        },
        "scheme": "hybrid_hilbert",
        "x0": [3.0, 4.0],
        "max_iter": 300,
    }
    data.update(overrides)
    return data


def _write_yaml(path, data):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False, allow_unicode=True)
    return str(path)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for key in ("CQ_OUTPUT_DIR", "CQ_LOG_LEVEL", "CQ_LOG_DIR"):
        monkeypatch.delenv(key, raising=False)


# ---------------------------------------------------------------------------
# 配置加载
# ---------------------------------------------------------------------------

def test_defaults(tmp_path):
    cfg = config_from_dict(_data(max_iter=500), base_dir=str(tmp_path))
    assert cfg.scheme == "hybrid_hilbert"
    assert cfg.solver.max_iter == 500
    assert cfg.solver.stop_tol == 1e-9
    assert cfg.solver.residual_tol == 1e-8
    assert cfg.solver.M is None
    assert cfg.solver.schedule.alpha.at(7) == 0.5
    assert cfg.solver.schedule.beta.rule == "one_minus_inv"
    assert cfg.seed == 0
    assert cfg.trace_csv == os.path.join(str(tmp_path), "outputs", "box_trace.csv")
    assert cfg.summary_path == os.path.join(str(tmp_path), "outputs", "box_summary.yaml")
    assert cfg.mapping.k(2) == pytest.approx(1.25)
    assert cfg.solver.extended_precision is True
    assert cfg.solver.max_precision_bits == 8192


def test_load_yaml_file(tmp_path):
    data = _data(
        geometry={"kind": "p_norm", "p": 3, "d": 2},
        mapping={"kind": "generalized_projection", "set": {"type": "box", "lower": [-1, -1], "upper": [1, 1]}},
        scheme="hybrid_banach",
        x0=[2.0, 0.5],
        schedule={"alpha": {"rule": "constant", "value": 0.3}, "beta": {"rule": "one_minus_inv", "n0": 3}},
        M="auto",
        outputs={"trace_csv": "out/t.csv", "summary": "out/s.yaml"},
    )
    path = _write_yaml(tmp_path / "banach.yaml", data)
    cfg = load_config(path)
    assert cfg.geometry.p == 3.0
    assert cfg.solver.schedule.alpha.value == 0.3
    assert cfg.solver.schedule.beta.n0 == 3
    assert cfg.trace_csv == os.path.join(str(tmp_path), "out", "t.csv")
    assert cfg.source_path == os.path.realpath(path)


def test_unknown_field_reports_path_and_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "name: bad\n"
        "geometry: {kind: euclidean, d: 2}\n"
        "mapping:\n"
        "  kind: rotation\n"
        "  angle: 1.0\n"
        "  spin: 2\n"
        "x0: [1.0, 0.0]\n",
        encoding="utf-8",
    )
    with pytest.raises(ConfigValidationError) as info:
        load_config(str(path))
    assert any("mapping.spin" in e and "第 6 行" in e for e in info.value.errors)


def test_yaml_syntax_error_has_position(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("name: broken\ngeometry: {kind: euclidean, d: 2\n", encoding="utf-8")
    with pytest.raises(ConfigValidationError) as info:
        load_config(str(path))
    assert "YAML 语法错误" in info.value.errors[0]
    assert "行" in info.value.errors[0]


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigValidationError):
        load_config(str(tmp_path / "nope.yaml"))


def test_all_problems_reported_together(tmp_path):
    data = _data(scheme="halpern", geometry={"kind": "p_norm", "p": 0.5, "d": 2}, seed=-1)
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(data, base_dir=str(tmp_path))
    errors = info.value.errors
    assert any(e.startswith("scheme") for e in errors)
    assert any(e.startswith("geometry") for e in errors)
    assert any(e.startswith("seed") for e in errors)


def test_precision_settings_are_validated(tmp_path):
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_data(extended_precision="yes", max_precision_bits=16), base_dir=str(tmp_path))
    errors = info.value.errors
    assert any(e.startswith("extended_precision") for e in errors)
    assert any(e.startswith("max_precision_bits") for e in errors)
    cfg = config_from_dict(_data(extended_precision=False), base_dir=str(tmp_path))
    assert cfg.solver.extended_precision is False


def test_missing_required_fields(tmp_path):
    data = _data()
    del data["x0"]
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(data, base_dir=str(tmp_path))
    assert any(e.startswith("x0") and "缺少必填字段" in e for e in info.value.errors)


def test_wrong_vector_dimension(tmp_path):
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_data(x0=[1.0, 2.0, 3.0]), base_dir=str(tmp_path))
    assert any(e.startswith("x0") for e in info.value.errors)


@pytest.mark.parametrize("overrides, condition", [
    ({"x0": [30.0, 0.0]}, "x0∈C"),
    ({"M": 10.0}, "M>‖v‖²"),
    ({"schedule": {"alpha": {"rule": "one_minus_inv"}}}, "limsup α_n<1"),
    ({"schedule": {"beta": {"rule": "constant", "value": 0.5}}}, "β_n→1"),
    ({"scheme": "kim_xu", "schedule": {"alpha": {"rule": "constant", "value": 1.0}}}, "α_n≤α<1"),
    ({"scheme": "nakajo_takahashi", "schedule": {"alpha": {"rule": "constant", "value": 1.0}}}, "α_n≤1−δ"),
])
def test_hypothesis_violations_become_validation_errors(tmp_path, overrides, condition):
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_data(**overrides), base_dir=str(tmp_path))
    assert any(condition in e for e in info.value.errors)


def test_unbounded_domain_is_reported(tmp_path):
    mapping = _data()["mapping"]
    mapping["domain"] = {"type": "halfspace", "a": [1, 0], "b": 5}
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_data(mapping=mapping), base_dir=str(tmp_path))
    assert any("C bounded" in e for e in info.value.errors)


def test_environment_overrides(tmp_path, monkeypatch):
    out = tmp_path / "elsewhere"
    monkeypatch.setenv("CQ_OUTPUT_DIR", str(out))
    monkeypatch.setenv("CQ_LOG_LEVEL", "DEBUG")
    cfg = config_from_dict(_data(), base_dir=str(tmp_path))
    assert cfg.trace_csv == os.path.join(str(out), "box_trace.csv")
    assert cfg.summary_path == os.path.join(str(out), "box_summary.yaml")
    assert cfg.log_level == "DEBUG"


# ---------------------------------------------------------------------------
# 轨迹与摘要输出
# ---------------------------------------------------------------------------

def test_trace_csv_layout_and_round_trip(tmp_path):
    cfg = config_from_dict(_data(max_iter=3), base_dir=str(tmp_path))
    trace, summary = run_experiment(cfg)
    assert trace.iterations == 3
    assert summary.terminated_by == "max_iter"
    path = str(tmp_path / "trace.csv")
    write_trace_csv(trace, path)

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert len(lines) == 4
    assert lines[0] == "n,x,phi_step,residual,dist_to_target,cn_slack_pref,qn_slack_pref"
    assert lines[0].split(",") == CSV_HEADER

    rows = read_trace_csv(path)
    for row, rec in zip(rows, trace.records):
        assert row["n"] == rec.n
        assert np.array_equal(row["x"], rec.x)
        assert row["residual"] == rec.residual
        assert row["dist_to_target"] == rec.dist_to_target
        assert row["cn_slack_pref"] == rec.cn_slack_pref


def test_mann_trace_has_nan_slacks(tmp_path):
    cfg = config_from_dict(_data(scheme="mann", max_iter=2), base_dir=str(tmp_path))
    trace, _ = run_experiment(cfg)
    path = str(tmp_path / "mann.csv")
    write_trace_csv(trace, path)
    rows = read_trace_csv(path)
    assert all(math.isnan(r["cn_slack_pref"]) and math.isnan(r["qn_slack_pref"]) for r in rows)


def test_identical_runs_are_byte_identical(tmp_path):
    cfg = config_from_dict(_data(), base_dir=str(tmp_path))
    outputs = []
    for i in range(2):
        trace, _ = run_experiment(cfg)
        path = tmp_path / f"run{i}.csv"
        write_trace_csv(trace, str(path))
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1]


def test_summary_file(tmp_path):
    cfg = config_from_dict(_data(), base_dir=str(tmp_path))
    trace, summary = run_experiment(cfg)
    assert summary.converged
    assert summary.max_invariant_violation == 0.0
    path = tmp_path / "nested" / "summary.yaml"
    write_summary(summary, str(path))
    loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
    assert loaded["name"] == "box"
    assert loaded["converged"] is True
    assert loaded["iterations"] == trace.iterations
    assert float(loaded["final_distance_to_target"]) <= 1e-6
    assert loaded["error"] == ""
    assert loaded["precision_bits"] == trace.precision_bits > 53


def test_write_failure_raises_output_error(tmp_path):
    cfg = config_from_dict(_data(max_iter=2), base_dir=str(tmp_path))
    trace, _ = run_experiment(cfg)
    with pytest.raises(OutputError) as info:
        write_trace_csv(trace, str(tmp_path))
    assert info.value.path == str(tmp_path)


# ---------------------------------------------------------------------------
# 多格式对比
# ---------------------------------------------------------------------------

def _compare_configs(tmp_path, schemes):
    return [config_from_dict(_data(name=s, scheme=s, max_iter=1000), base_dir=str(tmp_path)) for s in schemes]


def test_compare_schemes_orders_rows(tmp_path):
    configs = _compare_configs(tmp_path, ["nakajo_takahashi", "mann", "hybrid_hilbert", "myx"])
    rows = compare_schemes(configs, max_workers=2)
    assert [r.scheme for r in rows] == ["hybrid_hilbert", "mann", "myx", "nakajo_takahashi"]
    assert all(r.converged for r in rows)
    again = compare_schemes(configs, max_workers=4)
    assert [(r.iterations, r.final_distance) for r in rows] == [(r.iterations, r.final_distance) for r in again]


def test_compare_rejects_different_instances(tmp_path):
    a = config_from_dict(_data(name="a"), base_dir=str(tmp_path))
    b = config_from_dict(_data(name="b", x0=[2.0, 2.0]), base_dir=str(tmp_path))
    with pytest.raises(ConfigurationError):
        compare_schemes([a, b])
    with pytest.raises(ConfigurationError):
        compare_schemes([])


def test_banach_at_p_two_matches_hilbert_in_comparison(tmp_path):
    hilbert = config_from_dict(_data(name="h"), base_dir=str(tmp_path))
    banach = config_from_dict(
        _data(name="b", scheme="hybrid_banach", geometry={"kind": "p_norm", "p": 2, "d": 2}),
        base_dir=str(tmp_path),
    )
    rows = compare_schemes([hilbert, banach])
    assert rows[0].iterations == rows[1].iterations
    assert rows[0].final_distance == rows[1].final_distance


def test_comparison_table(tmp_path):
    rows = compare_schemes(_compare_configs(tmp_path, ["mann", "hybrid_hilbert"]))
    table = format_comparison_table(rows)
    lines = table.strip().split("\n")
    assert len(lines) == 4
    assert lines[2].startswith("| hybrid_hilbert |")
    assert "✅" in table
    assert format_comparison_table([]) == ""


# ---------------------------------------------------------------------------
# 日志
# ---------------------------------------------------------------------------

def test_log_records_carry_experiment_name():
    record = logging.LogRecord("cq_solver", logging.INFO, __file__, 1, "msg", None, None)
    log_filter = ExperimentFilter()
    with experiment_context("box_mann"):
        log_filter.filter(record)
        assert record.experiment == "box_mann"
    log_filter.filter(record)
    assert record.experiment == "-"


def test_setup_logger_replaces_handlers(tmp_path):
    log_file = tmp_path / "logs" / "cq.log"
    setup_logger(name="cq_solver_test", log_file=str(log_file))
    logger = setup_logger(name="cq_solver_test", log_file=str(log_file), level="DEBUG")
    assert len(logger.handlers) == 2
    assert logger.level == logging.DEBUG
    with experiment_context("a1"):
        logger.info("done")
    for handler in logger.handlers:
        handler.flush()
    assert "[a1] done" in log_file.read_text(encoding="utf-8")
    setup_logger()


# ---------------------------------------------------------------------------
# 命令行
# ---------------------------------------------------------------------------

def _cli(monkeypatch, *args):
    monkeypatch.setattr(sys, "argv", ["main.py", *args])
    with pytest.raises(SystemExit) as info:
        main.main()
    return info.value.code


def test_cli_validate(tmp_path, monkeypatch):
    good = _write_yaml(tmp_path / "good.yaml", _data())
    bad = _write_yaml(tmp_path / "bad.yaml", _data(x0=[30.0, 0.0]))
    assert _cli(monkeypatch, "validate", good) == main.EXIT_OK
    assert _cli(monkeypatch, "validate", bad) == main.EXIT_INVALID


def test_cli_run_writes_outputs(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("CQ_OUTPUT_DIR", str(out))
    path = _write_yaml(tmp_path / "run.yaml", _data())
    assert _cli(monkeypatch, "run", path) == main.EXIT_OK
    assert (out / "box_trace.csv").exists()
    assert (out / "box_summary.yaml").exists()


def test_cli_run_without_convergence_exits_two(tmp_path, monkeypatch):
    monkeypatch.setenv("CQ_OUTPUT_DIR", str(tmp_path / "out"))
    path = _write_yaml(tmp_path / "short.yaml", _data(max_iter=2))
    assert _cli(monkeypatch, "run", path) == main.EXIT_RUNTIME


def test_cli_compare(tmp_path, monkeypatch):
    config_dir = tmp_path / "cmp"
    config_dir.mkdir()
    for scheme in ("mann", "hybrid_hilbert"):
        _write_yaml(config_dir / f"{scheme}.yaml", _data(name=scheme, scheme=scheme, max_iter=1000))
    out = tmp_path / "out"
    monkeypatch.setenv("CQ_OUTPUT_DIR", str(out))
    assert _cli(monkeypatch, "compare", str(config_dir)) == main.EXIT_OK
    assert "hybrid_hilbert" in (out / "comparison.md").read_text(encoding="utf-8")
