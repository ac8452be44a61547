import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mqheat.cli import main
from mqheat.config import ConfigError, ExperimentConfig, build_model, load_config, parse_config, validate
from mqheat.geometry import ChartMetric, ChartPoint, FlatTorus, RoundSphere, curvature_at


def write(tmp_path, text, name="cfg.json"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_unknown_top_level_key_reports_its_line(tmp_path):
    p = write(tmp_path, '{\n  "kind": "evolve",\n  "tme": 0.5\n}\n')
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.field == "tme" and exc.value.line == 3


def test_malformed_json_reports_its_line(tmp_path):
    p = write(tmp_path, '{\n  "kind": "evolve",\n  "t": 0.5,\n}\n')
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.line == 4


@pytest.mark.parametrize(
    "data, field",
    [
        ({"kind": "bogus"}, "kind"),
        ({"kind": "evolve", "model": {"name": "sphere", "sides": [1, 1]}}, "model.sides"),
        ({"kind": "evolve", "model": {"name": "sphere", "radius": -1}}, "model.radius"),
        ({"kind": "evolve", "t": 0}, "t"),
        ({"kind": "evolve", "N": 4}, "N"),
        ({"kind": "evolve", "partition": {"n": 2, "times": [0.1]}}, "partition"),
        ({"kind": "evolve", "kernel": {"include_rho": True}}, "kernel.include_rho"),
        ({"kind": "evolve", "kernel": {"gaussian_cutoff": 2}}, "kernel"),
        ({"kind": "evolve", "format": "xml"}, "format"),
        ({"kind": "evolve", "storage": "dense"}, "storage"),
        ({"kind": "evolve", "n_seq": [4, -8]}, "n_seq"),
        ({"kind": "evolve", "model": {"name": "chart", "metric": [["1", "0"], ["0", "1"]]}}, "model.periods"),
    ],
)
def test_invalid_configs_are_rejected(data, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(data)
    assert exc.value.field == field


def test_valid_config_round_trips_through_dict():
    cfg = parse_config({"kind": "supertrace", "model": {"name": "torus"}, "t": 0.5, "partition": {"times": [0.2, 0.3]}})
    assert cfg.partition_times() == (0.2, 0.3)
    assert cfg.model["sides"] == [2 * math.pi, 2 * math.pi]
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_expression_metric_builds_chart_model():
    spec = {"name": "chart", "metric": [["4/(1 + x0**2 + x1**2)**2", "0"], ["0", "4/(1 + x0**2 + x1**2)**2"]], "domain": [[-2, -2], [2, 2]], "injectivity_radius": 2.0}
    cfg = parse_config({"kind": "lemma22", "model": spec})
    m = build_model(cfg.model)
    assert isinstance(m, ChartMetric)
    # the stereographic sphere metric has Gauss curvature one
    assert curvature_at(m, ChartPoint(0, [0.3, -0.2])).gauss_curvature == pytest.approx(1.0, rel=1e-6)
    dg = m.metric_derivative_fn(np.array([[0.3, -0.2]]))
    assert dg.shape == (1, 2, 2, 2)


def test_bad_expression_is_a_config_error():
    with pytest.raises(ConfigError):
        build_model({"name": "chart", "metric": [["1 + y", "0"], ["0", "1"]], "periods": [1, 1]})


def test_table_metric_interpolates(tmp_path):
    x0 = np.linspace(-1, 1, 21)
    x1 = np.linspace(-1, 1, 21)
    X0, X1 = np.meshgrid(x0, x1, indexing="ij")
    conf = np.exp(0.2 * X0)
    g = np.zeros((21, 21, 2, 2))
    g[..., 0, 0] = g[..., 1, 1] = conf
    np.savez(tmp_path / "g.npz", x0=x0, x1=x1, g=g)
    m = build_model({"name": "chart", "table": str(tmp_path / "g.npz"), "domain": [[-1, -1], [1, 1]]})
    assert np.allclose(m.metric(0, np.array([0.35, 0.1])), np.exp(0.07) * np.eye(2), atol=1e-6)


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = write(tmp_path, '{"kind": "evolve", "model": {"name": "torus", "radius": 1}}')
    code, _, err = run_cli(["run", "evolve", "--config", str(p)], capsys)
    assert code == 2 and "model.radius" in err


def test_cli_rejects_conflicting_partition(capsys):
    code, _, err = run_cli(["run", "evolve", "--n", "4", "--partition", "0.1,0.2"], capsys)
    assert code == 2
    code, _, err = run_cli(["run", "evolve", "--t", "0.5", "--partition", "0.1,0.2"], capsys)
    assert code == 2 and "sum" in err


def test_cli_csv_is_versioned_and_deterministic(capsys):
    args = ["run", "lemma22", "--model", "sphere", "--d-seq", "0.2,0.1,0.05"]
    code, first, _ = run_cli(args, capsys)
    assert code == 0
    assert first.startswith("# mqheat-results v1 kind=lemma22 passed=true")
    _, second, _ = run_cli(args, capsys)
    assert first == second
    rows = [l for l in first.splitlines() if not l.startswith("#")]
    assert rows[0] == "d,error" and len(rows) == 4


def test_cli_json_output_and_summary_file(tmp_path, capsys):
    out = tmp_path / "res.csv"
    code, _, _ = run_cli(["run", "supertrace", "--model", "torus", "--N", "32", "--n", "4", "--out", str(out)], capsys)
    assert code == 0
    assert out.read_text().startswith("# mqheat-results v1")
    summary = json.loads(out.with_suffix(".summary.json").read_text())
    assert summary["summary"]["passed"] is True
    code, text, _ = run_cli(["run", "supertrace", "--model", "torus", "--N", "32", "--n", "4", "--format", "json"], capsys)
    doc = json.loads(text)
    assert doc["rows"][0]["integral"] == 0.0 and doc["summary"]["checks"][0]["passed"]


def test_cli_failing_check_gives_exit_one(capsys):
    # two coarse steps leave an O(t/n) supertrace error well above the tolerance
    code, text, _ = run_cli(["run", "supertrace", "--model", "sphere", "--N", "16", "--n", "2", "--t", "0.3"], capsys)
    assert code == 1 and "# check FAIL" in text


def test_degenerate_sweep_has_single_row_and_no_slope(capsys):
    code, text, _ = run_cli(["run", "convergence-study", "--model", "sphere", "--N", "16", "--n-seq", "4", "--format", "json"], capsys)
    doc = json.loads(text)
    assert len(doc["rows"]) == 1 and doc["summary"]["slope_n"] is None and code == 0


def test_under_resolution_is_reported_as_warning(capsys):
    code, text, _ = run_cli(["run", "supertrace", "--model", "sphere", "--N", "8", "--n", "8", "--t", "0.1", "--format", "json"], capsys)
    assert json.loads(text)["summary"]["warnings"]


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "mqheat", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "mqheat" in res.stdout


def test_validate_with_overrides_keeps_validation():
    cfg = validate(ExperimentConfig(kind="evolve"))
    with pytest.raises(ConfigError):
        cfg.with_overrides(workers=0)


def test_builtin_models_from_specs():
    assert isinstance(build_model({"name": "sphere", "radius": 2.0}), RoundSphere)
    assert isinstance(build_model({"name": "torus", "sides": [1.0, 2.0]}), FlatTorus)
