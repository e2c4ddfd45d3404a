import csv

import numpy as np
import pytest
import yaml
from pydantic import ValidationError

from bahadur_lasso.bundles import substream
from bahadur_lasso.cli import main
from bahadur_lasso.config import build_config
from bahadur_lasso.dgp import ConditionalDGP, UnconditionalDGP
from bahadur_lasso.tables import SchemaError, fmt, read_binary_table, write_binary_table


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def unconditional_csv(tmp_path):
    _, Y = UnconditionalDGP.setup(2).draw(300, substream(0, 0))
    return write_binary_table(tmp_path / "y.csv", Y)


@pytest.fixture
def conditional_csv(tmp_path):
    X, Y = ConditionalDGP.setup(2).draw(300, substream(0, 0))
    return write_binary_table(tmp_path / "xy.csv", Y, X)


def test_unknown_config_key_rejected(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("scenario: unconditional-s2\nbogus: 1\n")
    with pytest.raises(ValidationError):
        build_config("simulate", str(f), environ={})


def test_precedence_file_env_flags(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("scenario: unconditional-s2\nout: from_file\njobs: 1\nseed: 3\n")
    env = {"BAHADUR_LASSO_OUT": "from_env", "BAHADUR_LASSO_JOBS": "2"}
    cfg = build_config("simulate", str(f), {"out": None}, environ=env)
    assert (cfg.out, cfg.jobs, cfg.seed) == ("from_env", 2, 3)
    cfg = build_config("simulate", str(f), {"out": "from_flag"}, environ=env)
    assert cfg.out == "from_flag"


def test_lambda_rule_validation():
    assert build_config("estimate", flags={"input": "x.csv", "lambda_rule": "0.2"}, environ={}).lambda_rule == 0.2
    with pytest.raises(ValidationError):
        build_config("estimate", flags={"input": "x.csv", "lambda_rule": "huge"}, environ={})


def test_table_reader_schema(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("Y1,Y2,Z\n0,1,3\n")
    with pytest.raises(SchemaError):
        read_binary_table(bad)
    bad.write_text("Y1,Y2\n0,2\n")
    with pytest.raises(SchemaError):
        read_binary_table(bad)


def test_fmt_is_stable():
    assert fmt(-0.0) == "0" and fmt(0.1) == "0.1" and fmt(np.int64(3)) == "3" and fmt(float("nan")) == "nan"


def test_estimate_unconditional(tmp_path, unconditional_csv):
    out = tmp_path / "out"
    assert main(["estimate", "--input", str(unconditional_csv), "--out", str(out)]) == 0
    rows = read_rows(out / "coefficients.csv")
    assert rows[0] == ["bundle", "coefficient"] and len(rows) == 12
    pmf = np.array([float(r[1]) for r in read_rows(out / "pmf.csv")[1:]])
    assert pmf.sum() == pytest.approx(1.0, abs=1e-9)
    resolved = yaml.safe_load((out / "config.yaml").read_text())
    assert resolved["estimator"] == "fo" and resolved["lambda_rule"] == "theory_fo"


def test_estimate_local(tmp_path, conditional_csv):
    out = tmp_path / "out"
    code = main(["estimate", "--input", str(conditional_csv), "--estimator", "fo", "--anchors", "0.5",
                 "--bandwidth", "0.3", "--out", str(out)])
    assert code == 0
    rows = read_rows(out / "local_fit.csv")[1:]
    assert sum(r[2] == "level" for r in rows) == 11
    assert sum(r[2] == "slope1" for r in rows) == 11


def test_missing_input_is_config_error(tmp_path):
    assert main(["estimate", "--input", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 1
    assert (tmp_path / "o" / "error.csv").exists()


def test_bad_scenario_exit_code(tmp_path):
    assert main(["simulate", "--scenario", "unconditional-s3", "--out", str(tmp_path)]) == 1


def test_simulate_and_diagnose(tmp_path):
    out = tmp_path / "sim"
    code = main(["simulate", "--scenario", "unconditional-s2", "--reps", "2", "--lambda-rule", "theory_fo",
                 "--estimator", "fo_I,plugin_I", "--out", str(out)])
    assert code == 0
    for name in ("summary.csv", "raw.csv", "fits.csv", "failures.csv", "table.txt", "config.yaml"):
        assert (out / name).exists()
    out = tmp_path / "diag"
    assert main(["diagnose", "--scenario", "conditional-s5", "--reps", "2", "--out", str(out)]) == 0
    assert read_rows(out / "quantiles.csv")[0] == ["quantile", "value"]


def test_coverage_command(tmp_path):
    out = tmp_path / "cov"
    code = main(["coverage", "--scenario", "causal-s0-n200", "--reps", "2", "--out", str(out)])
    assert code == 0
    assert read_rows(out / "coverage.csv")[0] == ["level", "MNL", "NW", "plugin", "FO"]
