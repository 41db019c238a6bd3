import json
import subprocess
import sys

import pandas as pd
import pytest

from copyspace.cli import main

GEN = {"n_firms": 12, "n_products": 50, "n_periods": 4, "n_draws": 20, "schema_version": 1}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "gen.json", GEN)
    assert main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(root / "data")]) == 0
    return root / "data"


def test_gen_data_is_byte_identical(tmp_path, data_dir):
    cfg = write(tmp_path / "gen.json", GEN)
    assert main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "again")]) == 0
    assert outputs(tmp_path / "again") == outputs(data_dir)
    m1 = json.loads((data_dir / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
    for key in ("config_hash", "seed", "version", "outputs", "flags"):
        assert m1[key] == m2[key]
    assert set(m1["outputs"]) == set(outputs(data_dir))


def test_estimate_demand_2sls(tmp_path, data_dir):
    cfg = write(tmp_path / "c.json", {"method": "2sls"})
    out = tmp_path / "est"
    assert main(["estimate-demand", "--config", cfg, "--data", str(data_dir), "--out", str(out)]) == 0
    params = json.loads((out / "params.json").read_text())
    assert params["beta_price"] < 0
    assert (out / "tsls_table.csv").exists() and (out / "manifest.json").exists()


def test_heatmap_grid(tmp_path, data_dir):
    cfg = write(tmp_path / "c.json", {"d_bars": [0.0, 0.05], "cost_levels": [0.0, 5000.0], "n_entry_firms": 4, "c_levels": [5], "n_per_level": 20})
    out = tmp_path / "hm"
    argv = ["counterfactual", "--mode", "heatmap", "--config", cfg, "--data", str(data_dir), "--seed", "1", "--threads", "2", "--out", str(out)]
    assert main(argv) == 0
    tab = pd.read_csv(out / "heatmap.csv")
    assert tab.groupby(["d_bar", "cost_level"]).ngroups == 4
    assert len(tab) == 4 * tab.metric.nunique()
    serial = tmp_path / "hm1"
    argv[argv.index("2")] = "1"
    argv[-1] = str(serial)
    assert main(argv) == 0
    assert (serial / "heatmap.csv").read_bytes() == (out / "heatmap.csv").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["counterfactual", "--mode", "removal"],
        ["counterfactual", "--mode", "relocate"],
        ["spatial-reg"],
        ["event-study"],
        ["diversion-curve"],
    ],
)
def test_other_commands(tmp_path, data_dir, argv):
    out = tmp_path / "o"
    cfg = []
    if argv[0] == "counterfactual":
        cfg = ["--config", write(tmp_path / "c.json", {"d_bars": [0.0, 0.1], "c_levels": [5], "n_per_level": 10})]
    assert main(argv + cfg + ["--data", str(data_dir), "--seed", "2", "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    assert len(list(out.glob("*.csv"))) >= 1


@pytest.mark.parametrize(
    "argv",
    [
        ["estimate-demand", "--out", "OUT"],
        ["estimate-demand", "--data", "DATA"],
        ["spatial-reg", "--bogus", "1", "--data", "DATA", "--out", "OUT"],
        ["counterfactual", "--mode", "sideways", "--data", "DATA", "--out", "OUT"],
        ["spatial-reg", "--threads", "0", "--data", "DATA", "--out", "OUT"],
        ["estimate-supply", "--data", "DATA", "--out", "OUT"],
        ["counterfactual", "--mode", "removal", "--data", "DATA", "--out", "OUT"],
    ],
)
def test_usage_errors_leave_no_output(tmp_path, data_dir, argv):
    out = tmp_path / "never"
    subst = {"DATA": str(data_dir), "OUT": str(out)}
    assert main([subst.get(a, a) for a in argv]) == 1
    assert not out.exists()


def test_unknown_config_key(tmp_path, data_dir):
    cfg = write(tmp_path / "c.json", {"nope": 1})
    assert main(["spatial-reg", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_io_error_exit_code(tmp_path):
    assert main(["spatial-reg", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    assert not (tmp_path / "o").exists()


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "copyspace.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("gen-data", "estimate-demand", "estimate-supply", "counterfactual", "spatial-reg", "event-study", "diversion-curve"):
        assert name in res.stdout
