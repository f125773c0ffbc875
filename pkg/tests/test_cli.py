import json
from pathlib import Path

import pytest

from lensxray.cli import build_parser, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_scatter_writes_outputs(tmp_path):
    assert main(["scatter", str(CONFIGS / "euclid.toml"), "--out", str(tmp_path), "--quiet"]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["passed"] and len(man["config_hash"]) == 64
    assert {"numpy", "scipy", "python"} <= set(man["versions"])
    assert (tmp_path / "scatter.csv").read_text().startswith("ray,beta,impact")
    assert json.loads((tmp_path / "scatter.json").read_text())["subcommand"] == "scatter"


def test_csv_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["xray", str(CONFIGS / "bump.toml"), "--set", "rays.count=8", "--out", str(out), "--quiet"]) == 0
    assert (a / "xray.csv").read_bytes() == (b / "xray.csv").read_bytes()


def test_usage_and_config_errors_exit_2(tmp_path, capsys):
    cfg = str(CONFIGS / "bump.toml")
    assert main(["trace", cfg, "--set", "rays.nope=1", "--out", str(tmp_path)]) == 2
    assert "rays.nope" in capsys.readouterr().err
    assert main(["trace", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 2
    assert main(["acceptance", cfg, "--only", "x", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["bogus", cfg])
    assert exc.value.code == 2


def test_failed_check_exits_1(tmp_path):
    # too few path nodes for the potential-annihilation threshold
    args = ["potential-check", str(CONFIGS / "bump.toml"), "--set", "quadrature.path_nodes=16",
            "--out", str(tmp_path), "--quiet"]
    assert main(args) == 1
    assert json.loads((tmp_path / "potential_check.json").read_text())["passed"] is False
