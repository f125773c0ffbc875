from pathlib import Path

import pytest

from lensxray.config import ConfigError, ExperimentConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("name", ["desk", "euclid", "bump", "focusing"])
def test_shipped_configs_validate_and_round_trip(name):
    cfg = ExperimentConfig.load(CONFIGS / f"{name}.toml")
    again = ExperimentConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.hash() == cfg.hash()


def test_override_changes_hash():
    cfg = ExperimentConfig.load(CONFIGS / "desk.toml")
    new = cfg.with_overrides(["inversion.reg=1e-5", "rays.count=8"])
    assert new.inversion.reg == 1e-5 and new.rays.count == 8
    assert new.hash() != cfg.hash()


@pytest.mark.parametrize("override,key", [
    ("inversion.nope=1", "inversion.nope"),
    ("nosection.reg=1", "nosection.reg"),
    ("rays.count=-3", "rays.count"),
    ("rays.count=1.5", "rays.count"),
    ("domain.inner_radius=2.0", "domain.inner_radius"),
    ("grid.n=3", "grid.n"),
])
def test_bad_overrides_name_the_key(override, key):
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        cfg.with_overrides([override])


def test_override_without_equals_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(["inversion.reg"])


def test_unknown_table_and_bad_toml():
    with pytest.raises(ConfigError, match="unknown config key 'extra'"):
        ExperimentConfig.loads("[extra]\nx = 1\n")
    with pytest.raises(ConfigError, match="not valid TOML"):
        ExperimentConfig.loads("[domain\n")


def test_nonpositive_metric_rejected():
    text = "[[metric.bumps]]\ncenter = [0.0, 0.0]\nwidth = 0.3\namplitude = -5.0\n"
    with pytest.raises(ConfigError, match="metric.bumps"):
        ExperimentConfig.loads(text)


def test_wrong_dimension_bump_rejected():
    text = "[[field.bumps]]\ncenter = [0.0, 0.0, 0.0]\nwidth = 0.3\namplitude = 1.0\n"
    with pytest.raises(ConfigError, match=r"field\.bumps\[0\]\.center"):
        ExperimentConfig.loads(text)
