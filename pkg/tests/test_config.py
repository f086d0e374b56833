from __future__ import annotations

import pytest

from dosedr import config as cfgmod
from dosedr.errors import ConfigError


def test_parse_lines_and_comments():
    cfg = cfgmod.parse_lines([
        "# comment", "", "smoother.kernel = Gaussian  # trailing",
        "simulation.alpha = 0.1:0.4:0.03", "simulation.n = 500, 2000",
        "features.quadratic_a = no", "smoother.bandwidth = auto",
    ])
    assert cfg["smoother.kernel"] == "gaussian"
    assert len(cfg["simulation.alpha"]) == 11 and cfg["simulation.alpha"][-1] == pytest.approx(0.4)
    assert cfg["simulation.n"] == (500, 2000)
    assert cfg["features.quadratic_a"] is False
    assert cfg["smoother.bandwidth"] is None


def test_unknown_and_malformed():
    with pytest.raises(ConfigError, match="unknown"):
        cfgmod.parse_lines(["smoother.colour = red"])
    with pytest.raises(ConfigError, match=":1:"):
        cfgmod.parse_lines(["estimation.rotate = perhaps"])
    with pytest.raises(ConfigError):
        cfgmod.parse_lines(["no equals sign"])
    with pytest.raises(ConfigError):
        cfgmod.resolve({"x.y": 1})


def test_dump_round_trip(tmp_path):
    cfg = cfgmod.resolve({"simulation.alpha": (0.1, 0.25), "simulation.bandwidth": "rule",
                          "features.interactions": ("V1", "V3")})
    cfgmod.dump(cfg, tmp_path / "c.cfg", header="test")
    assert cfgmod.load(tmp_path / "c.cfg") == cfg
    cfgmod.dump(cfgmod.resolve(), tmp_path / "d.cfg")
    assert cfgmod.load(tmp_path / "d.cfg") == cfgmod.resolve()


def test_missing_file():
    with pytest.raises(ConfigError):
        cfgmod.load("/nonexistent/file.cfg")


@pytest.mark.parametrize("name", ["rmse_alpha.cfg", "misspecification.cfg", "supervised.cfg"])
def test_shipped_configs_load(name):
    from pathlib import Path
    cfg = cfgmod.resolve(cfgmod.load(Path(__file__).resolve().parents[1] / "configs" / name))
    assert cfg["simulation.M"] >= 100
