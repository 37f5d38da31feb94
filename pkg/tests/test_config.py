"""Configuration loader tests: typed validation with dotted key paths
and source-line reporting, plus cross-field consistency checks."""
import copy

import numpy as np
import pytest
import yaml

from reachtraj.config import ConfigError, load_config

from conftest import CONFIG_PATH


@pytest.fixture()
def base():
    with open(CONFIG_PATH) as fh:
        return yaml.safe_load(fh)


def _write(tmp_path, data):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_default_config_loads():
    cfg = load_config(CONFIG_PATH)
    assert cfg.model.n_q == 6 and cfg.model.n_u == 3
    assert cfg.n_samples >= 1
    np.testing.assert_allclose(cfg.y_g, [0.51, 0.52])
    assert cfg.mode in ("full", "boundary")
    assert cfg.sigma_x.shape == (12, 12)


def test_missing_key_reports_dotted_path(tmp_path, base):
    data = copy.deepcopy(base)
    del data["sampling"]["seed"]
    with pytest.raises(ConfigError, match=r"sampling\.seed"):
        load_config(_write(tmp_path, data))


def test_missing_section(tmp_path, base):
    data = copy.deepcopy(base)
    del data["goal"]
    with pytest.raises(ConfigError, match="goal"):
        load_config(_write(tmp_path, data))


def test_bad_type_reports_line(tmp_path, base):
    data = copy.deepcopy(base)
    data["grid"]["cols"] = "three"
    path = _write(tmp_path, data)
    with open(path) as fh:
        lineno = next(i for i, l in enumerate(fh, start=1)
                      if l.strip().startswith("cols:"))
    with pytest.raises(ConfigError, match=rf"grid\.cols.*line {lineno}"):
        load_config(path)


def test_unknown_key_rejected(tmp_path, base):
    data = copy.deepcopy(base)
    data["reach"]["n_tt"] = 3
    with pytest.raises(ConfigError, match="n_tt"):
        load_config(_write(tmp_path, data))


def test_shape_mismatch(tmp_path, base):
    data = copy.deepcopy(base)
    data["initial_state"]["q_rad"] = [0.0, 0.0, 0.0]
    with pytest.raises(ConfigError, match=r"initial_state\.q_rad"):
        load_config(_write(tmp_path, data))


def test_crossed_bounds(tmp_path, base):
    data = copy.deepcopy(base)
    data["constraints"]["u_lower_nm"] = [10.0, 10.0, 10.0]
    data["constraints"]["u_upper_nm"] = [-10.0, -10.0, -10.0]
    with pytest.raises(ConfigError, match="lower bound exceeds"):
        load_config(_write(tmp_path, data))


def test_covariance_must_be_spd(tmp_path, base):
    data = copy.deepcopy(base)
    data["sampling"]["cov_u"] = [[1.0, 2.0, 0.0], [2.0, 1.0, 0.0],
                                 [0.0, 0.0, 1.0]]
    with pytest.raises(ConfigError, match="positive definite"):
        load_config(_write(tmp_path, data))


def test_obstacle_outside_grid(tmp_path, base):
    data = copy.deepcopy(base)
    data["grid"]["obstacles"] = [[9, 9]]
    with pytest.raises(ConfigError, match="obstacles"):
        load_config(_write(tmp_path, data))


def test_goal_outside_grid(tmp_path, base):
    data = copy.deepcopy(base)
    data["goal"]["output_m"] = [5.0, 5.0]
    with pytest.raises(ConfigError, match="outside the planner grid"):
        load_config(_write(tmp_path, data))


def test_mode_choice(tmp_path, base):
    data = copy.deepcopy(base)
    data["reach"]["mode"] = "sideways"
    with pytest.raises(ConfigError, match="one of"):
        load_config(_write(tmp_path, data))


def test_overrides(tmp_path, base):
    cfg = load_config(_write(tmp_path, base), overrides={"mode": "full",
                                                         "threads": 4})
    assert cfg.mode == "full" and cfg.threads == 4


def test_unreadable_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/cfg.yaml")
