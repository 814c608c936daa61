import json

import pytest

from subjsync.config import FIELD_NAMES, RunConfig, default_config, default_config_text, load_config, loads_config
from subjsync.errors import ConfigError


def test_default_resource_matches_dataclass_defaults():
    assert default_config() == RunConfig()
    assert set(json.loads(default_config_text())) == set(FIELD_NAMES)


def test_round_trip():
    cfg = RunConfig(seed=4, gamma=0.5, subset=(0, 2), rfh_layers=(1,))
    assert loads_config(cfg.dumps()) == cfg


def test_default_sizes_and_coefficients():
    cfg = RunConfig()
    assert (cfg.n_images, cfg.grid_h, cfg.grid_w, cfg.d_model, cfg.d_k, cfg.heads, cfg.blocks, cfg.timesteps) == \
        (5, 16, 16, 64, 64, 4, 4, 20)
    assert cfg.gamma == 0.3 and cfg.lam == 0.7


def test_missing_field_named():
    data = RunConfig().to_dict()
    del data["gamma"]
    with pytest.raises(ConfigError, match="missing field gamma"):
        loads_config(json.dumps(data))


def test_unknown_field_named():
    data = RunConfig().to_dict()
    data["colour"] = 1
    with pytest.raises(ConfigError, match="unknown field colour"):
        loads_config(json.dumps(data))


@pytest.mark.parametrize("field,value", [
    ("gamma", 1.5), ("lam", -0.1), ("tau", 0.0), ("p_attn", 1.0), ("heads", 3), ("n_images", 0),
    ("threshold", "magic"), ("subset", [7]), ("subset", [1, 1]), ("use_bli", 1), ("seed", -1),
    ("rfh_layers", [9]), ("cross_attn_layers", []),
])
def test_out_of_range_rejected(field, value):
    data = RunConfig().to_dict()
    data[field] = value
    with pytest.raises(ConfigError):
        loads_config(json.dumps(data))


def test_bad_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        loads_config("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
