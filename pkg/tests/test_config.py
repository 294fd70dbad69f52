import json

import pytest

from fisheye_splat.core.config import (
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
)
from fisheye_splat.core.errors import ConfigError


def test_documented_defaults():
    cfg = RunConfig()
    assert cfg.train.lr.position_init == 1.6e-4
    assert cfg.train.lr.position_final == 1.6e-6
    assert cfg.train.lr.opacity == 5e-2
    assert cfg.train.weights.lambda_rgb == 0.2
    assert cfg.train.weights.reg == 0.01
    assert cfg.train.weights.lidar == 0.1
    assert (cfg.train.densify_from, cfg.train.densify_interval) == (500, 100)
    assert cfg.render.order == 1 and cfg.render.stretch_tangential and cfg.render.stretch_polar
    assert cfg.lidar.fov_deg == 100.0


def test_load_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "[train]\niterations = 50\nseed = 4\n\n[train.lr]\nsh = 0.01\n\n"
        "[render]\norder = 2\nbackground = [1, 1, 1]\n"
    )
    cfg = load_config(path)
    assert cfg.train.iterations == 50
    assert cfg.train.lr.sh == 0.01
    assert cfg.train.lr.scaling == 1e-3
    assert cfg.render.order == 2
    assert cfg.render.background == (1.0, 1.0, 1.0)


def test_load_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"lidar": {"resolution": 64}}))
    assert load_config(path).lidar.resolution == 64


@pytest.mark.parametrize("data,field", [
    ({"train": {"iterations": -1}}, "train.iterations"),
    ({"train": {"lr": {"sh": 0.0}}}, "train.lr.sh"),
    ({"render": {"order": 3}}, "render.order"),
    ({"render": {"colour": 1}}, "render.colour"),
    ({"sensors": {}}, "sensors"),
    ({"train": {"use_depth": "yes"}}, "train.use_depth"),
    ({"train": {"iterations": 1.5}}, "train.iterations"),
])
def test_invalid_values_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(data)


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\niterations = 3")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(bad)
    assert load_config(None) == RunConfig()


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["train.iterations=7", "render.stretch_polar=false",
                                        "train.lr.position_init=1e-3", "render.background=[0.5,0.5,0.5]"])
    assert cfg.train.iterations == 7
    assert cfg.render.stretch_polar is False
    assert cfg.train.lr.position_init == 1e-3
    assert cfg.render.background == (0.5, 0.5, 0.5)
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.iterations"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train=1"])


def test_hash_is_stable_and_sensitive():
    a, b = RunConfig(), config_from_dict(config_to_dict(RunConfig()))
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64
    assert config_hash(apply_overrides(a, ["train.seed=1"])) != config_hash(a)
