import json

import pytest

from emofuse.config import RunConfig, load_config
from emofuse.errors import ConfigError


def test_defaults_follow_published_hyperparameters():
    cfg = RunConfig().validate()
    assert (cfg.lr, cfg.M, cfg.d_p, cfg.fe_heads) == (1e-5, 4, 1024, 8)
    assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.delta) == (0.2, 0.2, 1.0, 0.2)


def test_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lr": 0.5, "M": 2, "tau": 0.3}))
    cfg = load_config(p, {"M": 8}, base=RunConfig(d_z=16, fe_heads=4, tau=0.9))
    assert (cfg.lr, cfg.M, cfg.tau, cfg.d_z, cfg.fe_heads) == (0.5, 8, 0.3, 16, 4)


@pytest.mark.parametrize("bad", [
    {"tau": 0}, {"tau": -1}, {"M": 0}, {"d_z": 30}, {"alpha": float("inf")}, {"fuse_input": "mixed"},
    {"C": 1}, {"seed": -1},
])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        load_config(overrides=bad)


@pytest.mark.parametrize("raw", ['{"nope": 1}', '{"M": "four"}', '{"pos_emb": 1}', '[1, 2]', '{oops'])
def test_invalid_files(tmp_path, raw):
    p = tmp_path / "c.json"
    p.write_text(raw)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")


def test_integral_float_accepted_for_int():
    assert load_config(overrides={"M": 2.0}).M == 2
