import numpy as np
import pytest

from neuromhe.config import (ENV_CONFIG_DIR, SCHEMA, defaults, dump_config, load_config,
                             parse_config)
from neuromhe.errors import ConfigError


def test_defaults_cover_schema():
    cfg = defaults()
    for sec, keys in SCHEMA.items():
        for key in keys:
            cfg.get(sec, key)
    assert cfg.run.horizon == 10 and cfg.train.W_e.shape == (6,)


def test_parse_overrides_and_round_trip():
    cfg = parse_config("[run]\nseed = 7\nhorizon = 20\n[train]\nW_e = 1, 2, 3, 4, 5, 6\n"
                       "per_step = no\n")
    assert cfg.run.seed == 7 and cfg.run.horizon == 20 and not cfg.train.per_step
    assert np.array_equal(cfg.train.W_e, np.arange(1, 7.0))
    back = parse_config(dump_config(cfg))
    assert back.as_dict() == cfg.as_dict()


@pytest.mark.parametrize("text", [
    "[nope]\na = 1\n",
    "[run]\nbogus = 1\n",
    "[run]\nhorizon = 0\n",
    "[run]\nseed = abc\n",
    "[train]\nW_e = 1, 2\n",
    "[train]\nper_step = maybe\n",
    "[solver]\nhessian = newton\n",
    "[run]\nmode = other\n",
    "[sim]\nc_v = -1, 0, 0\n",
    "not an ini file",
])
def test_invalid_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_set_validates():
    cfg = defaults()
    cfg.set("run", "horizon", 5)
    assert cfg.run.horizon == 5
    with pytest.raises(ConfigError):
        cfg.set("run", "horizon", 0)
    with pytest.raises(ConfigError):
        cfg.set("run", "colour", 1)


def test_load_from_env_dir(tmp_path, monkeypatch):
    (tmp_path / "a.ini").write_text("[run]\nseed = 3\n")
    monkeypatch.setenv(ENV_CONFIG_DIR, str(tmp_path))
    assert load_config("a.ini").run.seed == 3
    with pytest.raises(ConfigError):
        load_config("missing.ini")
    assert load_config(None).run.seed == 0
