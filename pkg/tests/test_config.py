import pytest

from uma2.config import RunConfig, load_config, parse_config_text, write_config
from uma2.funnel import ConfigError


def test_defaults_valid():
    cfg = RunConfig().validate()
    assert cfg.model.dims == (512, 256, 128, 32)
    assert cfg.nsdn.dims == (128, 64, 32)
    assert cfg.sampling.counts().fixed == (1, 4, 20)
    assert cfg.train.lambdas == (1.0,) * 5
    assert (cfg.train.lr, cfg.train.batch_size, cfg.train.patience) == (0.001, 512, 3)
    assert (cfg.nsdn.p_floor, cfg.nsdn.w_max) == (0.01, 100.0)


def test_write_then_load_round_trip(tmp_path):
    cfg = RunConfig().replace(**{"train.lambdas": (0.5, 1, 2, 0, 1), "sampling.strategy": "ss-ab",
                                 "sim.seed": 7, "train.debias": False})
    write_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini").to_flat() == cfg.to_flat()


def test_ratio_override():
    cfg = parse_config_text("[sampling]\nratio = [2, 3, 10]\n")
    assert cfg.sampling.counts().fixed == (2, 3, 10)


@pytest.mark.parametrize("text, key", [
    ("[train]\nlr = 0\n", "train.lr"),
    ("[train]\nfoo = 1\n", "train.foo"),
    ("[bogus]\nx = 1\n", "bogus.x"),
    ("[sampling]\nstrategy = ss-z\n", "sampling.strategy"),
    ("[sim]\nnum_users = many\n", "sim.num_users"),
    ("[sim]\navg_recall_size = 5\navg_exposure_size = 9\n", "avg_exposure_size"),
    ("[nsdn]\nsharing_mode = tied\n", "nsdn.sharing_mode"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config_text(text).validate()


def test_overrides_apply_and_validate():
    cfg = load_config(None, {"train.epochs": "3"})
    assert cfg.train.epochs == 3
    with pytest.raises(ConfigError):
        load_config(None, {"train.batch_size": "0"})
