import pytest

from ifdreid.config import RunConfig, load_config, parse_override
from ifdreid.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.loss.tau, cfg.loss.T, cfg.loss.lam) == (0.1, 0.5, 1.0)
    assert (cfg.sampler.mode, cfg.train.lr, cfg.backbone.ikt_kernel) == ("proportional-ras", 3.5e-4, 7)


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("loss:\n  tau: 0.2\n  lambda: 0.5\nsampler.P: 8\n")
    cfg = load_config(path, ["loss.tau=0.3"])
    assert cfg.loss.tau == 0.3 and cfg.loss.lam == 0.5 and cfg.sampler.P == 8


@pytest.mark.parametrize("item", ["loss.nope=1", "nosection.x=1", "loss=1"])
def test_unknown_keys_rejected(item):
    with pytest.raises(ConfigError):
        load_config(None, [item])


@pytest.mark.parametrize("item", ["sampler.P=2.5", "train.flip=maybe", "loss.tau=fast", "backbone.widths=3"])
def test_types_checked(item):
    with pytest.raises(ConfigError):
        load_config(None, [item])


def test_integer_accepted_for_float():
    assert load_config(None, ["loss.tau=1"]).loss.tau == 1.0


def test_missing_file():
    with pytest.raises(FileNotFoundError, match="nope.yaml"):
        load_config("nope.yaml")


def test_invalid_value_is_config_error():
    with pytest.raises(ConfigError):
        load_config(None, ["loss.tau=-1"])


def test_override_syntax():
    assert parse_override("a.b=[1, 2]") == ("a.b", [1, 2])
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_dump_round_trip(tmp_path):
    cfg = load_config(None, ["loss.lambda=0.25", "backbone.widths=[8,8,8,8]"])
    cfg.dump(tmp_path / "e.yaml")
    again = load_config(tmp_path / "e.yaml")
    assert again == cfg
    assert "lambda" in (tmp_path / "e.yaml").read_text()


def test_hash_ignores_variant_only():
    a = load_config(None, ["train.variant=baseline"])
    b = load_config(None, ["train.variant=ifd"])
    c = load_config(None, ["train.seed=3"])
    assert a.hash() == b.hash() != c.hash()
