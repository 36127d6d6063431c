import pytest

from bwnkit.config import ConfigError, RunConfig, parse_config, render_config

GOOD = """
# run settings
[data]
count = 40
val_count = 10
seed = 3

[train]
lr = 0.001
epochs = 2

[kt]
lambda3 = 0.5
normalize_l2 = true

[schedule]
m0_epochs = 1
m1_epochs = 1
m2_epochs = 1
"""


class TestParse:
    def test_defaults_when_empty(self):
        cfg = parse_config("")
        assert cfg.data.count == 500
        assert cfg.train.lr == 1e-4
        assert cfg.schedule.m0_epochs == 2

    def test_values_applied(self):
        cfg = parse_config(GOOD)
        assert cfg.data.count == 40
        assert cfg.train.lr == 0.001
        assert cfg.kt.lambda3 == 0.5
        assert cfg.kt.normalize_l2 is True

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[bogus]\nx = 1\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[data]\nbogus = 1\n")

    def test_malformed_value(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config("[data]\ncount = many\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config("[data]\ncount\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_config("count = 3\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("[data]\ncount = 1\ncount = 2\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            parse_config("[kt]\nnormalize_l2 = maybe\n")

    def test_anchor_list(self):
        cfg = parse_config("[model]\nanchors = 0.1x0.2, 0.3x0.4\n")
        assert cfg.model.anchors == ((0.1, 0.2), (0.3, 0.4))

    def test_bad_anchor(self):
        with pytest.raises(ConfigError, match="WxH"):
            parse_config("[model]\nanchors = 0.1-0.2\n")

    def test_semantic_validation(self):
        with pytest.raises(ConfigError):
            parse_config("[data]\ncount = 0\n")
        with pytest.raises(ConfigError):
            parse_config("[kt]\nlambda1 = 0\nlambda2 = 0\n")
        with pytest.raises(ConfigError):
            parse_config("[train]\nlr = -1\n")


class TestRender:
    def test_roundtrip_equal(self):
        cfg = parse_config(GOOD)
        again = parse_config(render_config(cfg))
        assert again == cfg

    def test_default_roundtrip(self):
        cfg = RunConfig()
        assert parse_config(render_config(cfg)) == cfg

    def test_echo_lists_every_key(self):
        text = render_config(RunConfig())
        for key in ("count", "val_count", "anchors", "lr", "batch_size",
                    "lambda1", "lambda3", "m0_epochs", "reset_optimizer",
                    "kt_stagewise", "noise"):
            assert f"{key} = " in text
