from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agemim.config import ConfigError, RunConfig, emit_config, load_config, parse_config


class TestParse:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config(emit_config(cfg)) == cfg

    def test_values_and_comments(self):
        cfg = parse_config("seed = 7  # shared\nlambda_mi = 0.25\nencoder_widths = 32 16\n"
                           "per_dim_density = false\nmode = no_aa\n")
        assert cfg.seed == cfg.gen.seed == cfg.train.seed == 7
        assert cfg.train.lambda_mi == 0.25
        assert cfg.train.encoder_widths == (32, 16)
        assert cfg.train.per_dim_density is False
        assert cfg.train.mode == "no_aa"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lambda_mii"):
            parse_config("lambda_mii = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("epochs = many\n")

    def test_invalid_combination(self):
        with pytest.raises(ConfigError):
            parse_config("lambda0 = 0.5\n")
        with pytest.raises(ConfigError):
            parse_config("p_target = 1.5\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config("epochs 3\n")

    def test_shipped_preset(self):
        cfg = load_config(Path(__file__).parents[1] / "configs" / "desk.conf")
        assert cfg.train.lambda_age == 0.3 and cfg.gen.num_speakers == 200

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 10, allow_nan=False), st.integers(1, 500), st.integers(0, 2**31),
           st.floats(1e-6, 1.0))
    def test_emit_parse_fixpoint(self, lam, epochs, seed, lr):
        text = f"lambda_age = {lam!r}\nepochs = {epochs}\nseed = {seed}\nest_lr = {lr!r}\n"
        cfg = parse_config(text)
        again = parse_config(emit_config(cfg))
        assert again == cfg
        assert emit_config(again) == emit_config(cfg)
