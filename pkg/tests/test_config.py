"""Config parsing, validation, defaults, and round-trip serialization."""

import numpy as np
import pytest

from dqa.config import (ConfigError, ExperimentConfig, parse_config,
                        parse_config_text, serialize_config, with_overrides)
from dqa.quantizers import QuantizerSpec

MINIMAL = "data.kind = two_moons\ntrain.method = fp\n"


class TestParsing:
    def test_minimal_config_fills_defaults(self):
        cfg = parse_config_text(MINIMAL)
        assert cfg.method == "fp"
        assert cfg.epochs == 60
        assert cfg.batch_size == 32
        assert cfg.lr == 0.05
        assert cfg.lr_drop_factor == 0.1
        assert cfg.lr_drop_period == 20
        assert cfg.momentum == 0.9
        assert cfg.lam == 5.0
        assert (cfg.t_initial, cfg.t_final) == (100.0, 0.03)
        assert cfg.hidden == (12,)
        assert [s.label for s in cfg.quantizers] == ["minmax:2", "minmax:4", "minmax:8"]

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# comment\n\ndata.kind = blobs  # inline\n")
        assert cfg.data_kind == "blobs"

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as err:
            parse_config_text("data.kind = blobs\ntrain.warmup = 5\n")
        assert "train.warmup" in str(err.value)

    def test_descending_bitwidths_rejected(self):
        text = ("data.kind = blobs\nquantizers.q1 = minmax:8\n"
                "quantizers.q2 = minmax:4\nquantizers.q3 = minmax:2\n")
        with pytest.raises(ConfigError, match="ascending"):
            parse_config_text(text)

    def test_all_problems_reported_at_once(self):
        text = ("data.kind = nowhere\ntrain.epochs = 0\ntrain.lr = -1\n"
                "bogus.key = 1\n")
        with pytest.raises(ConfigError) as err:
            parse_config_text(text)
        problems = err.value.problems
        assert len(problems) >= 3
        joined = " ".join(problems)
        assert "bogus.key" in joined

    def test_gap_in_quantizer_slots(self):
        with pytest.raises(ConfigError, match="without gaps"):
            parse_config_text("quantizers.q1 = minmax:2\nquantizers.q3 = minmax:8\n")

    def test_method_quantizer_count_rules(self):
        with pytest.raises(ConfigError, match="fixed"):
            parse_config_text("train.method = fixed\n")  # default 3 quantizers
        with pytest.raises(ConfigError, match="br"):
            parse_config_text("train.method = br\nquantizers.q1 = minmax:2\n")

    def test_penalty_length_checked(self):
        with pytest.raises(ConfigError, match="penalties"):
            parse_config_text("quantizers.g = 1,4\n")  # 3 quantizers by default

    def test_conv_requires_images(self):
        with pytest.raises(ConfigError, match="conv"):
            parse_config_text("data.kind = blobs\nmodel.conv = 8:3\n")

    def test_bad_value_types(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            parse_config_text("train.epochs = many\n")


class TestRoundTrip:
    def test_parse_serialize_parse_identity(self):
        text = ("data.kind = two_moons\ndata.n = 600\ndata.noise = 0.15\n"
                "model.hidden = 8,8\ntrain.method = dqa\ntrain.epochs = 12\n"
                "train.lambda = 2.5\nquantizers.q1 = bwn\nquantizers.q2 = twn\n"
                "quantizers.q3 = minmax:8\nquantizers.g = 1,4,16\n")
        cfg = parse_config_text(text)
        again = parse_config_text(serialize_config(cfg))
        assert again == cfg

    def test_default_config_round_trips(self):
        cfg = ExperimentConfig()
        assert parse_config_text(serialize_config(cfg)) == cfg


class TestBundledConfigs:
    def test_dqa_minmax_248(self):
        cfg = parse_config("configs/dqa_minmax_248.cfg")
        assert cfg.method == "dqa"
        assert len(cfg.quantizers) == 3
        assert [s.bits for s in cfg.quantizers] == [2, 4, 8]
        assert np.array_equal(cfg.effective_penalties(), [1.0, 4.0, 16.0])
        assert (cfg.t_initial, cfg.t_final) == (100.0, 0.03)

    @pytest.mark.parametrize("name,method", [
        ("fp.cfg", "fp"),
        ("fixed_minmax2.cfg", "fixed"),
        ("br_minmax_248.cfg", "br"),
        ("dqa_bwn_twn_mm8.cfg", "dqa"),
    ])
    def test_other_bundled_configs_parse(self, name, method):
        cfg = parse_config(f"configs/{name}")
        assert cfg.method == method


class TestOverrides:
    def test_overrides_apply_and_validate(self):
        cfg = parse_config_text(MINIMAL)
        updated = with_overrides(cfg, method="dqa", seed=7)
        assert updated.method == "dqa" and updated.seed == 7
        with pytest.raises(ConfigError):
            with_overrides(cfg, method="fixed")  # 3 default quantizers

    def test_quantizer_spec_equality(self):
        assert QuantizerSpec("minmax", 2) == QuantizerSpec("minmax", 2)
