"""Configuration parsing, validation, and round-trips."""

from __future__ import annotations

import pytest

from sprc.config import (
    Mechanism,
    PromptMode,
    TrainConfig,
    dump_config,
    load_config,
    parse_config_text,
)
from sprc.errors import ConfigError


class TestValidate:
    def test_defaults_validate(self):
        cfg = TrainConfig().validate()
        assert cfg.gamma == 0.8 and cfg.tau == 100.0

    @pytest.mark.parametrize(
        "field,value",
        [
            ("gamma", -0.1),
            ("tau", 0.0),
            ("align_norm", "spectral"),
            ("aux_inner_steps", -1),
            ("aux_inner_lr", 0.0),
            ("aux_inner_lr", 1.5),
            ("aux_init_mode", "WARM"),
            ("lr", 0.0),
            ("weight_decay", -1.0),
            ("schedule", "linear"),
            ("batch_size", 0),
            ("steps", 0),
            ("prompt_length", 0),
            ("n_heads", 0),
            ("mlp_layers", 0),
            ("ema_decay", 1.5),
            ("clip_norm", -1.0),
            ("precision", "f16"),
            ("max_caption_len", 0),
        ],
    )
    def test_bad_field_rejected(self, field, value):
        cfg = TrainConfig(**{field: value})
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_seq_len_must_fit_prompt(self):
        with pytest.raises(ConfigError):
            TrainConfig(prompt_length=64, max_seq_len=64).validate()

    def test_baselines_drop_alignment_branch(self):
        cfg = TrainConfig(mechanism=Mechanism.LATE_FUSION, gamma=0.8).validate()
        assert cfg.gamma == 0.0 and cfg.aux_inner_steps == 0

    def test_sprc_keeps_alignment_branch(self):
        cfg = TrainConfig(mechanism=Mechanism.SPRC, gamma=0.8).validate()
        assert cfg.gamma == 0.8 and cfg.aux_inner_steps == 5


class TestRoundTrip:
    def test_dump_then_parse_is_identity(self):
        cfg = TrainConfig(
            gamma=0.25, mechanism=Mechanism.TEXT_INVERSION,
            prompt_mode=PromptMode.RC_ONLY, steps=7, lr=2e-3,
        ).validate()
        again = parse_config_text(dump_config(cfg))
        assert again == cfg

    def test_load_config_reads_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("gamma = 0.5\nsteps = 11\n# a comment\n\nmechanism = SPRC\n")
        cfg = load_config(path)
        assert cfg.gamma == 0.5 and cfg.steps == 11
        assert cfg.mechanism is Mechanism.SPRC

    def test_from_dict_accepts_typed_values(self):
        cfg = TrainConfig.from_dict({"mechanism": Mechanism.LATE_FUSION, "gamma": 0.8})
        assert cfg.mechanism is Mechanism.LATE_FUSION
        assert cfg.gamma == 0.0  # validated: baselines force gamma off


class TestParseDiagnostics:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="unknown config key 'learning_rate'"):
            parse_config_text("learning_rate = 1e-3\n")

    def test_missing_equals_names_line(self):
        with pytest.raises(ConfigError, match=r"run\.cfg:2"):
            parse_config_text("gamma = 0.5\nsteps 11\n", source="run.cfg")

    def test_duplicate_key_names_line(self):
        with pytest.raises(ConfigError, match=":3.*duplicate"):
            parse_config_text("gamma = 0.5\nsteps = 2\ngamma = 0.7\n")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError, match="empty key"):
            parse_config_text("= 3\n")

    def test_bad_int_names_field(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_config_text("steps = many\n")

    def test_bad_bool_names_field(self):
        with pytest.raises(ConfigError, match="tau_trainable"):
            parse_config_text("tau_trainable = maybe\n")

    def test_bool_spellings(self):
        assert parse_config_text("tau_trainable = yes\n").tau_trainable is True
        assert parse_config_text("tau_trainable = 0\n").tau_trainable is False

    def test_non_finite_float_rejected(self):
        with pytest.raises(ConfigError, match="finite"):
            parse_config_text("gamma = inf\n")

    def test_unknown_mechanism_lists_choices(self):
        with pytest.raises(ConfigError, match="EARLY_FUSION"):
            parse_config_text("mechanism = EARLY_FUSION\n")

    def test_unknown_prompt_mode_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("prompt_mode = CAPTION_ONLY\n")
