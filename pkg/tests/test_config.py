from dataclasses import replace

import pytest

from petlab import config as cfgmod
from petlab.config import ConfigError, ExperimentConfig


def test_text_roundtrip_is_lossless():
    cfg = replace(ExperimentConfig(), method="gated_small", r=24, lr=0.0005,
                  tasks="lookup,copy", encoder_ln_trainable=False)
    text = cfgmod.to_text(cfg)
    back = cfgmod.from_text(text)
    assert back == cfg
    assert cfgmod.to_text(back) == text


def test_unknown_key_is_a_hard_error():
    with pytest.raises(ConfigError) as err:
        cfgmod.from_text("method = gated_large\nlerning_rate = 0.1\n")
    assert "lerning_rate" in str(err.value)
    assert "2" in str(err.value)  # line number


def test_bool_and_numeric_parsing():
    cfg = cfgmod.from_text(
        "freeze.encoder_ln_trainable = false\nr = 24\ns = 0.25\nvisual_gate = true\n"
    )
    assert cfg.encoder_ln_trainable is False
    assert cfg.r == 24
    assert cfg.s == 0.25
    assert cfg.visual_gate is True


def test_bad_value_reports_key():
    with pytest.raises(ConfigError) as err:
        cfgmod.from_text("r = many\n")
    assert "r" in str(err.value)


def test_overrides_apply_and_validate():
    cfg = ExperimentConfig()
    out = cfgmod.apply_overrides(cfg, ["method=gated_small", "backbone.d=32", "seed=9"])
    assert out.method == "gated_small"
    assert out.backbone.d == 32
    assert out.seed == 9
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfg, ["nope=1"])


def test_invalid_method_rejected():
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), method="magic").validate()
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), visual_mode="sometimes").validate()
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), tasks="").validate()


def test_config_hash_tracks_content():
    a = cfgmod.config_hash(ExperimentConfig())
    b = cfgmod.config_hash(ExperimentConfig())
    c = cfgmod.config_hash(replace(ExperimentConfig(), seed=1))
    assert a == b
    assert a != c


def test_save_load_roundtrip(tmp_path):
    cfg = replace(ExperimentConfig(), method="lora", r=8)
    path = tmp_path / "x.cfg"
    cfgmod.save(cfg, path)
    assert cfgmod.load(path) == cfg
