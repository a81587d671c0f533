import logging

import pytest
from hypothesis import given, settings, strategies as st

from edclab.config import (PRESETS, ConfigError, CondenseConfig, bundled_config_path,
                           load_config, make_config, validate)


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert (cfg.alpha, cfg.zeta, cfg.tau, cfg.beta) == (0.5, 2.0, 4.0, 0.99)
    assert cfg.flatness_weight == 0.25
    assert cfg.eval_ema_rate == 0.99
    assert cfg.crop_scale_min == 0.5
    assert cfg.synth_iters == 2000
    assert (cfg.synth_lr, cfg.eval_lr) == (0.05, 0.001)


def test_alpha_one_is_valid(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("alpha: 1.0\n")
    assert load_config(p).alpha == 1.0


def test_alpha_out_of_range_names_field(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("alpha: 1.5\n")
    with pytest.raises(ConfigError, match="alpha") as info:
        load_config(p)
    assert info.value.field_name == "alpha"
    assert "[0, 1]" in str(info.value)


@pytest.mark.parametrize("field,value", [("beta", 1.0), ("beta", 0.0), ("tau", 0.0),
                                         ("eval_ema_rate", 1.0), ("crop_scale_min", 0.0),
                                         ("ipc", 0), ("zeta", -1.0)])
def test_range_violations(field, value):
    with pytest.raises(ConfigError) as info:
        make_config({field: value})
    assert info.value.field_name == field


def test_parse_failure(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("alpha: [1, 2\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(p)


def test_unknown_field_and_bad_choice():
    with pytest.raises(ConfigError, match="unknown config field"):
        make_config({"alpah": 0.3})
    with pytest.raises(ConfigError):
        make_config({"schedule": "linear"})
    with pytest.raises(ConfigError):
        make_config({"ipc": "ten"})


def test_heavy_flatness_weight_is_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        cfg = make_config({"flatness_weight": 2.5})
    assert cfg.flatness_weight == 2.5
    assert "degrade" in caplog.text


def test_overrides_beat_file_beat_preset(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("preset: A\nalpha: 0.7\nzeta: 3\n")
    cfg = load_config(p, {"zeta": 1.5, "tau": None})
    assert cfg.init == "gaussian"          # from preset A
    assert cfg.alpha == 0.7                # file beats preset
    assert cfg.zeta == 1.5                 # flag beats file
    assert cfg.tau == 4.0                  # unset flag leaves default


def test_presets_are_cumulative():
    a, g = make_config(preset="A"), make_config(preset="G")
    assert (a.alpha, a.flatness, a.eval_ema_rate, a.init) == (1.0, "none", 0.0, "gaussian")
    assert (g.alpha, g.flatness, g.flatness_weight, g.eval_ema_rate) == (0.5, "logits", 0.25, 0.99)
    assert (g.crop_scale_min, g.eval_batch, g.init) == (0.5, 25, "patch_concat")
    assert set(PRESETS) == set("ABCDEFG")


def test_bundled_configs_load():
    for name in ("toy1d", "digits32", "cifar10"):
        load_config(bundled_config_path(name))


@settings(max_examples=60, deadline=None)
@given(alpha=st.floats(0, 1), beta=st.floats(0.01, 0.999), tau=st.floats(0.1, 50),
       zeta=st.floats(1, 5), ipc=st.integers(1, 50))
def test_validate_is_idempotent(alpha, beta, tau, zeta, ipc):
    c = validate(CondenseConfig(alpha=alpha, beta=beta, tau=tau, zeta=zeta, ipc=ipc))
    assert validate(validate(c)) == validate(c)


def test_config_hash_stable():
    assert make_config().config_hash() == make_config({}).config_hash()
    assert make_config().config_hash() != make_config({"seed": 1}).config_hash()
