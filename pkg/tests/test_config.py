"""Config tree: defaults, strict merging, dot-path overrides, hashing."""

import json

import pytest

from lcr2s.config import (DEFAULTS, ConfigError, apply_override, config_hash,
                          load_config, synthetic_config, train_config,
                          validate)


def test_defaults_load_and_validate():
    cfg = load_config()
    assert cfg == DEFAULTS
    assert cfg is not DEFAULTS  # deep copy, caller may mutate
    validate(cfg)


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainning": {"P": 4}}))
    with pytest.raises(ConfigError, match="unknown config key: trainning"):
        load_config(p)
    p.write_text(json.dumps({"training": {"PP": 4}}))
    with pytest.raises(ConfigError, match="training.PP"):
        load_config(p)
    p.write_text(json.dumps({"training": 7}))
    with pytest.raises(ConfigError, match="must be a table"):
        load_config(p)


def test_file_overlay_keeps_other_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"training": {"P": 4}, "encoder": {"d": 32}}))
    cfg = load_config(p)
    assert cfg["training"]["P"] == 4
    assert cfg["encoder"]["d"] == 32
    assert cfg["training"]["K"] == DEFAULTS["training"]["K"]


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_dot_path_override_coercion():
    cfg = load_config(overrides=[
        "training.P=8",
        "losses.lambda2=0.5",
        "mhaf.shared=false",
        "training.decay_epochs_teacher=[3,5]",
        "training.kd_mode=ti",
    ])
    assert cfg["training"]["P"] == 8
    assert cfg["losses"]["lambda2"] == 0.5
    assert cfg["mhaf"]["shared"] is False
    assert cfg["training"]["decay_epochs_teacher"] == [3, 5]
    assert cfg["training"]["kd_mode"] == "ti"


def test_override_errors():
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        load_config(overrides=["training.P"])
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(overrides=["training.nope=1"])
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(overrides=["training=1"])
    cfg = load_config()
    with pytest.raises(ConfigError, match="boolean"):
        apply_override(cfg, "mhaf.shared", "maybe")


@pytest.mark.parametrize("override,msg", [
    ("mhaf.H=7", "divide"),
    ("mhaf.fusion=bogus", "fusion"),
    ("mhaf.attn_scale=x", "attn_scale"),
    ("training.kd_mode=xyz", "kd_mode"),
    ("training.support_mode=none", "support_mode"),
    ("eval.feature_stage=mid", "feature_stage"),
    ("data.n_identities=0", "n_identities"),
    ("training.P=0", "training.P"),
    ("training.K_t=-1", "support set sizes"),
    ("training.steps_per_epoch=-1", "steps_per_epoch"),
    ("losses.epsilon=0", "epsilon"),
])
def test_validation_rejects(override, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(overrides=[override])


def test_config_hash_stable_and_sensitive():
    a = config_hash(load_config())
    b = config_hash(load_config())
    c = config_hash(load_config(overrides=["training.P=8"]))
    assert a == b
    assert a != c
    assert len(a) == 12


def test_synthetic_config_mapping():
    syn = synthetic_config(load_config(overrides=["data.seed=5"]))
    assert syn.n_identities == DEFAULTS["data"]["n_identities"]
    assert syn.seed == 5


def test_train_config_per_stage():
    cfg = load_config(overrides=["training.epochs_teacher=3",
                                 "training.epochs_student=5"])
    t = train_config(cfg, "teacher")
    s = train_config(cfg, "student")
    assert t.epochs == 3 and s.epochs == 5
    assert t.decay_epochs == tuple(DEFAULTS["training"]["decay_epochs_teacher"])
    assert s.decay_epochs == tuple(DEFAULTS["training"]["decay_epochs_student"])
    assert t.config_hash == s.config_hash == config_hash(cfg)
    assert t.weights.lambda2 == DEFAULTS["losses"]["lambda2"]
    with pytest.raises(ConfigError, match="stage"):
        train_config(cfg, "referee")
