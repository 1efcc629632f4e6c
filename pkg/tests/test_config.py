import pytest
import yaml

from lipsplat import config as C
from lipsplat.trainer import PRESETS


def test_defaults_validate():
    cfg = C.from_dict({})
    assert cfg.preset == "desk"
    assert cfg.data.pretrain.split == "all-train"
    for k in (1, 2, 3):
        assert cfg.stage(k) == PRESETS["desk"][k]


def test_partial_nested_mapping_keeps_container_defaults():
    cfg = C.from_dict({"data": {"pretrain": {"n_subjects": 2}}})
    assert cfg.data.pretrain.n_subjects == 2
    assert cfg.data.pretrain.split == "all-train"
    assert cfg.data.finetune.style == "mead"


@pytest.mark.parametrize("raw, where", [
    ({"seeed": 1}, "config"),
    ({"data": {"pretrain": {"colour": 1}}}, "data.pretrain"),
    ({"decoder": {"n_layer": 2}}, "decoder"),
    ({"stages": {3: {"lamda_read": 1.0}}}, "stages.3"),
])
def test_unknown_keys_rejected(raw, where):
    with pytest.raises(C.ConfigError, match="unknown key") as e:
        C.from_dict(raw)
    assert where in str(e.value)


@pytest.mark.parametrize("raw", [
    {"seed": "three"},
    {"deterministic": 1},
    {"stages": {4: {"epochs": 1}}},
    {"stages": {1: {"epochs": -1}}},
    {"stages": {3: {"lambda_read": "lots"}}},
    {"preset": "huge"},
])
def test_bad_values_rejected(raw):
    with pytest.raises(C.ConfigError):
        C.from_dict(raw)


def test_stage_overrides_merge_onto_preset():
    cfg = C.from_dict({"preset": "full", "stages": {3: {"lambda_read": 1e-6}}})
    s3 = cfg.stage(3)
    assert s3.lambda_read == 1e-6
    assert (s3.epochs, s3.batch_size, s3.grad_accum) == (100, 1, 4)


def test_env_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 1, "stages": {3: {"lambda_read": 1e-5}}}))
    env = {"LIPSPLAT_SEED": "7", "LIPSPLAT_STAGES__3__LAMBDA_READ": "2e-5",
           "LIPSPLAT_DATA__FINETUNE__N_SENTENCES": "6", "HOME": "/x"}
    cfg = C.load_config(p, environ=env)
    assert cfg.seed == 7
    assert cfg.stage(3).lambda_read == 2e-5
    assert cfg.data.finetune.n_sentences == 6
    # explicit keyword overrides beat the environment; None means "not given"
    assert C.load_config(p, environ=env, seed=9, out=None).seed == 9


def test_env_unknown_key_rejected():
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.load_config(environ={"LIPSPLAT_NOPE": "1"})


def test_roundtrip(tmp_path):
    cfg = C.from_dict({"seed": 4, "preset": "full", "stages": {2: {"epochs": 3}},
                       "data": {"finetune": {"n_sentences": 5}}})
    C.save_config(cfg, tmp_path / "c.yaml")
    again = C.load_config(tmp_path / "c.yaml", environ={})
    assert C.to_dict(again) == C.to_dict(cfg)


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(C.ConfigError, match="does not exist"):
        C.load_config(tmp_path / "nope.yaml", environ={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a\n- b\n")
    with pytest.raises(C.ConfigError, match="mapping"):
        C.load_config(bad, environ={})


def test_exponent_without_dot_is_a_float(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("stages:\n  3:\n    lambda_read: 1e-5\n")
    assert C.load_config(p, environ={}).stage(3).lambda_read == 1e-5
