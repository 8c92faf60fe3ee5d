from pathlib import Path

import pytest

from vnibcreg.config import ABLATION_ROWS, DEFAULTS, ConfigError, ExperimentConfig, flatten, parse_overrides
from vnibcreg.losses import LossWeights

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_are_full_scale_values():
    cfg = ExperimentConfig()
    assert cfg.loss_weights() == LossWeights(10, 10, 10, 13, 1.0, 1e-4)
    assert cfg.spectrogram_params().window_samples(1000) == 80
    assert cfg.spectrogram_params().hop_samples(1000) == 70
    assert cfg.crop_policy().crop_width(712) == 71
    assert cfg.encoder_config().family == "resnet34_1ch"
    p = cfg.projector_config()
    assert (p.hidden_dim, p.output_dim, p.whitening_iterations, p.whitening_group_size) == (1024, 512, 5, 64)
    assert (cfg["train.epochs"], cfg["train.batch_size"], cfg["train.learning_rate"]) == (300, 128, 0.001)
    assert (cfg["eval.encoder_lr"], cfg["eval.classifier_lr"], cfg["eval.seeds"]) == (0.0005, 0.001, [0, 1, 2])
    assert cfg.discriminator_config().hidden_dim is None


def test_unknown_keys_rejected_everywhere(tmp_path):
    with pytest.raises(ConfigError, match="train.epoch"):
        ExperimentConfig({"train.epoch": 3})
    (tmp_path / "c.toml").write_text("[train]\nepoch = 3\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.build(path=tmp_path / "c.toml")
    with pytest.raises(ConfigError):
        ExperimentConfig.build(profile="laptop")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"nope": 1})


def test_precedence(tmp_path):
    (tmp_path / "c.toml").write_text("[train]\nepochs = 7\nbatch_size = 16\n[model]\nencoder = 'resnet34_1ch'\n")
    cfg = ExperimentConfig.build("full", tmp_path / "c.toml", {"train.epochs": "9"})
    assert cfg["train.epochs"] == 9 and cfg["train.batch_size"] == 16
    desk = ExperimentConfig.build("desk", tmp_path / "c.toml")
    assert desk["model.encoder"] == "tiny_cnn" and desk["train.batch_size"] == 32


def test_shipped_configs_load():
    full = ExperimentConfig.build("full", CONFIGS / "full.toml")
    assert {k for k in DEFAULTS if full[k] != DEFAULTS[k]} == {"dataset.manifest"}
    desk = ExperimentConfig.build("desk", CONFIGS / "full.toml")
    assert desk["dataset.synthetic"] and desk["train.epochs"] == 30
    assert ExperimentConfig.build("desk", CONFIGS / "desk.toml")["dataset.synthetic_n_per_class"] == 50


def test_malformed_toml(tmp_path):
    (tmp_path / "bad.toml").write_text("[train\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.build(path=tmp_path / "bad.toml")


@pytest.mark.parametrize("key, raw, expected", [
    ("train.epochs", "12", 12),
    ("train.learning_rate", "1e-3", 0.001),
    ("loss.unbiased_variance", "false", False),
    ("eval.seeds", "0,1,2,3", [0, 1, 2, 3]),
    ("eval.n_percents", "5", [5]),
    ("dataset.synthetic_recipes", "Spike:chirp,Noise:noise", {"Spike": "chirp", "Noise": "noise"}),
    ("crop.policy", "RC", "RC"),
])
def test_string_coercion(key, raw, expected):
    assert ExperimentConfig({key: raw})[key] == expected


@pytest.mark.parametrize("key, raw", [
    ("train.epochs", "ten"), ("train.epochs", "2.5"), ("loss.unbiased_variance", "maybe"),
    ("crop.policy", "XC"), ("loss.tnc_variant", "both"), ("model.encoder", "vgg"),
])
def test_bad_values(key, raw):
    with pytest.raises(ConfigError):
        ExperimentConfig({key: raw})


def test_parse_overrides_and_flatten():
    assert parse_overrides(["a.b=1", "c.d = x=y"]) == {"a.b": "1", "c.d": "x=y"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    doc = {"train": {"epochs": 3}, "dataset": {"synthetic_recipes": {"Spike": "chirp"}}}
    assert flatten(doc) == {"train.epochs": 3, "dataset.synthetic_recipes": {"Spike": "chirp"}}


def test_json_echo_roundtrip():
    import json

    cfg = ExperimentConfig.build("desk")
    assert ExperimentConfig(json.loads(cfg.to_json())).values == cfg.values


def test_ablation_rows_are_valid_overrides():
    assert list(ABLATION_ROWS) == ["RandInit", "naive TNC", "naive VIbCReg", "VIbCReg+NC",
                                   "VIbCReg+NC+TNC-original", "VNIbCReg"]
    for overrides in ABLATION_ROWS.values():
        ExperimentConfig().with_overrides(overrides)


def test_cache_root_env(monkeypatch):
    monkeypatch.setenv("VNIBCREG_CACHE", "/tmp/somewhere")
    assert ExperimentConfig().cache_root() == "/tmp/somewhere"
    assert ExperimentConfig({"preprocess.cache_root": "/x"}).cache_root() == "/x"
