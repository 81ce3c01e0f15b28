import json

import pytest

from uniremoval import config as C
from uniremoval.imagedata import DegradationKind


def test_paper_defaults():
    assert C.load_train_config("teacher", profile="paper").batch_size == 16
    kt = C.load_train_config("kt", profile="paper")
    # 16 per kind: b/k samples of each of the three kinds
    assert (kt.batch_size, kt.patch_size, kt.tau, kt.lr, kt.epochs) == (48, 128, 1e-6, 2e-5, 400)
    assert kt.betas == (0.9, 0.999)
    assert (kt.weights.alpha1, kt.weights.alpha2, kt.alpha1_decay) == (0.5, 0.1, 0.99)
    da = C.load_train_config("da", profile="paper")
    assert (da.epochs, da.lr, da.betas, da.batch_size) == (40, 5e-6, (0.5, 0.999), 48)
    assert (da.weights.lambda1, da.weights.lambda2, da.weights.lambda3) == (0.5, 0.1, 0.1)
    assert da.lambda4 == 0.01
    assert kt.kinds == tuple(DegradationKind)


def test_desk_profile_overrides_sizes():
    t = C.load_train_config("teacher", profile="desk")
    assert (t.batch_size, t.patch_size, t.iterations) == (6, 64, 2000)
    assert C.load_train_config("kt").batch_size == C.load_train_config("da").batch_size == 6
    assert C.load_train_config("kt").iterations == 1000
    assert C.load_train_config("da").iterations == 500
    assert t.phi.mode == "random" and t.backbone.stages == 1


def test_overrides():
    cfg = C.load_train_config("kt", overrides=["lr=1e-4", "backbone.base_channels=12", "kinds=[\"haze\"]"])
    assert cfg.lr == 1e-4 and cfg.backbone.base_channels == 12 and cfg.kinds == (DegradationKind.HAZE,)
    with pytest.raises(KeyError):
        C.load_train_config("kt", overrides=["no_such_key=1"])
    with pytest.raises(ValueError):
        C.load_train_config("kt", overrides=["lr"])


def test_parse_value():
    assert C.parse_value("3") == 3 and C.parse_value("true") is True
    assert C.parse_value("hello") == "hello" and C.parse_value("[1, 2]") == [1, 2]


def test_profile_inheritance_and_cycles():
    raw = {"profiles": {"a": {"x": 1, "n": {"p": 1, "q": 2}}, "b": {"inherits": "a", "n": {"q": 3}}}}
    assert C.resolve_profile(raw, "b") == {"x": 1, "n": {"p": 1, "q": 3}}
    raw["profiles"]["a"]["inherits"] = "b"
    with pytest.raises(ValueError, match="cycle"):
        C.resolve_profile(raw, "b")
    with pytest.raises(KeyError):
        C.resolve_profile(raw, "zzz")


def test_config_hash_and_roundtrip():
    a = C.load_train_config("kt")
    assert a.config_hash() == C.load_train_config("kt").config_hash()
    assert a.replace(lr=0.5).config_hash() != a.config_hash()
    assert C.TrainConfig.from_dict(a.to_dict()) == a


def test_validation():
    with pytest.raises(ValueError, match="divisible"):
        C.TrainConfig(stage="kt", batch_size=4)
    with pytest.raises(ValueError):
        C.TrainConfig(stage="bogus")
    with pytest.raises(ValueError):
        C.TrainConfig(stage="kt", tau=0.0)
    with pytest.raises(KeyError, match="unknown"):
        C.TrainConfig.from_dict({"stage": "kt", "nonsense": 1})


def test_config_dir_env(tmp_path, monkeypatch):
    raw = C.load_config_file()
    raw["profiles"]["desk"]["stages"]["kt"]["batch_size"] = 9
    (tmp_path / C.DEFAULT_CONFIG_NAME).write_text(json.dumps(raw))
    monkeypatch.setenv(C.CONFIG_DIR_ENV, str(tmp_path))
    assert C.load_train_config("kt").batch_size == 9
