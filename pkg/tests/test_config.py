import pytest

from fn2en.config import SCHEMA, ExperimentConfig, parse_config_text
from fn2en.errors import ConfigError
from fn2en.trainer import TrainSchedule


def test_parse_types_comments_and_relative_paths(tmp_path):
    (tmp_path / "cfg").mkdir()
    text = """
# leading comment
dataset = ../data/manifest.csv
seed = 7          # inline comment
model.convChannels = 8, 16,32
augment.horizontalFlip = no
analysis.layers = pool1, pool3
fold =
"""
    (tmp_path / "cfg" / "a.cfg").write_text(text)
    cfg = ExperimentConfig.load(tmp_path / "cfg" / "a.cfg")
    assert cfg["dataset"] == str((tmp_path / "data" / "manifest.csv").resolve())
    assert cfg["seed"] == 7 and cfg["fold"] is None
    assert cfg["model.convChannels"] == (8, 16, 32)
    assert cfg["augment.horizontalFlip"] is False
    assert cfg["analysis.layers"] == ("pool1", "pool3")


def test_every_problem_is_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config_text("seed = x\nbogus = 1\nmodel.Fcdim = 3\n")
    msg = str(info.value)
    assert "seed" in msg and "bogus" in msg and "model.Fcdim" in msg


def test_duplicate_keys_are_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("seed = 1\nseed = 2\n")


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "nope.cfg")


def test_defaults_and_unknown_lookup():
    cfg = ExperimentConfig()
    assert cfg["teacher.tap"] == "pool5" and cfg["analysis.topK"] == 100
    with pytest.raises(KeyError):
        cfg["nope"]


def test_schedule_falls_back_to_published_defaults():
    cfg = ExperimentConfig.from_mapping({"seed": "3", "stage2.totalEpochs": "5"})
    assert cfg.schedule(1) == TrainSchedule.stage1_defaults(seed=3)
    assert cfg.schedule(2) == TrainSchedule.stage2_defaults(seed=3, total_epochs=5)


def test_overrides_skip_none_and_win_otherwise():
    cfg = ExperimentConfig.from_mapping({"seed": "3"}).with_overrides({"seed": "9", "fold": None})
    assert cfg["seed"] == 9 and cfg["fold"] is None


def test_spec_and_policy_builders():
    cfg = ExperimentConfig.from_mapping({"model.convChannels": "4,8", "model.inputSize": "14", "model.fcDim": "8"})
    spec = cfg.spec(num_classes=3)
    assert spec.num_classes == 3 and spec.conv_channels == (4, 8)
    assert cfg.policy((3, 16, 16)).crop_size == 14
    with pytest.raises(ConfigError):
        ExperimentConfig().spec()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"augment.canonicalSize": "20"}).policy((3, 16, 16))


def test_loss_builder_validates():
    assert ExperimentConfig.from_mapping({"loss.p": "1.5"}).loss().p == 1.5
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"loss.mode": "pooled"}).loss()


def test_require_path(tmp_path):
    cfg = ExperimentConfig.from_mapping({"teacher": "t.fn2e"}, base_dir=tmp_path)
    with pytest.raises(ConfigError, match="does not exist"):
        cfg.require_path("teacher")
    (tmp_path / "t.fn2e").write_bytes(b"")
    assert cfg.require_path("teacher").name == "t.fn2e"
    with pytest.raises(ConfigError, match="must be set"):
        cfg.require_path("dataset")


def test_hash_tracks_training_settings_only():
    base = ExperimentConfig.from_mapping({"seed": "1"})
    assert base.config_hash() == ExperimentConfig.from_mapping({"seed": "1", "run": "x", "analysis.topK": "5",
                                                                "out": "elsewhere"}).config_hash()
    assert base.config_hash() == ExperimentConfig.from_mapping({"seed": "1", "teacher.tap": "pool5"}).config_hash()
    assert base.config_hash() != ExperimentConfig.from_mapping({"seed": "2"}).config_hash()
    assert base.config_hash() != ExperimentConfig.from_mapping({"seed": "1", "stage2.baseLr": "0.1"}).config_hash()


def test_schema_keys_are_dotted_camel_case():
    for key in SCHEMA:
        for part in key.split("."):
            assert part[0].islower() and "_" not in part
