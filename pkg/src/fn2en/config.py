"""Flat ``key = value`` experiment configuration with dotted camelCase keys."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentPolicy
from .errors import ConfigError
from .losses import RegressionLossConfig
from .nn import ExpNetSpec
from .trainer import TrainSchedule

_SECTION = "experiment"


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _strs(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _optional_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


# key -> (parser, default)
SCHEMA = {
    "dataset": ("path", None),
    "teacher": ("path", None),
    "teacher.tap": (str, "pool5"),
    "out": ("path", "runs"),
    "run": (str, "run"),
    "seed": (int, 0),
    "folds": (int, 10),
    "fold": (_optional_int, None),
    "model.convChannels": (_ints, (64, 128, 256, 512, 512)),
    "model.adapterChannels": (_optional_int, None),
    "model.fcDim": (int, 256),
    "model.numClasses": (_optional_int, None),
    "model.inputSize": (int, 224),
    "model.inChannels": (int, 3),
    "model.dropout": (float, 0.5),
    "model.scale": (float, 1.0),
    "model.pool": (_ints, (3, 2)),
    "loss.p": (float, 2.0),
    "loss.mode": (str, "full-map"),
    "loss.reduction": (str, "mean"),
    "augment.canonicalSize": (_optional_int, None),
    "augment.cropSize": (_optional_int, None),
    "augment.randomCrop": (_bool, True),
    "augment.horizontalFlip": (_bool, True),
    "analysis.layers": (_strs, ()),
    "analysis.topK": (int, 100),
    "analysis.bins": (int, 20),
    "analysis.tags": (_strs, ("pre-trained", "fine-tuned")),
    "synth.numClasses": (int, 4),
    "synth.perClass": (int, 60),
    "synth.imageSize": (int, 32),
    "synth.subjects": (int, 20),
    "synth.channels": (int, 3),
    "synth.noise": (float, 0.05),
    "teacherTrain.identityEpochs": (int, 30),
    "teacherTrain.finetuneEpochs": (int, 8),
    "teacherTrain.lr": (float, 0.01),
    "teacherTrain.finetuneLr": (float, 0.005),
    "teacherTrain.batchSize": (int, 16),
}
_STAGE_FIELDS = {
    "baseLr": ("base_lr", float),
    "lrDecaySteps": ("lr_decay_steps", _ints),
    "lrDecayFactor": ("lr_decay_factor", float),
    "totalEpochs": ("total_epochs", int),
    "batchSize": ("batch_size", int),
    "momentum": ("momentum", float),
    "dropoutRate": ("dropout_rate", float),
}
for _stage in ("stage1", "stage2"):
    for _key, (_, _parse) in _STAGE_FIELDS.items():
        SCHEMA[f"{_stage}.{_key}"] = (_parse, None)

# keys that never influence a trained network, left out of the config hash
_UNHASHED = {"out", "run", "dataset", "teacher"} | {k for k in SCHEMA if k.startswith(("analysis.", "synth."))}


def parse_config_text(text, base_dir=None, source="<config>"):
    """Parse ``key = value`` lines into a validated value mapping."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",), strict=True)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return coerce(dict(parser[_SECTION]), base_dir, source)


def coerce(raw, base_dir=None, source="<config>"):
    """Convert string (or already-typed) values and report every problem at once."""
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    values, problems = {}, []
    for key, text in raw.items():
        if key not in SCHEMA:
            problems.append(f"unknown key {key!r}")
            continue
        kind, _ = SCHEMA[key]
        if not isinstance(text, str):
            values[key] = text
            continue
        try:
            if kind == "path":
                values[key] = str((base_dir / text.strip()).resolve()) if text.strip() else None
            else:
                values[key] = kind(text)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(f"{source}: invalid configuration\n  " + "\n  ".join(problems))
    return values


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    source: str = "<config>"

    @classmethod
    def load(cls, path, overrides=None):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls(parse_config_text(text, path.parent, str(path)), str(path))
        return cfg.with_overrides(overrides or {})

    @classmethod
    def from_mapping(cls, mapping, base_dir=None):
        return cls(coerce({k: v for k, v in mapping.items()}, base_dir))

    def with_overrides(self, overrides):
        values = dict(self.values)
        values.update(coerce({k: v for k, v in overrides.items() if v is not None}, Path.cwd(), "command line"))
        return ExperimentConfig(values, self.source)

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise KeyError(key)
        return self.values.get(key, SCHEMA[key][1])

    def require_path(self, key, kind="file"):
        value = self[key]
        if value is None:
            raise ConfigError(f"{self.source}: {key!r} must be set")
        p = Path(value)
        ok = p.is_file() if kind == "file" else p.exists()
        if not ok:
            raise ConfigError(f"{self.source}: {key} path does not exist: {p}")
        return p

    @property
    def out(self):
        return Path(self["out"])

    def spec(self, num_classes=None):
        n = self["model.numClasses"] or num_classes
        if n is None:
            raise ConfigError("model.numClasses is unset and no dataset was given to infer it")
        return ExpNetSpec(conv_channels=self["model.convChannels"], adapter_channels=self["model.adapterChannels"],
                          fc_dim=self["model.fcDim"], num_classes=n, input_size=self["model.inputSize"],
                          in_channels=self["model.inChannels"], dropout=self["model.dropout"],
                          scale=self["model.scale"], pool=self["model.pool"])

    def loss(self):
        return RegressionLossConfig(p=self["loss.p"], mode=self["loss.mode"], reduction=self["loss.reduction"])

    def schedule(self, stage):
        base = TrainSchedule.stage1_defaults if stage == 1 else TrainSchedule.stage2_defaults
        kw = {attr: self[f"stage{stage}.{key}"] for key, (attr, _) in _STAGE_FIELDS.items()
              if self[f"stage{stage}.{key}"] is not None}
        return base(seed=self["seed"], **kw)

    def policy(self, image_shape):
        canonical = self["augment.canonicalSize"] or image_shape[-1]
        if canonical != image_shape[-1]:
            raise ConfigError(f"augment.canonicalSize={canonical} but dataset images are {image_shape[-1]} wide")
        crop = self["augment.cropSize"] or self["model.inputSize"]
        return AugmentPolicy(canonical_size=canonical, crop_size=crop, random_crop=self["augment.randomCrop"],
                             horizontal_flip=self["augment.horizontalFlip"])

    def config_hash(self):
        """Digest of every setting that shapes a trained network."""
        # effective values, so spelling out a default does not change the digest
        keep = {k: (list(v) if isinstance(v, tuple) else v) for k in SCHEMA if k not in _UNHASHED
                for v in [self[k]]}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]
