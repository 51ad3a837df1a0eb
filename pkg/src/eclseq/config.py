"""Run configuration: nested dataclasses, strict YAML/JSON parsing, resolved snapshots.

Every field has a default. Unknown keys anywhere in the document raise
:class:`ConfigError`. ``train.weights`` holds the user-settable loss knobs;
which terms are active is decided by ``train.mode``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .augment import AugSpec
from .losses import LossWeights

MODES = ("sasrec", "ridl_sr", "icl_sr", "icl_sr_pos", "icl_sr_neg", "ecl_sr")
MILD_KINDS = ("dropout", "perturb", "normalize")
TRAIN_INVASIVE_KINDS = ("mask_plan", "substitute_random")
_DERIVED_WEIGHT_FIELDS = ("active_terms", "icl_generator_role")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str = ""
    format: str = "tab"
    columns: list = field(default_factory=lambda: [0, 1, 2])
    kcore: int = 5
    max_len: int = 50
    cache: str = ""  # empty -> <path>.eclseq.bin, or <output_dir>/dataset.bin without a path


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    dropout_rate: float = 0.2
    init_std: float = 0.02


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 256
    gen_freeze_epoch: int = 10
    k_window: int = 5
    gamma: float = 0.2
    seed: int = 0
    mode: str = "ecl_sr"
    sampling: str = "argmax"
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class AugConfig:
    # RID branch edit; mask_plan uses train.gamma as its ratio
    invasive: AugSpec = field(default_factory=lambda: AugSpec("mask_plan"))
    # second ICL view; dropout reuses model.dropout_rate
    mild: AugSpec = field(default_factory=lambda: AugSpec("dropout"))


@dataclass
class EvalConfig:
    Ks: list = field(default_factory=lambda: [10, 20])


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def validate(self):
        t = self.train
        if t.mode not in MODES:
            raise ConfigError(f"unknown mode {t.mode!r}; valid modes: {', '.join(MODES)}")
        if t.sampling not in ("argmax", "categorical"):
            raise ConfigError(f"train.sampling must be 'argmax' or 'categorical', got {t.sampling!r}")
        if t.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 (in-batch negatives)")
        if t.epochs < 0 or t.lr <= 0 or t.k_window < 1 or not 0 < t.gamma < 1:
            raise ConfigError("train: need epochs >= 0, lr > 0, k_window >= 1, 0 < gamma < 1")
        if self.aug.invasive.kind not in TRAIN_INVASIVE_KINDS:
            raise ConfigError(f"aug.invasive.kind must be one of {TRAIN_INVASIVE_KINDS} for training")
        if self.aug.mild.kind not in MILD_KINDS:
            raise ConfigError(f"aug.mild.kind must be one of {MILD_KINDS}")
        if not self.eval.Ks or any(k < 1 for k in self.eval.Ks):
            raise ConfigError("eval.Ks must be a non-empty list of positive integers")
        if not 0 <= self.model.dropout_rate < 1:
            raise ConfigError("model.dropout_rate must lie in [0, 1)")
        if len(self.dataset.columns) != 3:
            raise ConfigError("dataset.columns lists the user, item and timestamp column indices")
        return self


def _coerce(path, ftype, value):
    if dataclasses.is_dataclass(ftype):
        return _build(ftype, value, path)
    if ftype in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if ftype in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype in (bool, "bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if ftype in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if ftype in (list, "list"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


_TYPES = {
    AugSpec: {"kind": str, "ratio": float, "epsilon": float, "repeat": int},
}


def _field_types(cls):
    if cls in _TYPES:
        return _TYPES[cls]
    hints = {}
    for f in dataclasses.fields(cls):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str, "bool": bool, "list": list,
                 "LossWeights": LossWeights, "AugSpec": AugSpec, "DatasetConfig": DatasetConfig,
                 "ModelConfig": ModelConfig, "TrainConfig": TrainConfig, "AugConfig": AugConfig,
                 "EvalConfig": EvalConfig}.get(t, t)
        hints[f.name] = t
    if cls is LossWeights:
        for name in _DERIVED_WEIGHT_FIELDS:
            hints.pop(name)
    return hints


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    types = _field_types(cls)
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}; valid keys: {sorted(types)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if value is None and cls is AugSpec and name in ("ratio", "repeat"):
            kwargs[name] = None
            continue
        kwargs[name] = _coerce(sub, types[name], value)
    if cls is AugSpec and "kind" not in kwargs:
        raise ConfigError(f"{path}: augmentation spec needs a 'kind'")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data):
    return _build(RunConfig, data, "").validate()


def parse_config(text):
    """Parse a YAML (or JSON) document into a validated :class:`RunConfig`."""
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
    return from_dict(data)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def to_dict(obj):
    if isinstance(obj, AugSpec):
        return {"kind": obj.kind, "ratio": obj.ratio, "epsilon": obj.epsilon, "repeat": obj.repeat}
    out = {}
    for f in dataclasses.fields(obj):
        if isinstance(obj, LossWeights) and f.name in _DERIVED_WEIGHT_FIELDS:
            continue
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def dump_config(cfg):
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def override(cfg, seed=None, mode=None, output=None):
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train), dataset=dataclasses.replace(cfg.dataset))
    if seed is not None:
        cfg.train.seed = seed
    if mode is not None:
        cfg.train.mode = mode
    if output is not None:
        cfg.output_dir = output
    return cfg.validate()


ACTIVE_TERMS = {
    "sasrec": {"rec"},
    "ridl_sr": {"rec", "gen", "rid"},
    "icl_sr": {"rec", "icl"},
    "icl_sr_pos": {"rec", "icl", "gen"},
    "icl_sr_neg": {"rec", "icl", "gen"},
    "ecl_sr": {"rec", "icl", "gen", "rid"},
}
GENERATOR_ROLE = {"icl_sr_pos": "extra_positive", "icl_sr_neg": "extra_negative"}


def weights_for_mode(mode, weights):
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    return dataclasses.replace(weights, active_terms=frozenset(ACTIVE_TERMS[mode]),
                               icl_generator_role=GENERATOR_ROLE.get(mode, "none"))
