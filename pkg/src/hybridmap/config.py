"""INI configuration: one section per module, ``key = value`` entries."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .errors import FormatError, InputError
from .mapper import TrainConfig
from .network import AdamConfig, ModelConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def _update(obj, section, name: str):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in section.items():
        if key not in known:
            raise FormatError(f"unknown key [{name}] {key}")
        changes[key] = _coerce(raw, getattr(obj, key), f"[{name}] {key}")
    return replace(obj, **changes)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise FormatError(f"cannot parse config: {exc}") from exc
    cfg = RunConfig()
    for name in parser.sections():
        sec = parser[name]
        if name == "model":
            cfg.model = _update(cfg.model, sec, name)
        elif name == "train":
            cfg.train = _update(cfg.train, sec, name)
        elif name == "optimizer":
            opt = cfg.optimizer
            lr = dict(opt.lr)
            for key, raw in sec.items():
                if key.startswith("lr_"):
                    group = key[3:]
                    if group not in lr:
                        raise FormatError(f"unknown parameter group in [optimizer] {key}")
                    lr[group] = _coerce(raw, 0.0, f"[optimizer] {key}")
                elif key in ("beta1", "beta2", "eps"):
                    opt = replace(opt, **{key: _coerce(raw, 0.0, f"[optimizer] {key}")})
                else:
                    raise FormatError(f"unknown key [optimizer] {key}")
            cfg.optimizer = replace(opt, lr=lr)
        elif name == "run":
            for key, raw in sec.items():
                if key != "seed":
                    raise FormatError(f"unknown key [run] {key}")
                cfg.seed = _coerce(raw, 0, "[run] seed")
        else:
            raise FormatError(f"unknown config section [{name}]")
    # the truncation distance is shared; a value given in one section applies to both
    in_model = parser.has_option("model", "truncation")
    in_train = parser.has_option("train", "truncation")
    if in_model and not in_train:
        cfg.train = replace(cfg.train, truncation=cfg.model.truncation)
    elif in_train and not in_model:
        cfg.model = replace(cfg.model, truncation=cfg.train.truncation)
    if cfg.model.truncation != cfg.train.truncation:
        raise InputError("[model] truncation and [train] truncation must agree")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
