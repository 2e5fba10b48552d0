"""Run configuration files: ``key = value`` lines grouped in [model]/[train]/[data]/[eval].

Example::

    [train]
    preset = improved_unet_desk
    max_epochs = 30

    [model]
    base_channels = 8
    aspp_dilation_rates = 1, 2, 4

Anything not set falls back to the preset. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace

from .errors import ConfigurationError
from .losses import ScheduleSpec
from .metrics import GradeThresholds
from .models import CONFIGS
from .training import presets

SCHEDULE_KEYS = {
    "schedule": "kind", "lr": "initial_lr", "halve_every": "halve_every",
    "poly_max_epoch": "max_epoch", "poly_power": "power",
}
TRAIN_KEYS = {"preset", "max_epochs", "patience", "batch_size", "loss", "optimizer",
              "momentum", "beta1", "beta2", "adam_eps", "seed", *SCHEDULE_KEYS}
DATA_KEYS = {"val_fraction", "augment_factor", "augment_seed"}
EVAL_KEYS = {"grade_thresholds", "pixel_threshold"}
SECTIONS = ("model", "train", "data", "eval")


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class DataOptions:
    val_fraction: float = 0.2
    augment_factor: int = 1
    augment_seed: int = 0


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {s: {} for s in SECTIONS})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                           comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config: {exc}") from None
        sections = {s: {} for s in SECTIONS}
        for name in parser.sections():
            if name not in sections:
                raise ConfigurationError(f"unknown section [{name}]")
            for key, raw in parser.items(name):
                sections[name][key] = parse_value(raw)
        cfg = cls(sections)
        try:
            cfg.resolve()
        except TypeError as exc:
            raise ConfigurationError(f"bad value in config: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            values = self.sections.get(name) or {}
            if not values:
                continue
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {format_value(v)}" for k, v in sorted(values.items()))
            lines.append("")
        return "\n".join(lines)

    def resolve(self):
        """Validate everything and return (model config, TrainConfig, DataOptions, eval dict)."""
        train = dict(self.sections.get("train", {}))
        unknown = set(train) - TRAIN_KEYS
        if unknown:
            raise ConfigurationError(f"unknown [train] keys: {sorted(unknown)}")
        name = train.pop("preset", "improved_unet_desk")
        table = presets()
        if name not in table:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(table)}")
        model_cfg, train_cfg = table[name]

        overrides = self.sections.get("model", {})
        fields = {f.name for f in dataclasses.fields(CONFIGS[model_cfg.kind])}
        bad = set(overrides) - fields
        if bad:
            raise ConfigurationError(f"unknown [model] keys for {model_cfg.kind}: {sorted(bad)}")
        model_cfg = replace(model_cfg, **{k: _listify(v, k) for k, v in overrides.items()})

        sched = {SCHEDULE_KEYS[k]: train.pop(k) for k in list(train) if k in SCHEDULE_KEYS}
        if sched:
            train["schedule"] = ScheduleSpec(**{**dataclasses.asdict(train_cfg.schedule), **sched})
        train_cfg = replace(train_cfg, **train)

        data = self.sections.get("data", {})
        if set(data) - DATA_KEYS:
            raise ConfigurationError(f"unknown [data] keys: {sorted(set(data) - DATA_KEYS)}")
        data_opts = DataOptions(**data)
        if not 0 <= data_opts.val_fraction < 1 or data_opts.augment_factor < 1:
            raise ConfigurationError(f"invalid data options {data_opts}")

        ev = dict(self.sections.get("eval", {}))
        if set(ev) - EVAL_KEYS:
            raise ConfigurationError(f"unknown [eval] keys: {sorted(set(ev) - EVAL_KEYS)}")
        if ev.get("grade_thresholds") is not None:
            t1, t2 = ev["grade_thresholds"]
            GradeThresholds(t1, t2)
        return model_cfg, train_cfg, data_opts, ev

    @property
    def preset(self) -> str:
        return self.sections.get("train", {}).get("preset", "improved_unet_desk")


def _listify(value, key):
    list_keys = {"widths", "aspp_dilation_rates", "stem_channels", "decoder_channels"}
    if key in list_keys and not isinstance(value, list):
        return [value]
    return value


def preset_config(name: str, **train_overrides) -> RunConfig:
    return RunConfig({"model": {}, "train": {"preset": name, **train_overrides}, "data": {}, "eval": {}})
