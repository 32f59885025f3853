"""Flat JSON run configuration with dotted keys and ``--set key=value`` overrides."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError
from .graph import ArchitectureConfig
from .trainer import TrainConfig

REQUIRED = object()

# key -> (default, type tag)
SCHEMA: dict[str, tuple[Any, str]] = {
    "arch.depth": (4, "int"),
    "arch.filters": ([32, 64, 128, 256, 512], "int_list"),
    "arch.block_kind": ("rrcl", "str"),
    "arch.t": (2, "int"),
    "arch.num_classes": (1, "int"),
    "arch.skip_style": ("dense", "str"),
    "arch.in_channels": (1, "int"),
    "trainer.learning_rate": (3e-4, "float"),
    "trainer.beta1": (0.9, "float"),
    "trainer.beta2": (0.999, "float"),
    "trainer.eps_adam": (1e-8, "float"),
    "trainer.batch_size": (4, "int"),
    "trainer.max_epochs": (100, "int"),
    "trainer.patience": (10, "int"),
    "trainer.seed": (0, "int"),
    "trainer.deep_supervision": (True, "bool"),
    "trainer.target_dice": (None, "float?"),
    "trainer.trials": (1, "int"),
    "data.train_manifest": (REQUIRED, "str"),
    "data.val_manifest": (None, "str?"),
    "data.crop": (None, "int_list?"),
    "data.resize": (None, "int_list?"),
    "patch.size": (None, "int?"),
    "patch.stride": (None, "int?"),
    "patch.edge_anchored_train": (False, "bool"),
    "output_dir": ("runs/default", "str"),
}


def _check_type(key: str, value: Any, tag: str) -> Any:
    base = tag.rstrip("?")
    if value is None:
        if tag.endswith("?"):
            return None
        raise ConfigError(f"{key} must not be null")
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "int_list": isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
    }[base]
    if not ok:
        raise ConfigError(f"{key} expects {base}, got {value!r}")
    return float(value) if base == "float" else value


class RunConfig:
    """Validated flat configuration; every key has a default except data paths."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.values: dict[str, Any] = {}
        for key, (default, tag) in SCHEMA.items():
            if key in values:
                self.values[key] = _check_type(key, values[key], tag)
            elif default is not REQUIRED:
                self.values[key] = list(default) if isinstance(default, list) else default
        # building these validates the cross-field invariants early
        self.arch()
        self.trainer()

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"config key {key} is required")
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def arch(self) -> ArchitectureConfig:
        v = self.values
        return ArchitectureConfig(
            depth=v["arch.depth"],
            filters=tuple(v["arch.filters"]),
            block_kind=v["arch.block_kind"],
            t=v["arch.t"],
            num_classes=v["arch.num_classes"],
            deep_supervision=v["trainer.deep_supervision"],
            skip_style=v["arch.skip_style"],
            in_channels=v["arch.in_channels"],
        )

    def trainer(self) -> TrainConfig:
        v = self.values
        if v["trainer.trials"] < 1:
            raise ConfigError("trainer.trials must be >= 1")
        return TrainConfig(
            learning_rate=v["trainer.learning_rate"],
            beta1=v["trainer.beta1"],
            beta2=v["trainer.beta2"],
            eps_adam=v["trainer.eps_adam"],
            batch_size=v["trainer.batch_size"],
            max_epochs=v["trainer.max_epochs"],
            patience=v["trainer.patience"],
            seed=v["trainer.seed"],
            deep_supervision=v["trainer.deep_supervision"],
            target_dice=v["trainer.target_dice"],
        )

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig(merged)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"


def arch_values(arch: ArchitectureConfig) -> dict[str, Any]:
    """Flat ``arch.*`` / ``trainer.deep_supervision`` keys describing ``arch``."""
    d = arch.to_dict()
    out = {f"arch.{k}": v for k, v in d.items() if k != "deep_supervision"}
    out["trainer.deep_supervision"] = d["deep_supervision"]
    return out


def parse_json_text(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return doc


def parse_set(items: Iterable[str]) -> dict[str, Any]:
    """Turn ``key=value`` strings into a dict; values are JSON when they parse."""
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def load_run_config(path=None, sets: Iterable[str] = (), extra: Mapping[str, Any] | None = None, require_data: bool = False) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_json_text(text, str(path)))
    values.update(parse_set(sets))
    values.update(extra or {})
    cfg = RunConfig(values)
    if require_data and "data.train_manifest" not in cfg.values:
        raise ConfigError("data.train_manifest is required")
    return cfg
