"""TOML run configuration: [model], [adapter], [train], [data]."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .adapters import SPEC_NAMES, AdapterSpec, named_spec
from .data import DatasetSpec
from .trainer import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    """Configuration problems, one ``section.key: message`` line each."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


# section -> {key: (type, default or REQUIRED)}
REQUIRED = object()
SCHEMA: dict[str, dict[str, tuple[type, Any]]] = {
    "model": {
        "N": (int, REQUIRED),
        "d": (int, REQUIRED),
        "heads": (int, REQUIRED),
        "img": (int, REQUIRED),
        "patch": (int, REQUIRED),
        "mlp_ratio": (int, 4),
        "seed": (int, 0),
        "dtype": (str, "float32"),
        "weights": (str, ""),
    },
    "adapter": {
        "name": (str, REQUIRED),
        "M": (int, 7),
        "d_prime": (int, 2),
        "r": (int, 8),
    },
    "train": {
        "lr_max": (float, REQUIRED),
        "lr_min": (float, 0.0),
        "weight_decay": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "epochs": (int, REQUIRED),
        "batch_size": (int, 32),
        "warmup_steps": (int, 0),
    },
    "data": {
        "variant": (str, REQUIRED),
        "n_classes": (int, REQUIRED),
        "n_train": (int, 256),
        "n_test": (int, 256),
        "seed": (int, 0),
        "shift_strength": (float, 0.5),
        "tap_block": (int, 0),
        "path": (str, ""),
        "labels_csv": (str, ""),
    },
}


@dataclass
class RunConfig:
    raw: dict[str, dict[str, Any]]
    path: Path | None = None

    def section(self, name: str) -> dict[str, Any]:
        return self.raw[name]

    @property
    def vit(self) -> ViTConfig:
        m = self.raw["model"]
        return ViTConfig(N=m["N"], d=m["d"], heads=m["heads"], img=m["img"], patch=m["patch"], mlp_ratio=m["mlp_ratio"])

    @property
    def dtype(self):
        return np.dtype(self.raw["model"]["dtype"])

    @property
    def spec(self) -> AdapterSpec:
        a = self.raw["adapter"]
        return named_spec(a["name"], M=a["M"], d_prime=a["d_prime"], r=a["r"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = dict(self.raw["train"])
        return TrainConfig(seed=self.raw["model"]["seed"] if seed is None else seed, **t)

    def dataset_spec(self) -> DatasetSpec:
        d = dict(self.raw["data"])
        base = self.path.parent if self.path else Path(".")
        for key in ("path", "labels_csv"):
            d[key] = str(base / d[key]) if d[key] else None
        d["tap_block"] = d["tap_block"] or None
        return DatasetSpec(**d)

    def snapshot(self) -> dict[str, dict[str, Any]]:
        return {s: dict(v) for s, v in self.raw.items()}


def _coerce(value: Any, kind: type) -> Any:
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise TypeError(f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def resolve(data: dict[str, Any], sections: tuple[str, ...], path: Path | None = None) -> RunConfig:
    """Validate ``data`` against the schema; all problems are reported at once."""
    problems: list[str] = []
    raw: dict[str, dict[str, Any]] = {}
    for extra in sorted(set(data) - set(SCHEMA)):
        problems.append(f"{extra}: unknown section")
    for section in SCHEMA:
        table = data.get(section)
        if table is None:
            if section in sections:
                problems.extend(f"{section}.{k}: missing" for k, (_, d) in SCHEMA[section].items() if d is REQUIRED)
            continue
        if not isinstance(table, dict):
            problems.append(f"{section}: expected a table")
            continue
        out = {}
        for key, (kind, default) in SCHEMA[section].items():
            if key not in table:
                if default is REQUIRED:
                    problems.append(f"{section}.{key}: missing")
                else:
                    out[key] = default
                continue
            try:
                out[key] = _coerce(table[key], kind)
            except TypeError as exc:
                problems.append(f"{section}.{key}: {exc}")
        for extra in sorted(set(table) - set(SCHEMA[section])):
            problems.append(f"{section}.{extra}: unknown key")
        raw[section] = out
    if not problems:
        problems.extend(_semantic_checks(raw))
    if problems:
        raise ConfigError(problems)
    return RunConfig(raw, path)


def _semantic_checks(raw: dict[str, dict[str, Any]]) -> list[str]:
    problems = []
    if "model" in raw:
        try:
            RunConfig(raw).vit
        except ValueError as exc:
            problems.append(f"model: {exc}")
        if raw["model"]["dtype"] not in ("float32", "float64"):
            problems.append("model.dtype: expected float32 or float64")
    if "adapter" in raw and raw["adapter"]["name"].lower() not in SPEC_NAMES + ("dtlplus",):
        problems.append(f"adapter.name: unknown spec {raw['adapter']['name']!r}; valid: {', '.join(SPEC_NAMES)}")
    if "train" in raw:
        try:
            TrainConfig(**raw["train"]).validate()
        except ValueError as exc:
            problems.extend(f"train: {p}" for p in str(exc).split("; "))
    if "data" in raw:
        try:
            d = dict(raw["data"], path=raw["data"]["path"] or None, labels_csv=raw["data"]["labels_csv"] or None)
            d["tap_block"] = d["tap_block"] or None
            DatasetSpec(**d).validate()
        except ValueError as exc:
            problems.append(f"data: {exc}")
    return problems


def load_config(path: str | Path, sections: tuple[str, ...] = ("model", "adapter", "train", "data")) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"{path}: no such file"]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return resolve(data, sections, path)


def schema_defaults() -> dict[str, dict[str, Any]]:
    return {s: {k: d for k, (_, d) in keys.items() if d is not REQUIRED} for s, keys in SCHEMA.items()}
