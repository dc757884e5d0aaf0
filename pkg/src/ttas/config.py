"""Flat ``key = value`` configuration files with dotted section names.

Example::

    name = default
    seeds = 0, 1, 2, 3, 4
    methods = ttas, ts, supervised
    dataset.noise_sigma = 0.1
    train.alpha = 0.05
    train.supervised.epochs = 90   # per-method override

Blank lines and ``#`` comments are ignored. Values are parsed according to
the key's declared type, so a typo in a key or a malformed value is reported
with the offending key named.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",") if p.strip()]
        return tuple(conv(p) for p in parts)
    return parse


def _optional_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none", "null") else float(s)


def _str(s: str) -> str:
    return s.strip()


TRAIN_KEYS: dict[str, Callable[[str], Any]] = {
    "alpha": float,
    "gamma": float,
    "tau_kind": _str,
    "tau_start": float,
    "tau_end": float,
    "pseudo_mode": _str,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "student_alpha": _optional_float,
    "schedule": _str,
}

DATASET_KEYS: dict[str, Callable[[str], Any]] = {
    "image_size": _list(int),
    "spacing_mm": _list(float),
    "effusion_area_range": _list(float),
    "noise_sigma": float,
    "intensity_levels": _list(float),
    "seed": int,
    "n_labeled": int,
    "n_unlabeled": int,
    "n_test": int,
}

ARCH_KEYS: dict[str, Callable[[str], Any]] = {
    "input_channels": int,
    "feature_channels": _list(int),
    "predictor_channels": _list(int),
    "kernel_size": int,
}

TOP_KEYS: dict[str, Callable[[str], Any]] = {
    "name": _str,
    "output_dir": _str,
    "seeds": _list(int),
    "methods": _list(_str),
    "ablation_labeled_counts": _list(int),
    "stratification_thresholds_ml": _list(float),
}

METHOD_NAMES = ("ttas", "ts", "supervised")


def parser_for(key: str) -> Callable[[str], Any]:
    if key in TOP_KEYS:
        return TOP_KEYS[key]
    section, _, rest = key.partition(".")
    if section == "dataset" and rest in DATASET_KEYS:
        return DATASET_KEYS[rest]
    if section == "arch" and rest in ARCH_KEYS:
        return ARCH_KEYS[rest]
    if section == "train":
        head, _, tail = rest.partition(".")
        if head in METHOD_NAMES and tail in TRAIN_KEYS:
            return TRAIN_KEYS[tail]
        if rest in TRAIN_KEYS:
            return TRAIN_KEYS[rest]
    raise ConfigError(f"unknown config key {key!r}")


def parse_value(key: str, raw: str) -> Any:
    conv = parser_for(key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = parse_value(key, raw)
    return values


def load_config(path) -> dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(p))


def format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(values.items()))
