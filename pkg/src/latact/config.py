"""Flat text configuration: `key = value` lines under [section] headers.

No nesting. Unknown sections or keys are errors that name the offender and
its line number; values are coerced to the types of the corresponding
dataclass defaults.
"""

import dataclasses
import hashlib
import json

from .models import ModelConfig
from .training import TrainConfig
from .worldgen import DGPSpec


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class DataConfig:
    m_target: int = 10
    source_count: int = 300
    target_e: int = 0


SECTION_TYPES = {
    "dgp": DGPSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(raw, default, key, lineno):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"line {lineno}: key '{key}' expects a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: key '{key}' expects an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: key '{key}' expects a number, got {raw!r}")
    if isinstance(default, tuple):
        try:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        except ValueError:
            raise ConfigError(f"line {lineno}: key '{key}' expects comma-separated "
                              f"integers, got {raw!r}")
    return raw


def parse_config(text):
    """-> {section: {key: typed value}}; strict about sections and keys."""
    out = {}
    section = None
    fields = None
    defaults = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SECTION_TYPES:
                raise ConfigError(f"line {lineno}: unknown section '{section}'")
            cls = SECTION_TYPES[section]
            fields = _field_types(cls)
            defaults = cls()
            out.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{section}]")
        out[section][key] = _coerce(raw, getattr(defaults, key), key, lineno)
    return out


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def build_section(config, section, **overrides):
    """Instantiate the section's dataclass with file values plus overrides."""
    kwargs = dict(config.get(section, {}))
    kwargs.update(overrides)
    try:
        return SECTION_TYPES[section](**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_hash(config):
    """Stable under key and section reordering."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def render_config(config):
    """Config dict back to the flat text form, deterministically ordered."""
    lines = []
    for section in sorted(config):
        lines.append(f"[{section}]")
        for key in sorted(config[section]):
            val = config[section][key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
