"""Line-oriented ``key = value`` config files shared by node, client and simulator.

``#`` starts a comment. A ``[section]`` line switches to a raw section whose
lines are kept verbatim (the simulator's ``[events]`` list uses this).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    values: dict[str, str] = field(default_factory=dict)
    sections: dict[str, list[str]] = field(default_factory=dict)
    path: Path | None = None

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def require(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"missing required key {key!r}")
        return self.values[key]

    def get_int(self, key: str, default: int) -> int:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None

    def get_float(self, key: str, default: float) -> float:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None

    def get_list(self, key: str) -> list[str]:
        raw = self.values.get(key, "")
        return [item.strip() for item in raw.split(",") if item.strip()]

    def resolve_path(self, key: str, default: str | None = None) -> Path | None:
        raw = self.values.get(key, default)
        if raw is None:
            return None
        p = Path(raw).expanduser()
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    def check_keys(self, allowed: set[str], prefixes: tuple[str, ...] = ()) -> None:
        unknown = [k for k in self.values if k not in allowed and not k.startswith(prefixes or ("\0",))]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")


def parse_config(text: str, path: Path | None = None) -> Config:
    cfg = Config(path=path)
    section: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            cfg.sections.setdefault(section, [])
            continue
        if section is not None:
            cfg.sections[section].append(line)
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        cfg.values[key.strip()] = value.strip()
    return cfg


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path)
