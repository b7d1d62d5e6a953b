"""Plain-text ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Keys may repeat; the
parser keeps every occurrence in file order.
"""
from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_key_values(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, value = line.partition("=")
        elif ":" in line:
            key, _, value = line.partition(":")
        else:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        pairs.append((key, value.strip()))
    return pairs


def read_key_values(path: str | Path) -> list[tuple[str, str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_key_values(text, str(path))
