"""Small NDJSON helpers with byte-stable output."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import ParseError


def fmt12(value: float) -> float:
    """Round to 12 significant digits so exported numbers print stably."""
    return float(f"{value:.12g}")


def dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_lines(path: str | Path, objects: Iterable[Any]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in objects:
            fh.write(dumps(obj))
            fh.write("\n")
            count += 1
    return count


def append_lines(path: str | Path, objects: Iterable[Any]) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for obj in objects:
            fh.write(dumps(obj))
            fh.write("\n")


def iter_objects(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, object)`` for each non-blank line of *path*."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON at column {exc.colno}: {exc.msg}", lineno, str(path)) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno, str(path))
            yield lineno, obj
