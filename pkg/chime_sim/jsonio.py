from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

from .errors import ConfigError, MissingFileError


def read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"No such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Malformed JSON in {path}: {exc}") from exc


def write_json(path: str | Path, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def check_keys(data: Any, cls: type, source: str, extra: tuple[str, ...] = ()) -> dict:
    """Reject anything that is not a mapping of ``cls`` field names."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a JSON object, got {type(data).__name__}")
    allowed = {field.name for field in dataclasses.fields(cls)} | set(extra)
    for key in sorted(data):
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key '{key}'")
    return data