"""Small filesystem helpers: every persistent artifact is written
atomically (temp file + rename) so interrupted runs never leave partial files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_json(value: Any) -> str:
    """Deterministic JSON rendering (sorted keys, stable separators)."""
    return json.dumps(value, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def atomic_write_json(path: str | Path, value: Any) -> None:
    atomic_write_text(path, dump_json(value))


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
