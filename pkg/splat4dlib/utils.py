from __future__ import annotations

import csv
import io
from pathlib import Path
import json
import os
import tempfile
from typing import Any, Iterable, Sequence

from .exceptions import ManifestError

SCENE_FILENAME = "scene.json"
SEGMENT_INDEX_FILENAME = "segments.json"


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("wb", delete=False, dir=str(path.parent)) as tmp:
        tmp.write(payload)
        temp_name = tmp.name
    Path(temp_name).replace(path)


def atomic_write_json(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        "w", delete=False, encoding="utf-8", dir=str(path.parent)
    ) as tmp:
        json.dump(payload, tmp, indent=2, sort_keys=False)
        tmp.write("\n")
        temp_name = tmp.name
    Path(temp_name).replace(path)


def load_json(path: Path) -> dict[str, Any]:
    try:
        with path.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ManifestError(f"{path} must hold a JSON object.")
    return payload


def parse_key_values(items: Iterable[str] | None) -> dict[str, str]:
    """Parse repeated or comma-separated key=value items."""
    parsed: dict[str, str] = {}
    for item in items or ():
        for part in item.split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ValueError(f"Invalid entry '{part}'. Expected key=value.")
            key, value = part.split("=", 1)
            parsed[key.strip()] = value.strip()
    return parsed


def parse_float_triplet(text: str) -> tuple[float, float, float]:
    parts = [part.strip() for part in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"Expected three comma-separated numbers, got '{text}'.")
    r, g, b = (float(part) for part in parts)
    return r, g, b


def resolve_threads(requested: int | None) -> int:
    if requested is None:
        return os.cpu_count() or 1
    if requested < 1:
        raise ValueError(f"--threads must be at least 1, got {requested}.")
    return requested


def format_float(value: float) -> str:
    return f"{value:.6f}"


def csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Comma-separated table with a fixed header row."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(cell) if isinstance(cell, float) else cell for cell in row])
    return buffer.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    text = csv_text(header, rows)
    atomic_write_bytes(path, text.encode("utf-8"))
    return text
