"""Minimal JSONL reading and writing with byte-stable output."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable


def dumps_record(record: dict) -> str:
    # Insertion key order and ensure_ascii=False keep outputs byte-comparable.
    return json.dumps(record, ensure_ascii=False)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps_record(record) + "\n")
            count += 1
    return count


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return records


def read_jsonl_lenient(path: str | Path) -> tuple[list, int]:
    """Read records, counting undecodable lines instead of failing."""
    records = []
    malformed = 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except ValueError:
                malformed += 1
    return records, malformed
