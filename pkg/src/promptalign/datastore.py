"""Dataset ingestion, response caching, record persistence, and exporters.

File formats:

* prompts: plain text (one prompt per line) or JSONL ``{"id","text","dataset"}``;
* records: JSONL, one optimization record per line with a top-level
  ``"schema": "fpa/1"`` marker and a ``"mode"`` run label;
* SFT export: JSONL ``{"prompt","completion"}``;
* ICL pool export: JSONL ``{"original","optimized","gain"}``.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator

from .model import (
    ExamplePair,
    OptimizationRecord,
    PromptRecord,
    record_from_dict,
    record_to_dict,
    validate_record,
)
from .util import canonical_json, sha256_hex, utc_now_iso

logger = logging.getLogger(__name__)

RECORD_SCHEMA = "fpa/1"


# ---------------------------------------------------------------------------
# Prompt ingestion


def detect_format(path: str | Path) -> str:
    return "jsonl" if str(path).endswith((".jsonl", ".json")) else "plain_lines"


def load_prompts(
    path: str | Path, format: str = "auto", dataset: str | None = None
) -> list[PromptRecord]:
    """Read a prompt set; one record per non-blank line or JSON object.

    Ids are taken from the file when present, else assigned from file order.
    Blank prompts are skipped with a warning; malformed JSON and duplicate
    ids are errors naming the offending line.
    """
    path = Path(path)
    if format == "auto":
        format = detect_format(path)
    if format not in ("plain_lines", "jsonl"):
        raise ValueError(f"unknown prompt format: {format!r}")
    default_dataset = dataset if dataset is not None else path.stem

    records: list[PromptRecord] = []
    seen_ids: set[str] = set()
    stamp = utc_now_iso()
    with path.open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            if format == "plain_lines":
                record = PromptRecord(
                    id=str(len(records)), text=line, dataset=default_dataset, created_at=stamp
                )
            else:
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}: line {line_no}: invalid JSON: {exc}") from exc
                text = str(data.get("text", "")).strip()
                if not text:
                    logger.warning("%s: line %d: blank prompt text, skipped", path, line_no)
                    continue
                record = PromptRecord(
                    id=str(data["id"]) if "id" in data else str(len(records)),
                    text=text,
                    dataset=str(data.get("dataset", default_dataset)),
                    created_at=str(data.get("created_at", stamp)),
                )
            if record.id in seen_ids:
                raise ValueError(f"{path}: line {line_no}: duplicate prompt id {record.id!r}")
            seen_ids.add(record.id)
            records.append(record)
    if not records:
        raise ValueError(f"{path}: no prompts")
    return records


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line_number, parsed_object) for each non-blank line."""
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            yield line_no, json.loads(line)


# ---------------------------------------------------------------------------
# Response cache


class ResponseCache:
    """Content-addressed JSON cache, one file per key, persistent on disk.

    Keys hash the backend kind, the backend identity, and the canonicalized
    request payload, so semantically identical requests collide regardless of
    JSON key order. Writes are atomic; identical keys always hold identical
    values, so concurrent last-writer-wins races are benign.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def make_key(self, kind: str, identity: dict[str, Any], payload: dict[str, Any]) -> str:
        return sha256_hex(canonical_json({"kind": kind, "identity": identity, "payload": payload}))

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Any | None:
        path = self._path(key)
        try:
            with path.open("r", encoding="utf-8") as handle:
                return json.load(handle)["value"]
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, KeyError, OSError) as exc:
            logger.warning("evicting corrupt cache entry %s: %s", path.name, exc)
            try:
                path.unlink()
            except OSError:
                pass
            return None

    def put(self, key: str, value: Any) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        with tmp.open("w", encoding="utf-8") as handle:
            json.dump({"value": value}, handle, ensure_ascii=False)
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Record persistence


@dataclass(frozen=True)
class StoredRecord:
    record: OptimizationRecord
    mode: str


_write_locks: dict[str, threading.Lock] = {}
_write_locks_guard = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    key = str(path.resolve())
    with _write_locks_guard:
        return _write_locks.setdefault(key, threading.Lock())


def append_record(path: str | Path, record: OptimizationRecord, mode: str) -> None:
    """Append one record as a single JSONL line; rejects invalid records."""
    violations = validate_record(record)
    if violations:
        raise ValueError(
            f"refusing to persist invalid record {record.prompt.id!r}: " + "; ".join(violations)
        )
    envelope = {"schema": RECORD_SCHEMA, "mode": mode}
    envelope.update(record_to_dict(record))
    line = json.dumps(envelope, ensure_ascii=False) + "\n"
    path = Path(path)
    with _lock_for(path):
        with path.open("a", encoding="utf-8") as handle:
            handle.write(line)
            handle.flush()


def read_record_file(path: str | Path) -> tuple[list[StoredRecord], list[str]]:
    """Parse a record file, tolerating damage.

    Returns every intact record plus one error string per unreadable line
    (a torn tail line after a crash is reported, not fatal).
    """
    records: list[StoredRecord] = []
    errors: list[str] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                if data.get("schema") != RECORD_SCHEMA:
                    raise ValueError(f"unsupported schema {data.get('schema')!r}")
                records.append(
                    StoredRecord(record=record_from_dict(data), mode=str(data.get("mode", "")))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                errors.append(f"line {line_no}: {exc}")
    return records, errors


def load_records(path: str | Path) -> list[OptimizationRecord]:
    stored, errors = read_record_file(path)
    for error in errors:
        logger.warning("%s: %s", path, error)
    return [item.record for item in stored]


def completed_ids(path: str | Path) -> set[str]:
    """Prompt ids with an intact record already present (for resuming runs)."""
    if not Path(path).exists():
        return set()
    stored, _ = read_record_file(path)
    return {item.record.prompt.id for item in stored}


# ---------------------------------------------------------------------------
# Exporters


def export_sft(
    records: Iterable[OptimizationRecord],
    path: str | Path,
    min_gain: float = 0.0,
    dedup: bool = False,
) -> int:
    """Write prompt/completion training rows; rows below ``min_gain`` are dropped.

    Returns the number of rows written; an empty selection still produces an
    empty file (with a warning).
    """
    rows = [
        {"prompt": record.prompt.text, "completion": record.final_text}
        for record in _eligible(records, min_gain, dedup)
    ]
    _write_jsonl(path, rows)
    if not rows:
        logger.warning("%s: zero rows exported", path)
    return len(rows)


def export_icl_pool(
    records: Iterable[OptimizationRecord],
    path: str | Path,
    min_gain: float = 0.0,
    dedup: bool = False,
) -> int:
    """Write example pairs usable as in-context dialogue history."""
    rows = [
        {
            "original": record.prompt.text,
            "optimized": record.final_text,
            "gain": record.combined_gain,
        }
        for record in _eligible(records, min_gain, dedup)
    ]
    _write_jsonl(path, rows)
    if not rows:
        logger.warning("%s: zero rows exported", path)
    return len(rows)


def _eligible(
    records: Iterable[OptimizationRecord], min_gain: float, dedup: bool
) -> Iterator[OptimizationRecord]:
    seen: set[str] = set()
    for record in records:
        if record.combined_gain < min_gain:
            continue
        if dedup:
            if record.prompt.text in seen:
                continue
            seen.add(record.prompt.text)
        yield record


def _write_jsonl(path: str | Path, rows: list[dict[str, Any]]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_example_pairs(path: str | Path) -> list[ExamplePair]:
    """Read an example pool; accepts both the ICL-pool and the SFT schema."""
    pairs: list[ExamplePair] = []
    for line_no, data in iter_jsonl(path):
        if "original" in data and "optimized" in data:
            pairs.append(
                ExamplePair(
                    original=str(data["original"]),
                    optimized=str(data["optimized"]),
                    combined_gain=float(data.get("gain", 0.0)),
                )
            )
        elif "prompt" in data and "completion" in data:
            pairs.append(
                ExamplePair(original=str(data["prompt"]), optimized=str(data["completion"]))
            )
        else:
            raise ValueError(f"{path}: line {line_no}: not an example pair")
    return pairs


def sample_examples(pool: list[ExamplePair], n: int, seed: int) -> list[ExamplePair]:
    """Uniform sample without replacement, deterministic for a fixed seed."""
    if n > len(pool):
        raise ValueError(f"cannot sample {n} examples from a pool of {len(pool)}")
    return random.Random(seed).sample(pool, n)
