"""JSONL persistence helpers.

Every artifact file starts with a header record carrying the schema name and
a schema_version so old files fail loudly instead of deserializing garbage.
Content hashing strips volatile fields (wall-clock timings) so reruns of a
deterministic pipeline hash identically.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import TaskFormatError

SCHEMA_VERSION = 1

# Fields that legitimately differ between reruns of the same seeded pipeline.
VOLATILE_FIELDS = frozenset({"wall_time_s"})


def dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_records(path: str | Path, schema: str, records: Iterable[dict[str, Any]]) -> int:
    """Write a header line followed by one record per line. Returns record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps({"schema": schema, "schema_version": SCHEMA_VERSION}) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def append_record(path: str | Path, schema: str, record: dict[str, Any]) -> None:
    """Append one record, writing the header first if the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not path.exists() or path.stat().st_size == 0:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps({"schema": schema, "schema_version": SCHEMA_VERSION}) + "\n")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(dumps(record) + "\n")


def read_records(path: str | Path, schema: str | None = None) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line_number, record) pairs, skipping a leading header record.

    line_number is 1-based and refers to the physical line in the file so
    parse errors can point at the offending record. Files written before a
    header was standard (no header line) are accepted as long as the first
    record is not itself a header for a different schema.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TaskFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict):
                raise TaskFormatError(f"{path}: line {lineno}: expected an object")
            if lineno == 1 and "schema" in rec and "schema_version" in rec:
                if schema is not None and rec["schema"] != schema:
                    raise TaskFormatError(
                        f"{path}: header schema {rec['schema']!r} does not match expected {schema!r}"
                    )
                if rec["schema_version"] > SCHEMA_VERSION:
                    raise TaskFormatError(
                        f"{path}: schema_version {rec['schema_version']} is newer than supported {SCHEMA_VERSION}"
                    )
                continue
            yield lineno, rec


def _strip_volatile(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _strip_volatile(v) for k, v in value.items() if k not in VOLATILE_FIELDS}
    if isinstance(value, list):
        return [_strip_volatile(v) for v in value]
    return value


def canonical_file_hash(path: str | Path) -> str:
    """sha256 of a file with volatile fields removed from JSONL/JSON content.

    Non-JSON files hash their raw bytes. This is the hash recorded in run
    manifests, so two runs with identical seeds produce identical hashes even
    though per-record wall times differ.
    """
    path = Path(path)
    data = path.read_bytes()
    if path.suffix in {".jsonl", ".json"}:
        try:
            text = data.decode("utf-8")
            if path.suffix == ".json":
                canon = dumps(_strip_volatile(json.loads(text)))
            else:
                lines = [dumps(_strip_volatile(json.loads(ln))) for ln in text.splitlines() if ln.strip()]
                canon = "\n".join(lines)
            data = canon.encode("utf-8")
        except (json.JSONDecodeError, UnicodeDecodeError):
            pass  # hash raw bytes if the file is not actually JSON
    return hashlib.sha256(data).hexdigest()


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from arbitrary labels.

    Used everywhere a sub-seed is needed (per rollout slot, per phase) so no
    component ever consults the wall clock or global RNG state.
    """
    key = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
