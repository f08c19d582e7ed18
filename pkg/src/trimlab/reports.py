"""Shipped JSON schemas, validation, and the JSONL/CSV artifact writers."""

from __future__ import annotations

import csv
import json
from importlib import resources

import jsonschema

SCHEMA_NAMES = (
    "history_record",
    "metrics",
    "trim_report",
    "cost_report",
    "trim_plan",
    "resolved_config",
)

_cache: dict[str, dict] = {}


def load_schema(name: str) -> dict:
    if name not in SCHEMA_NAMES:
        raise KeyError(f"unknown schema {name!r}")
    if name not in _cache:
        text = resources.files("trimlab.schemas").joinpath(f"{name}.schema.json").read_text()
        _cache[name] = json.loads(text)
    return _cache[name]


def validate_json(doc: dict, schema_name: str) -> None:
    jsonschema.validate(doc, load_schema(schema_name))


def dumps_canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def write_json(path, doc: dict, schema_name: str | None = None) -> None:
    if schema_name is not None:
        validate_json(doc, schema_name)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


class HistoryWriter:
    """Streams validated history records as line-delimited JSON."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        validate_json(record, "history_record")
        self._fh.write(dumps_canonical(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_history(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
