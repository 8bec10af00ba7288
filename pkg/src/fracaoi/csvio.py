"""CSV output with a versioned schema line, and the matching reader."""
from __future__ import annotations

import csv
from typing import TextIO

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def schema_writer(fh: TextIO, schema: str, header) -> "csv._writer":
    """Write ``# schema=<name> version=<v>`` then the header; return the writer."""
    fh.write(f"# schema={schema} version={SCHEMA_VERSION}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return w


def read_schema_csv(path) -> tuple[str, list[str], list[dict]]:
    """Return (schema name, header, rows); rows are dicts of strings."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema="):
            raise SchemaError(f"{path}: missing schema line")
        fields = dict(tok.split("=", 1) for tok in first[1:].split())
        if int(fields.get("version", -1)) != SCHEMA_VERSION:
            raise SchemaError(f"{path}: unsupported schema version {fields.get('version')}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError(f"{path}: no header")
        rows = [dict(zip(header, r)) for r in reader if r]
    return fields["schema"], header, rows
