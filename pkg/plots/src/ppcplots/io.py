"""CSV/manifest readers for the documented ppcnav output schemas."""

from __future__ import annotations

import csv
from pathlib import Path


class SchemaMismatch(ValueError):
    """An input file is missing, empty, or lacks a documented column."""


def read_manifest(run_dir: Path) -> dict[str, str]:
    path = Path(run_dir) / "manifest.txt"
    if not path.exists():
        raise SchemaMismatch(f"manifest not found: {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    if "schema_version" not in out:
        raise SchemaMismatch(f"{path}: missing schema_version")
    return out


def read_rows(path: Path, required: list[str]) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise SchemaMismatch(f"input not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise SchemaMismatch(f"{path}: missing column {column!r}")
        rows = list(reader)
    if not rows:
        raise SchemaMismatch(f"{path}: no data rows")
    return rows


def column(rows: list[dict[str, str]], name: str) -> list[float]:
    return [float(r[name]) for r in rows]


def first_seed(exp_dir: Path, variant: str) -> int:
    variant_dir = Path(exp_dir) / variant
    if not variant_dir.is_dir():
        raise SchemaMismatch(f"missing variant directory: {variant_dir}")
    seeds = sorted(int(p.stem) for p in variant_dir.glob("*.csv"))
    if not seeds:
        raise SchemaMismatch(f"no episode CSVs under {variant_dir}")
    return seeds[0]
