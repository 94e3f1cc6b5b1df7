"""Deterministic YAML reading/writing for all structured report files.

Every on-disk tree document (schema descriptors, explanation files,
deviation reports, manifests) goes through these helpers so that field
order is stable and repeated runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .errors import ParseError


def dump_tree(data: dict, path: str | Path) -> None:
    """Write *data* as YAML with insertion-ordered keys."""
    text = dumps_tree(data)
    Path(path).write_text(text, encoding="utf-8")


def dumps_tree(data: dict) -> str:
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=False, width=100)


def load_tree(path: str | Path) -> dict:
    """Read a YAML document, raising ParseError on malformed input."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a mapping at top level")
    return data
