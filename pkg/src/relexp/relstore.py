"""Typed in-memory relational store.

Relations are stored column-wise: numeric columns as float64 arrays with
NaN marking missing cells, categorical columns as int64 symbol codes
(-1 = missing) plus a per-column symbol table. Databases are immutable
after load/validation; perturbations construct new Database objects.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NotFound, ParseError, SchemaViolation
from .treeio import dump_tree, load_tree

MISSING_CODE = -1


class AttributeKind(enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class AttributeRole(enum.Enum):
    KEY = "key"
    FOREIGN_KEY_PART = "foreign_key_part"
    DATA = "data"


class Task(enum.Enum):
    BINARY_CLASSIFICATION = "classification"
    REGRESSION = "regression"


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: AttributeKind


@dataclass(frozen=True)
class RelationSchema:
    name: str
    attributes: tuple[AttributeDef, ...]
    key: tuple[str, ...]

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ParseError(f"relation {self.name}: duplicate attribute names")
        if not self.key:
            raise ParseError(f"relation {self.name}: empty key")
        for k in self.key:
            if k not in names:
                raise ParseError(f"relation {self.name}: key attribute {k} not declared")

    @property
    def attr_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def attribute(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise NotFound(f"relation {self.name} has no attribute {name}")


@dataclass(frozen=True)
class ForeignKey:
    id: str
    source_relation: str
    source_attrs: tuple[str, ...]
    target_relation: str


@dataclass(frozen=True)
class DatabaseSchema:
    relations: dict[str, RelationSchema]
    fks: tuple[ForeignKey, ...]
    target_relation: str
    task: Task
    label_attr: str

    def __post_init__(self):
        fk_ids = [fk.id for fk in self.fks]
        if len(set(fk_ids)) != len(fk_ids):
            raise ParseError("duplicate foreign-key ids")
        for fk in self.fks:
            src = self.relations.get(fk.source_relation)
            tgt = self.relations.get(fk.target_relation)
            if src is None or tgt is None:
                raise ParseError(f"fk {fk.id}: undeclared relation")
            if len(fk.source_attrs) != len(tgt.key):
                raise ParseError(f"fk {fk.id}: arity differs from target key")
            for a, b in zip(fk.source_attrs, tgt.key):
                if src.attribute(a).kind is not tgt.attribute(b).kind:
                    raise ParseError(f"fk {fk.id}: kind mismatch on {a} vs {b}")
        if self.target_relation not in self.relations:
            raise ParseError(f"target relation {self.target_relation} not declared")
        if attribute_role(self, self.target_relation, self.label_attr) is not AttributeRole.DATA:
            raise ParseError(f"label attribute {self.label_attr} must be a data attribute")

    def relation(self, name: str) -> RelationSchema:
        rel = self.relations.get(name)
        if rel is None:
            raise NotFound(f"unknown relation {name}")
        return rel

    def fk(self, fk_id: str) -> ForeignKey:
        for fk in self.fks:
            if fk.id == fk_id:
                return fk
        raise NotFound(f"unknown foreign key {fk_id}")

    def fk_attrs(self, relation: str) -> tuple[str, ...]:
        """Attributes of *relation* appearing in some FK left-hand side, schema order."""
        in_fk = set()
        for fk in self.fks:
            if fk.source_relation == relation:
                in_fk.update(fk.source_attrs)
        return tuple(a for a in self.relation(relation).attr_names if a in in_fk)

    def data_attrs(self, relation: str) -> tuple[str, ...]:
        return tuple(
            a
            for a in self.relation(relation).attr_names
            if attribute_role(self, relation, a) is AttributeRole.DATA
        )

    def explainable_attrs(self, relation: str) -> tuple[str, ...]:
        """Data attributes eligible for explanations: the target label is excluded."""
        attrs = self.data_attrs(relation)
        if relation == self.target_relation:
            attrs = tuple(a for a in attrs if a != self.label_attr)
        return attrs

    def all_explainable_attrs(self) -> tuple[tuple[str, str], ...]:
        return tuple(
            (rel, a) for rel in self.relations for a in self.explainable_attrs(rel)
        )


def attribute_role(schema: DatabaseSchema, relation: str, attr: str) -> AttributeRole:
    """Classify an attribute. Key wins over foreign-key membership."""
    rel = schema.relation(relation)
    rel.attribute(attr)  # raises NotFound
    if attr in rel.key:
        return AttributeRole.KEY
    for fk in schema.fks:
        if fk.source_relation == relation and attr in fk.source_attrs:
            return AttributeRole.FOREIGN_KEY_PART
    return AttributeRole.DATA


@dataclass
class Column:
    kind: AttributeKind
    values: np.ndarray
    symbols: tuple[str, ...] | None = None  # categorical only; code = index

    def __post_init__(self):
        if self.kind is AttributeKind.NUMERIC:
            self.values = np.asarray(self.values, dtype=np.float64)
        else:
            self.values = np.asarray(self.values, dtype=np.int64)

    def decode(self, i: int):
        """Cell value as a plain Python value; None for missing."""
        v = self.values[i]
        if self.kind is AttributeKind.NUMERIC:
            return None if math.isnan(v) else float(v)
        return None if v == MISSING_CODE else self.symbols[int(v)]

    def decoded(self) -> list:
        return [self.decode(i) for i in range(len(self.values))]

    def missing_mask(self) -> np.ndarray:
        if self.kind is AttributeKind.NUMERIC:
            return np.isnan(self.values)
        return self.values == MISSING_CODE


@dataclass
class ColumnDomain:
    """Active domain of one column: value multiset plus missing-cell count."""

    counts: Counter
    missing: int


@dataclass
class Relation:
    schema: RelationSchema
    columns: dict[str, Column]
    _key_index: dict | None = field(default=None, repr=False)

    @property
    def n_rows(self) -> int:
        first = next(iter(self.columns.values()), None)
        return 0 if first is None else len(first.values)

    def row(self, i: int) -> tuple:
        return tuple(self.columns[a].decode(i) for a in self.schema.attr_names)

    def key_of(self, i: int) -> tuple:
        return tuple(self.columns[a].decode(i) for a in self.schema.key)

    def key_index(self) -> dict:
        """Key tuple -> row index. Built lazily, relation treated as immutable."""
        if self._key_index is None:
            self._key_index = {self.key_of(i): i for i in range(self.n_rows)}
        return self._key_index


@dataclass
class Database:
    schema: DatabaseSchema
    relations: dict[str, Relation]

    def relation(self, name: str) -> Relation:
        rel = self.relations.get(name)
        if rel is None:
            raise NotFound(f"unknown relation {name}")
        return rel

    def fk_target_index(self, fk_id: str) -> dict:
        fk = self.schema.fk(fk_id)
        return self.relation(fk.target_relation).key_index()


@dataclass(frozen=True)
class Violation:
    kind: str  # key-duplicate | key-missing | fk-dangling | fk-missing
    relation: str
    detail: str
    fk_id: str | None = None


@dataclass
class ValidationReport:
    violations: list[Violation]

    def ok(self) -> bool:
        return not self.violations


def validate_database(schema: DatabaseSchema, db: Database) -> ValidationReport:
    """Check key uniqueness, total keys/FK parts, and FK satisfaction.

    Pure: never mutates the database; violations are reported, not raised.
    """
    violations: list[Violation] = []
    for name, rel_schema in schema.relations.items():
        rel = db.relation(name)
        seen: dict[tuple, int] = {}
        for i in range(rel.n_rows):
            key = rel.key_of(i)
            if any(v is None for v in key):
                violations.append(Violation("key-missing", name, f"row {i} has a missing key cell"))
                continue
            if key in seen:
                violations.append(
                    Violation("key-duplicate", name, f"key {key} shared by rows {seen[key]} and {i}")
                )
            else:
                seen[key] = i
    for fk in schema.fks:
        src = db.relation(fk.source_relation)
        target_keys = db.relation(fk.target_relation).key_index()
        cols = [src.columns[a] for a in fk.source_attrs]
        for i in range(src.n_rows):
            value = tuple(c.decode(i) for c in cols)
            if any(v is None for v in value):
                violations.append(
                    Violation("fk-missing", fk.source_relation, f"row {i} has a missing FK cell", fk.id)
                )
            elif value not in target_keys:
                violations.append(
                    Violation("fk-dangling", fk.source_relation, f"row {i} references {value}", fk.id)
                )
    return ValidationReport(violations)


def active_domain(db: Database, relation: str, attr: str) -> ColumnDomain:
    """Exact multiset of a column's non-missing values plus missing count."""
    rel = db.relation(relation)
    rel.schema.attribute(attr)
    col = rel.columns[attr]
    counts: Counter = Counter()
    missing = 0
    for i in range(rel.n_rows):
        v = col.decode(i)
        if v is None:
            missing += 1
        else:
            counts[v] += 1
    return ColumnDomain(counts, missing)


# ---------------------------------------------------------------------------
# Descriptor + CSV ingestion
# ---------------------------------------------------------------------------

def parse_schema_descriptor(data: dict) -> DatabaseSchema:
    try:
        relations = {}
        for rel in data["relations"]:
            attrs = tuple(
                AttributeDef(a["name"], AttributeKind(a["kind"])) for a in rel["attributes"]
            )
            relations[rel["name"]] = RelationSchema(rel["name"], attrs, tuple(rel["key"]))
        fks = tuple(
            ForeignKey(f["id"], f["source"], tuple(f["source_attrs"]), f["target"])
            for f in data.get("foreign_keys", [])
        )
        target = data["target"]
        schema = DatabaseSchema(
            relations=relations,
            fks=fks,
            target_relation=target["relation"],
            task=Task(target["task"]),
            label_attr=target["label"],
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed schema descriptor: {exc}") from exc
    return schema


def schema_descriptor_dict(schema: DatabaseSchema) -> dict:
    return {
        "relations": [
            {
                "name": rel.name,
                "key": list(rel.key),
                "attributes": [{"name": a.name, "kind": a.kind.value} for a in rel.attributes],
            }
            for rel in schema.relations.values()
        ],
        "foreign_keys": [
            {
                "id": fk.id,
                "source": fk.source_relation,
                "source_attrs": list(fk.source_attrs),
                "target": fk.target_relation,
            }
            for fk in schema.fks
        ],
        "target": {
            "relation": schema.target_relation,
            "task": schema.task.value,
            "label": schema.label_attr,
        },
    }


def _column_from_strings(name: str, kind: AttributeKind, raw: list[str], relation: str) -> Column:
    if kind is AttributeKind.NUMERIC:
        values = np.empty(len(raw), dtype=np.float64)
        for i, cell in enumerate(raw):
            if cell == "":
                values[i] = np.nan
            else:
                try:
                    values[i] = float(cell)
                except ValueError as exc:
                    raise ParseError(
                        f"relation {relation}, column {name}, row {i}: not numeric: {cell!r}"
                    ) from exc
        return Column(kind, values)
    symbols: list[str] = []
    index: dict[str, int] = {}
    codes = np.empty(len(raw), dtype=np.int64)
    for i, cell in enumerate(raw):
        if cell == "":
            codes[i] = MISSING_CODE
        else:
            code = index.get(cell)
            if code is None:
                code = len(symbols)
                index[cell] = code
                symbols.append(cell)
            codes[i] = code
    return Column(kind, codes, tuple(symbols))


def load_relation_csv(rel_schema: RelationSchema, path: Path) -> Relation:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise ParseError(f"{path}: empty file") from exc
        declared = list(rel_schema.attr_names)
        if sorted(header) != sorted(declared):
            raise ParseError(
                f"{path}: header {header} does not match declared attributes {declared}"
            )
        pos = {name: header.index(name) for name in declared}
        raw: dict[str, list[str]] = {name: [] for name in declared}
        for rownum, row in enumerate(reader):
            if len(row) != len(header):
                raise ParseError(
                    f"relation {rel_schema.name}, row {rownum}: expected "
                    f"{len(header)} fields, got {len(row)}"
                )
            for name in declared:
                raw[name].append(row[pos[name]])
    columns = {
        a.name: _column_from_strings(a.name, a.kind, raw[a.name], rel_schema.name)
        for a in rel_schema.attributes
    }
    return Relation(rel_schema, columns)


def load_csv_database(schema_file: str | Path, data_dir: str | Path) -> tuple[DatabaseSchema, Database]:
    """Load a schema descriptor plus one CSV per relation; validate before returning."""
    schema = parse_schema_descriptor(load_tree(schema_file))
    data_dir = Path(data_dir)
    relations = {}
    for name, rel_schema in schema.relations.items():
        path = data_dir / f"{name}.csv"
        if not path.exists():
            raise ParseError(f"missing CSV for relation {name}: {path}")
        relations[name] = load_relation_csv(rel_schema, path)
    db = Database(schema, relations)
    report = validate_database(schema, db)
    if not report.ok():
        first = report.violations[0]
        raise SchemaViolation(
            f"{len(report.violations)} constraint violation(s); first: "
            f"{first.kind} in {first.relation}: {first.detail}",
            report,
        )
    return schema, db


def _format_cell(col: Column, i: int) -> str:
    v = col.decode(i)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def emit_csv_database(db: Database, out_dir: str | Path) -> None:
    """Write one headered CSV per relation (round-trips through load)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rel in db.relations.items():
        with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(rel.schema.attr_names)
            cols = [rel.columns[a] for a in rel.schema.attr_names]
            for i in range(rel.n_rows):
                writer.writerow([_format_cell(c, i) for c in cols])


def emit_schema_descriptor(schema: DatabaseSchema, path: str | Path) -> None:
    dump_tree(schema_descriptor_dict(schema), path)
