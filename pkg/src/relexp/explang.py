"""Explanation views: representation, cost, native evaluation, SQL emission.

An Explanation is stored factored: per-relation projections, a join set,
and per-relation selections, together with a language tag. Concrete
evaluable views (`views_of`) realize the composition semantics per
language; native evaluation exists to test that perturbed databases
agree with the original on every view.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, NotFound, ParseError
from .relstore import (
    AttributeKind,
    AttributeRole,
    Database,
    DatabaseSchema,
    attribute_role,
)
from .treeio import dump_tree, load_tree


class Language(enum.Enum):
    PROJECTION = "projection"
    FKJOIN = "fkjoin"
    SELECTION = "selection"
    PROJ_SELECT = "proj-select"
    FKJOIN_PROJ = "fkjoin-proj"
    FKJOIN_PROJ_SELECT = "fkjoin-proj-select"


_JOIN_LANGS = {Language.FKJOIN, Language.FKJOIN_PROJ, Language.FKJOIN_PROJ_SELECT}
_PROJ_LANGS = {
    Language.PROJECTION,
    Language.PROJ_SELECT,
    Language.FKJOIN_PROJ,
    Language.FKJOIN_PROJ_SELECT,
}
_SELECT_LANGS = {Language.SELECTION, Language.PROJ_SELECT, Language.FKJOIN_PROJ_SELECT}


@dataclass(frozen=True)
class AtomicPredicate:
    """Single-attribute predicate: equality on a categorical value or a
    closed numeric range with quantile-derived bounds."""

    relation: str
    attr: str
    op: str  # "eq" | "range"
    value: str | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.op == "eq":
            if self.value is None:
                raise DomainError("eq predicate needs a value")
        elif self.op == "range":
            if self.lo is None or self.hi is None or self.lo > self.hi:
                raise DomainError("range predicate needs lo <= hi")
        else:
            raise DomainError(f"unknown predicate op {self.op}")

    @property
    def pid(self) -> str:
        if self.op == "eq":
            return f"{self.relation}.{self.attr}={self.value}"
        return f"{self.relation}.{self.attr}:[{self.lo!r},{self.hi!r}]"

    def satisfied(self, db: Database) -> np.ndarray:
        """Boolean mask over the relation's rows; missing never satisfies."""
        col = db.relation(self.relation).columns[self.attr]
        if self.op == "eq":
            if col.kind is not AttributeKind.CATEGORICAL:
                raise DomainError(f"eq predicate on non-categorical {self.relation}.{self.attr}")
            try:
                code = col.symbols.index(self.value)
            except ValueError:
                return np.zeros(len(col.values), dtype=bool)
            return col.values == code
        if col.kind is not AttributeKind.NUMERIC:
            raise DomainError(f"range predicate on non-numeric {self.relation}.{self.attr}")
        v = col.values
        with np.errstate(invalid="ignore"):
            return (v >= self.lo) & (v <= self.hi)


@dataclass(frozen=True)
class ProjectionView:
    relation: str
    data_attrs: tuple[str, ...]


@dataclass(frozen=True)
class FKJoinView:
    fk_id: str


@dataclass(frozen=True)
class SelectionView:
    relation: str
    disjuncts: tuple[AtomicPredicate, ...]

    def __post_init__(self):
        if not self.disjuncts:
            raise DomainError("selection view needs at least one disjunct")
        if any(p.relation != self.relation for p in self.disjuncts):
            raise DomainError("selection disjuncts must reference the view's relation")


@dataclass(frozen=True)
class Explanation:
    language: Language
    projections: dict[str, ProjectionView] = field(default_factory=dict)
    joins: tuple[str, ...] = ()
    selections: dict[str, SelectionView] = field(default_factory=dict)

    def validate(self, schema: DatabaseSchema) -> None:
        if self.projections and self.language not in _PROJ_LANGS:
            raise DomainError(f"{self.language.value} explanation cannot carry projections")
        if self.joins and self.language not in _JOIN_LANGS:
            raise DomainError(f"{self.language.value} explanation cannot carry joins")
        if self.selections and self.language not in _SELECT_LANGS:
            raise DomainError(f"{self.language.value} explanation cannot carry selections")
        for rel, view in self.projections.items():
            if view.relation != rel:
                raise DomainError("projection map key must equal the view relation")
            for a in view.data_attrs:
                if attribute_role(schema, rel, a) is not AttributeRole.DATA:
                    raise DomainError(f"projected attribute {rel}.{a} is not a data attribute")
        for fk_id in self.joins:
            schema.fk(fk_id)
        for rel, view in self.selections.items():
            if view.relation != rel:
                raise DomainError("selection map key must equal the view relation")
            for p in view.disjuncts:
                if attribute_role(schema, rel, p.attr) is not AttributeRole.DATA:
                    raise DomainError(f"predicate attribute {rel}.{p.attr} is not a data attribute")
            # Composite languages project selected relations, so exact view
            # agreement under perturbation needs predicate attrs kept fixed.
            if self.language in (Language.PROJ_SELECT, Language.FKJOIN_PROJ_SELECT):
                proj = self.projections.get(rel)
                kept = set(proj.data_attrs) if proj else set()
                for p in view.disjuncts:
                    if p.attr not in kept:
                        raise DomainError(
                            f"composite selection on {rel}.{p.attr} requires that "
                            "attribute to be projected"
                        )

    def is_empty(self) -> bool:
        return not self.projections and not self.joins and not self.selections


def empty_explanation(language: Language) -> Explanation:
    return Explanation(language)


def full_projection(schema: DatabaseSchema, include_label: bool = False) -> Explanation:
    views = {}
    for rel in schema.relations:
        attrs = schema.data_attrs(rel) if include_label else schema.explainable_attrs(rel)
        if attrs:
            views[rel] = ProjectionView(rel, attrs)
    return Explanation(Language.PROJECTION, projections=views)


def projection_of(schema: DatabaseSchema, attrs: set[tuple[str, str]]) -> Explanation:
    """Projection explanation keeping the given (relation, attr) pairs, schema order."""
    views = {}
    for rel in schema.relations:
        kept = tuple(a for a in schema.relation(rel).attr_names if (rel, a) in attrs)
        if kept:
            views[rel] = ProjectionView(rel, kept)
    return Explanation(Language.PROJECTION, projections=views)


def cost(e: Explanation) -> int:
    """Projection costs the attribute count, each join 1, selections the
    number of atomic predicates; composites sum all three."""
    total = sum(len(v.data_attrs) for v in e.projections.values())
    total += len(e.joins)
    total += sum(len(v.disjuncts) for v in e.selections.values())
    return total


def attrs_of(e: Explanation, schema: DatabaseSchema) -> set[tuple[str, str]]:
    """All key and FK attributes of every relation plus the projected data attrs."""
    out: set[tuple[str, str]] = set()
    for rel_name, rel in schema.relations.items():
        for a in rel.key:
            out.add((rel_name, a))
        for a in schema.fk_attrs(rel_name):
            out.add((rel_name, a))
    for rel_name, view in e.projections.items():
        for a in view.data_attrs:
            out.add((rel_name, a))
    return out


def fks_of(e: Explanation) -> set[str]:
    return set(e.joins)


def selection_masks(e: Explanation, db: Database) -> dict[str, np.ndarray]:
    """Per selected relation, the boolean row mask of tuples satisfying the
    disjunction. Relations without a selection view are absent."""
    masks = {}
    for rel, view in e.selections.items():
        mask = np.zeros(db.relation(rel).n_rows, dtype=bool)
        for p in view.disjuncts:
            mask |= p.satisfied(db)
        masks[rel] = mask
    return masks


def tups_of(e: Explanation, db: Database) -> set[tuple[str, int]]:
    out = set()
    for rel, mask in selection_masks(e, db).items():
        out.update((rel, int(i)) for i in np.flatnonzero(mask))
    return out


# ---------------------------------------------------------------------------
# Concrete evaluable views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TableView:
    """Single-relation view: project *attrs*, optionally filter by a
    disjunction of predicates first."""

    relation: str
    attrs: tuple[str, ...]
    disjuncts: tuple[AtomicPredicate, ...] | None = None


@dataclass(frozen=True)
class JoinView:
    """FK equi-join exposing selected columns of both sides."""

    fk_id: str
    left_attrs: tuple[str, ...]
    right_attrs: tuple[str, ...]


def _kept_fk_attrs(schema: DatabaseSchema, rel: str, kept_fks: set[str]) -> tuple[str, ...]:
    in_kept = set()
    for fk in schema.fks:
        if fk.id in kept_fks and fk.source_relation == rel:
            in_kept.update(fk.source_attrs)
    return tuple(a for a in schema.relation(rel).attr_names if a in in_kept)


def views_of(e: Explanation, schema: DatabaseSchema) -> list[TableView | JoinView]:
    """Concrete views whose results every contingency database must preserve.

    Join views expose keys, the join's own FK columns, and the data columns
    the language protects (all data attrs for pure FKJoin, projected attrs
    in composites); FK columns of other joins are not part of a join view's
    output, which is what lets unkept joins be rewired freely.
    """
    has_join = e.language in _JOIN_LANGS
    kept = set(e.joins)
    views: list[TableView | JoinView] = []
    for rel_name, rel in schema.relations.items():
        fk_attrs = _kept_fk_attrs(schema, rel_name, kept) if has_join else schema.fk_attrs(rel_name)
        structure = tuple(a for a in rel.attr_names if a in rel.key or a in fk_attrs)
        proj_view = e.projections.get(rel_name)
        sel_view = e.selections.get(rel_name)
        views.append(TableView(rel_name, structure))
        if e.language is Language.SELECTION and sel_view is not None:
            views.append(TableView(rel_name, rel.attr_names, sel_view.disjuncts))
            continue
        if proj_view is not None or sel_view is not None:
            proj = set(proj_view.data_attrs) if proj_view else set()
            cols = tuple(
                a for a in rel.attr_names if a in rel.key or a in fk_attrs or a in proj
            )
            views.append(TableView(rel_name, cols, sel_view.disjuncts if sel_view else None))
    for fk_id in e.joins:
        fk = schema.fk(fk_id)
        src, tgt = fk.source_relation, fk.target_relation

        def _side(rel_name: str, extra: tuple[str, ...]) -> tuple[str, ...]:
            rel = schema.relation(rel_name)
            if e.language is Language.FKJOIN:
                data = set(schema.data_attrs(rel_name))
            else:
                pv = e.projections.get(rel_name)
                data = set(pv.data_attrs) if pv else set()
            keep = set(rel.key) | set(extra) | data
            return tuple(a for a in rel.attr_names if a in keep)

        views.append(JoinView(fk_id, _side(src, fk.source_attrs), _side(tgt, ())))
    return views


def evaluate_view(view, db: Database) -> frozenset:
    """Native evaluation, for testing only. Returns the set of result tuples."""
    if isinstance(view, ProjectionView):
        rel = db.schema.relation(view.relation)
        keep = set(rel.key) | set(db.schema.fk_attrs(view.relation)) | set(view.data_attrs)
        view = TableView(view.relation, tuple(a for a in rel.attr_names if a in keep))
    elif isinstance(view, SelectionView):
        rel = db.schema.relation(view.relation)
        view = TableView(view.relation, rel.attr_names, view.disjuncts)
    elif isinstance(view, FKJoinView):
        fk = db.schema.fk(view.fk_id)
        view = JoinView(
            view.fk_id,
            db.schema.relation(fk.source_relation).attr_names,
            db.schema.relation(fk.target_relation).attr_names,
        )

    if isinstance(view, TableView):
        rel = db.relation(view.relation)
        if view.disjuncts:
            mask = np.zeros(rel.n_rows, dtype=bool)
            for p in view.disjuncts:
                mask |= p.satisfied(db)
            rows = np.flatnonzero(mask)
        else:
            rows = range(rel.n_rows)
        cols = [rel.columns[a] for a in view.attrs]
        return frozenset(tuple(c.decode(i) for c in cols) for i in rows)
    if isinstance(view, JoinView):
        fk = db.schema.fk(view.fk_id)
        src = db.relation(fk.source_relation)
        tgt = db.relation(fk.target_relation)
        tgt_index = tgt.key_index()
        fk_cols = [src.columns[a] for a in fk.source_attrs]
        left_cols = [src.columns[a] for a in view.left_attrs]
        right_cols = [tgt.columns[a] for a in view.right_attrs]
        out = []
        for i in range(src.n_rows):
            ref = tuple(c.decode(i) for c in fk_cols)
            j = tgt_index.get(ref)
            if j is None:
                continue
            out.append(
                tuple(c.decode(i) for c in left_cols) + tuple(c.decode(j) for c in right_cols)
            )
        return frozenset(out)
    raise DomainError(f"cannot evaluate view of type {type(view).__name__}")


# ---------------------------------------------------------------------------
# Protection plan (which cells a contingency database must keep bit-identical)
# ---------------------------------------------------------------------------

def protection_plan(e: Explanation, db: Database) -> dict[str, dict[str, np.ndarray]]:
    """Per relation and attribute, the boolean row mask of protected cells.

    Monotone in the explanation: adding views never unprotects a cell.
    """
    schema = db.schema
    has_join = e.language in _JOIN_LANGS
    kept = set(e.joins)
    sel_masks = selection_masks(e, db)
    joined_rels = set()
    for fk_id in kept:
        fk = schema.fk(fk_id)
        joined_rels.update((fk.source_relation, fk.target_relation))
    plan: dict[str, dict[str, np.ndarray]] = {}
    for rel_name, rel_schema in schema.relations.items():
        rel = db.relation(rel_name)
        n = rel.n_rows
        kept_fk = set(_kept_fk_attrs(schema, rel_name, kept))
        proj_view = e.projections.get(rel_name)
        proj = set(proj_view.data_attrs) if proj_view else set()
        per_attr = {}
        for a in rel_schema.attr_names:
            role = attribute_role(schema, rel_name, a)
            if role is AttributeRole.KEY:
                mask = np.ones(n, dtype=bool)
            elif role is AttributeRole.FOREIGN_KEY_PART:
                mask = np.ones(n, dtype=bool) if (not has_join or a in kept_fk) else np.zeros(n, dtype=bool)
            else:
                if e.language is Language.SELECTION:
                    mask = sel_masks.get(rel_name, np.zeros(n, dtype=bool)).copy()
                elif e.language is Language.FKJOIN:
                    mask = np.full(n, rel_name in joined_rels)
                else:
                    mask = np.full(n, a in proj)
            per_attr[a] = mask
        plan[rel_name] = per_attr
    return plan


# ---------------------------------------------------------------------------
# Candidate predicates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateConfig:
    max_eq_values: int = 8
    quantile_bins: int = 4


def candidate_predicates(
    db: Database,
    attrs: set[tuple[str, str]] | list[tuple[str, str]],
    config: CandidateConfig = CandidateConfig(),
) -> list[AtomicPredicate]:
    """Equality predicates for the most frequent categorical values and
    quantile-bin ranges for numeric attributes, in deterministic order."""
    schema = db.schema
    ordered = [
        (rel, a)
        for rel in schema.relations
        for a in schema.relation(rel).attr_names
        if (rel, a) in set(attrs)
    ]
    out: list[AtomicPredicate] = []
    for rel_name, attr in ordered:
        if attribute_role(schema, rel_name, attr) is not AttributeRole.DATA:
            raise DomainError(f"candidate predicates need data attributes, got {rel_name}.{attr}")
        col = db.relation(rel_name).columns[attr]
        if col.kind is AttributeKind.CATEGORICAL:
            codes = col.values[col.values != -1]
            if codes.size == 0:
                continue
            counts = Counter(codes.tolist())
            # most frequent first; ties broken by first-seen symbol order
            top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: config.max_eq_values]
            for code, _ in top:
                out.append(AtomicPredicate(rel_name, attr, "eq", value=col.symbols[int(code)]))
        else:
            vals = col.values[~np.isnan(col.values)]
            if vals.size == 0:
                continue
            qs = np.quantile(vals, np.linspace(0.0, 1.0, config.quantile_bins + 1))
            seen = set()
            for lo, hi in zip(qs[:-1], qs[1:]):
                bounds = (float(lo), float(hi))
                if bounds not in seen:
                    seen.add(bounds)
                    out.append(AtomicPredicate(rel_name, attr, "range", lo=bounds[0], hi=bounds[1]))
    return out


# ---------------------------------------------------------------------------
# SQL rendering
# ---------------------------------------------------------------------------

_IDENT_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_")


def _ident(name: str) -> str:
    if name and not name[0].isdigit() and set(name) <= _IDENT_OK:
        return name
    return '"' + name.replace('"', '""') + '"'


def _literal(p_value) -> str:
    if isinstance(p_value, float):
        return repr(p_value)
    return "'" + str(p_value).replace("'", "''") + "'"


def relation_alias(schema: DatabaseSchema, relation: str) -> str:
    """Deterministic short alias: initials of underscore-separated words,
    extended with the relation index on collision."""
    aliases = {}
    taken = {}
    for i, name in enumerate(schema.relations):
        alias = "".join(w[0] for w in name.split("_") if w) or name
        if alias in taken:
            alias = f"{alias}{i}"
        taken[alias] = name
        aliases[name] = alias
    return aliases[relation]


def _predicate_sql(p: AtomicPredicate, qualifier: str | None, parenthesize: bool) -> str:
    col = f"{qualifier}.{_ident(p.attr)}" if qualifier else _ident(p.attr)
    if p.op == "eq":
        return f"{col} = {_literal(p.value)}"
    body = f"{col} >= {_literal(p.lo)} AND {col} <= {_literal(p.hi)}"
    return f"({body})" if parenthesize else body


def _where_sql(disjuncts, qualifier):
    many = len(disjuncts) > 1
    return " OR ".join(_predicate_sql(p, qualifier, many) for p in disjuncts)


def to_sql(view, schema: DatabaseSchema) -> str:
    """Deterministic, dialect-neutral SQL for a single view."""
    if isinstance(view, ProjectionView):
        rel = schema.relation(view.relation)
        cols = [a for a in rel.attr_names if a in rel.key]
        cols += [a for a in schema.fk_attrs(view.relation) if a not in cols]
        cols += [a for a in rel.attr_names if a in view.data_attrs and a not in cols]
        return f"SELECT {', '.join(_ident(c) for c in cols)} FROM {_ident(view.relation)}"
    if isinstance(view, FKJoinView):
        fk = schema.fk(view.fk_id)
        ls = relation_alias(schema, fk.source_relation)
        rs = relation_alias(schema, fk.target_relation)
        tgt_key = schema.relation(fk.target_relation).key
        on = " AND ".join(
            f"{ls}.{_ident(a)} = {rs}.{_ident(b)}" for a, b in zip(fk.source_attrs, tgt_key)
        )
        return (
            f"SELECT * FROM {_ident(fk.source_relation)} {ls} "
            f"JOIN {_ident(fk.target_relation)} {rs} ON {on}"
        )
    if isinstance(view, SelectionView):
        return (
            f"SELECT * FROM {_ident(view.relation)} WHERE "
            f"{_where_sql(view.disjuncts, None)}"
        )
    raise DomainError(f"cannot render view of type {type(view).__name__}")


def composite_relation_sql(
    schema: DatabaseSchema,
    relation: str,
    proj: ProjectionView | None,
    sel: SelectionView | None,
) -> str:
    """Per-relation composite view: projection columns plus optional WHERE."""
    rel = schema.relation(relation)
    alias = relation_alias(schema, relation)
    cols = [a for a in rel.attr_names if a in rel.key]
    cols += [a for a in schema.fk_attrs(relation) if a not in cols]
    if proj:
        cols += [a for a in rel.attr_names if a in proj.data_attrs and a not in cols]
    sql = f"SELECT {', '.join(_ident(c) for c in cols)} FROM {_ident(relation)} {alias}"
    if sel:
        sql += f" WHERE {_where_sql(sel.disjuncts, alias)}"
    return sql


def render_join_chain(schema: DatabaseSchema, fk_ids: list[str], base_relation: str) -> str:
    """Multi-join rendering of several FKJoin views as one statement.

    Joins are attached outward from *base_relation*; each FK must touch the
    already-connected set. Purely presentational; cost is unchanged.
    """
    connected = {base_relation}
    sql = f"SELECT * FROM {_ident(base_relation)} {relation_alias(schema, base_relation)}"
    pending = list(fk_ids)
    while pending:
        for i, fk_id in enumerate(pending):
            fk = schema.fk(fk_id)
            src_in = fk.source_relation in connected
            tgt_in = fk.target_relation in connected
            if not (src_in or tgt_in):
                continue
            new_rel = fk.target_relation if src_in else fk.source_relation
            sa = relation_alias(schema, fk.source_relation)
            ta = relation_alias(schema, fk.target_relation)
            tgt_key = schema.relation(fk.target_relation).key
            if src_in:
                on = " AND ".join(
                    f"{sa}.{_ident(a)} = {ta}.{_ident(b)}"
                    for a, b in zip(fk.source_attrs, tgt_key)
                )
            else:
                on = " AND ".join(
                    f"{ta}.{_ident(b)} = {sa}.{_ident(a)}"
                    for a, b in zip(fk.source_attrs, tgt_key)
                )
            sql += f" JOIN {_ident(new_rel)} {relation_alias(schema, new_rel)} ON {on}"
            connected.add(new_rel)
            pending.pop(i)
            break
        else:
            raise DomainError(f"join chain disconnected from {base_relation}: {pending}")
    return sql


def explanation_sql(e: Explanation, schema: DatabaseSchema) -> list[str]:
    """One SQL statement per view, in deterministic order."""
    out = []
    if e.language in (Language.PROJECTION, Language.FKJOIN, Language.SELECTION):
        for rel in schema.relations:
            if rel in e.projections:
                out.append(to_sql(e.projections[rel], schema))
            if rel in e.selections:
                out.append(to_sql(e.selections[rel], schema))
        for fk_id in e.joins:
            out.append(to_sql(FKJoinView(fk_id), schema))
        return out
    for rel in schema.relations:
        proj = e.projections.get(rel)
        sel = e.selections.get(rel)
        if proj is None and sel is None:
            continue
        out.append(composite_relation_sql(schema, rel, proj, sel))
    for fk_id in e.joins:
        out.append(to_sql(FKJoinView(fk_id), schema))
    return out


# ---------------------------------------------------------------------------
# Explanation file IO
# ---------------------------------------------------------------------------

def _predicate_dict(p: AtomicPredicate) -> dict:
    d = {"relation": p.relation, "attr": p.attr, "op": p.op}
    if p.op == "eq":
        d["value"] = p.value
    else:
        d["lo"] = p.lo
        d["hi"] = p.hi
    return d


def explanation_dict(e: Explanation, schema: DatabaseSchema) -> dict:
    return {
        "language": e.language.value,
        "cost": cost(e),
        "projections": [
            {"relation": rel, "attrs": list(v.data_attrs)}
            for rel, v in sorted(e.projections.items())
        ],
        "joins": list(e.joins),
        "selections": [
            {"relation": rel, "predicates": [_predicate_dict(p) for p in v.disjuncts]}
            for rel, v in sorted(e.selections.items())
        ],
        "sql": explanation_sql(e, schema),
    }


def save_explanation(e: Explanation, schema: DatabaseSchema, path: str | Path) -> None:
    dump_tree(explanation_dict(e, schema), path)


def load_explanation(path: str | Path) -> Explanation:
    data = load_tree(path)
    try:
        language = Language(data["language"])
        projections = {
            d["relation"]: ProjectionView(d["relation"], tuple(d["attrs"]))
            for d in data.get("projections", [])
        }
        joins = tuple(data.get("joins", []))
        selections = {}
        for d in data.get("selections", []):
            preds = tuple(
                AtomicPredicate(
                    p["relation"],
                    p["attr"],
                    p["op"],
                    value=p.get("value"),
                    lo=p.get("lo"),
                    hi=p.get("hi"),
                )
                for p in d["predicates"]
            )
            selections[d["relation"]] = SelectionView(d["relation"], preds)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed explanation file {path}: {exc}") from exc
    return Explanation(language, projections=projections, joins=joins, selections=selections)
