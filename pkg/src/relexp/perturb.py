"""Contingency-database construction.

Every family is rejection-free: databases are perturbed so that all
explanation views evaluate identically on the original and the output by
construction. Column permutations preserve value multisets, FK
replacement preserves referential integrity, and keys are never touched
in any relation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, ImpossiblePerturbation
from .explang import Explanation, Language, selection_masks
from .relstore import Column, Database, Relation

_JOIN_LANGS = {Language.FKJOIN, Language.FKJOIN_PROJ, Language.FKJOIN_PROJ_SELECT}
_SELECT_LANGS = {Language.SELECTION, Language.PROJ_SELECT, Language.FKJOIN_PROJ_SELECT}

IND = "ind"
JOINT = "joint"
UNIFORM = "uniform"
FREQ = "freq"


@dataclass(frozen=True)
class PerturbationSpec:
    """Which permutation family handles column/tuple scrambling and which
    replacement family handles unkept foreign keys; composites use both."""

    perm_family: str = IND
    fk_family: str = UNIFORM
    seed: int = 0

    def __post_init__(self):
        if self.perm_family not in (IND, JOINT):
            raise DomainError(f"unknown permutation family {self.perm_family}")
        if self.fk_family not in (UNIFORM, FREQ):
            raise DomainError(f"unknown FK replacement family {self.fk_family}")

    def with_seed(self, seed: int) -> "PerturbationSpec":
        return replace(self, seed=seed)

    def describe(self) -> dict:
        return {"perm_family": self.perm_family, "fk_family": self.fk_family, "seed": self.seed}


def _clone_relations(db: Database) -> dict[str, dict[str, Column]]:
    return {name: dict(rel.columns) for name, rel in db.relations.items()}


def _build_db(db: Database, columns: dict[str, dict[str, Column]]) -> Database:
    relations = {}
    for name, rel in db.relations.items():
        # keys are never perturbed, so the key index carries over
        relations[name] = Relation(rel.schema, columns[name], rel._key_index)
    return Database(db.schema, relations)


def _permute_columns(
    columns: dict[str, Column],
    attrs: list[str],
    rows: np.ndarray,
    family: str,
    rng: np.random.Generator,
) -> None:
    """Permute the given attrs among *rows* in place (new arrays)."""
    if len(rows) <= 1 or not attrs:
        return
    shared = rng.permutation(len(rows)) if family == JOINT else None
    for attr in attrs:
        perm = shared if shared is not None else rng.permutation(len(rows))
        col = columns[attr]
        values = col.values.copy()
        values[rows] = values[rows][perm]
        columns[attr] = Column(col.kind, values, col.symbols)


def _replace_fk(
    db: Database,
    columns: dict[str, dict[str, Column]],
    fk_id: str,
    family: str,
    rng: np.random.Generator,
) -> None:
    fk = db.schema.fk(fk_id)
    src = db.relation(fk.source_relation)
    tgt = db.relation(fk.target_relation)
    n_src, n_tgt = src.n_rows, tgt.n_rows
    if n_src == 0:
        return
    if n_tgt == 0:
        raise ImpossiblePerturbation(
            f"fk {fk_id}: target {fk.target_relation} is empty but source is not"
        )
    if family == UNIFORM:
        draws = rng.integers(0, n_tgt, size=n_src)
    else:
        tgt_index = tgt.key_index()
        fk_cols = [src.columns[a] for a in fk.source_attrs]
        refs = np.array(
            [tgt_index[tuple(c.decode(i) for c in fk_cols)] for i in range(n_src)],
            dtype=np.int64,
        )
        uniques, counts = np.unique(refs, return_counts=True)
        k = len(uniques)
        chosen = rng.choice(n_tgt, size=k, replace=False)
        shuffled_counts = counts[rng.permutation(k)]
        draws = np.repeat(chosen, shuffled_counts)
        rng.shuffle(draws)
    for src_attr, key_attr in zip(fk.source_attrs, tgt.schema.key):
        tgt_col = tgt.columns[key_attr]
        columns[fk.source_relation][src_attr] = Column(
            tgt_col.kind, tgt_col.values[draws], tgt_col.symbols
        )


def _check_fk_overlap(db: Database, unkept: list[str]) -> None:
    """Unkept FKs must not share source columns with any other FK (replacing
    a shared column would break the other join) and must not sit inside the
    source relation's key (keys are never perturbed)."""
    unkept_set = set(unkept)
    owner: dict[tuple[str, str], str] = {}
    for fk in db.schema.fks:
        src_key = set(db.schema.relation(fk.source_relation).key)
        if fk.id in unkept_set and src_key & set(fk.source_attrs):
            raise ImpossiblePerturbation(
                f"fk {fk.id}: source columns overlap the key of {fk.source_relation}; "
                "keep this join in the explanation or restructure the schema"
            )
        for a in fk.source_attrs:
            cell = (fk.source_relation, a)
            if cell in owner:
                if fk.id in unkept_set or owner[cell] in unkept_set:
                    raise ImpossiblePerturbation(
                        f"fks {owner[cell]} and {fk.id} share column {cell[0]}.{cell[1]}; "
                        "cannot replace one without breaking the other"
                    )
            else:
                owner[cell] = fk.id


def _permutable_attrs(db: Database, rel_name: str, e: Explanation) -> list[str]:
    """Data attributes of the relation outside the explanation's projections."""
    proj = e.projections.get(rel_name)
    kept = set(proj.data_attrs) if proj else set()
    return [a for a in db.schema.data_attrs(rel_name) if a not in kept]


def perturb(db: Database, e: Explanation, spec: PerturbationSpec) -> Database:
    """Draw one contingency database agreeing with *db* on every view of *e*."""
    e.validate(db.schema)
    rng = np.random.default_rng(spec.seed)
    columns = _clone_relations(db)

    if e.language in _JOIN_LANGS:
        kept = set(e.joins)
        unkept = [fk.id for fk in db.schema.fks if fk.id not in kept]
        _check_fk_overlap(db, unkept)
        for fk_id in unkept:
            _replace_fk(db, columns, fk_id, spec.fk_family, rng)

    if e.language is Language.FKJOIN:
        return _build_db(db, columns)

    sel_masks = selection_masks(e, db) if e.language in _SELECT_LANGS else {}
    for rel_name, rel in db.relations.items():
        n = rel.n_rows
        if e.language is Language.SELECTION:
            attrs = list(db.schema.data_attrs(rel_name))
        else:
            attrs = _permutable_attrs(db, rel_name, e)
        if e.language in _SELECT_LANGS and rel_name in sel_masks:
            mask = sel_masks[rel_name]
            groups = [np.flatnonzero(~mask)]
            if e.language is not Language.SELECTION:
                groups.append(np.flatnonzero(mask))
        else:
            groups = [np.arange(n)]
        for rows in groups:
            _permute_columns(columns[rel_name], attrs, rows, spec.perm_family, rng)
    return _build_db(db, columns)


def perturb_projection(db: Database, e: Explanation, spec: PerturbationSpec) -> Database:
    if e.language is not Language.PROJECTION:
        raise DomainError("perturb_projection needs a Projection explanation")
    return perturb(db, e, spec)


def perturb_fkjoin(db: Database, e: Explanation, spec: PerturbationSpec) -> Database:
    if e.language is not Language.FKJOIN:
        raise DomainError("perturb_fkjoin needs an FKJoin explanation")
    return perturb(db, e, spec)


def perturb_selection(db: Database, e: Explanation, spec: PerturbationSpec) -> Database:
    if e.language is not Language.SELECTION:
        raise DomainError("perturb_selection needs a Selection explanation")
    return perturb(db, e, spec)
