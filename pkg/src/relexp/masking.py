"""Learnable mask bundles.

A mask component is a scalar in (0, 1) produced by a sigmoid over a
learnable logit. Blending follows mu(x, m) = m * x + (1 - m) * u for a
replacement vector u. Tuple-level masks for selection predicates combine
per-predicate components with the Lukasiewicz t-conorm
min(1, sum of satisfied components).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError
from .explang import AtomicPredicate
from .relstore import Database, DatabaseSchema

COLUMN = "column"
FKPK = "fkpk"
FILTER = "filter"


def mask_blend(x: torch.Tensor, m, u) -> torch.Tensor:
    """mu(x, m) = m * x + (1 - m) * u."""
    return m * x + (1.0 - m) * u


def lukasiewicz_disjunction(sat: torch.Tensor, components: torch.Tensor) -> torch.Tensor:
    """Tuple-level masks min(1, sum of components of satisfied predicates).

    *sat* is an (n_tuples, n_predicates) 0/1 matrix.
    """
    return torch.clamp(sat @ components, max=1.0)


@dataclass
class MaskBundle:
    """One mask component per unit. Units are (relation, attr) pairs for
    column masks, FK ids for FK/PK masks, and predicate ids for filter
    masks; filter bundles also carry their predicates and per-relation
    satisfaction matrices."""

    kind: str
    units: tuple
    logits: torch.Tensor
    predicates: tuple[AtomicPredicate, ...] | None = None
    sat: dict[str, np.ndarray] = field(default_factory=dict)

    def values(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def as_dict(self) -> dict:
        vals = self.values().detach()
        return {unit: float(vals[i]) for i, unit in enumerate(self.units)}

    def value_of(self, unit) -> float:
        return self.as_dict()[unit]

    def attach_satisfaction(self, db: Database) -> None:
        """Precompute, per relation, which tuples satisfy which predicate."""
        if self.kind != FILTER:
            raise DomainError("satisfaction matrices only apply to filter masks")
        self.sat = {}
        for rel_name in db.schema.relations:
            n = db.relation(rel_name).n_rows
            mat = np.zeros((n, len(self.units)), dtype=np.float64)
            for j, pred in enumerate(self.predicates):
                if pred.relation == rel_name:
                    mat[:, j] = pred.satisfied(db)
            self.sat[rel_name] = mat

    def tuple_mask(self, rel_name: str) -> torch.Tensor:
        if rel_name not in self.sat:
            raise DomainError("call attach_satisfaction(db) before tuple_mask")
        sat_t = torch.from_numpy(self.sat[rel_name])
        return lukasiewicz_disjunction(sat_t, self.values())


def _init_logits(n: int, start: float) -> torch.Tensor:
    logit = math.log(start / (1.0 - start))
    t = torch.full((n,), logit, dtype=torch.float64)
    t.requires_grad_(True)
    return t


def column_mask_bundle(
    schema: DatabaseSchema, start: float = 0.9, units: tuple | None = None
) -> MaskBundle:
    """One component per data attribute; *units* restricts the set (used by
    the join+projection composite, which masks only reachable relations)."""
    if units is None:
        units = schema.all_explainable_attrs()
    return MaskBundle(COLUMN, tuple(units), _init_logits(len(units), start))


def fkpk_mask_bundle(schema: DatabaseSchema, start: float = 0.9) -> MaskBundle:
    units = tuple(fk.id for fk in schema.fks)
    return MaskBundle(FKPK, units, _init_logits(len(units), start))


def filter_mask_bundle(
    predicates: list[AtomicPredicate], db: Database, start: float = 0.9
) -> MaskBundle:
    units = tuple(p.pid for p in predicates)
    bundle = MaskBundle(FILTER, units, _init_logits(len(units), start), tuple(predicates))
    bundle.attach_satisfaction(db)
    return bundle
