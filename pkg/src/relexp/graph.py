"""Database-to-hetero-graph conversion and attribute-wise feature encoding.

Each tuple becomes a node typed by its relation name; each FK reference
becomes a directed typed edge from the referencing tuple to the
referenced tuple. Feature encoding excludes key and FK attributes (and
the target label, which is never a model input); per-attribute encodings
are concatenated and passed through a per-relation linear map.

All tensors are float64 on CPU for reproducibility and finite-difference
testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError, NotFound
from .relstore import AttributeKind, Column, Database, DatabaseSchema


@dataclass
class EdgeSet:
    fk_id: str
    src: np.ndarray  # row indices in the FK's source relation
    dst: np.ndarray  # row indices in the FK's target relation


@dataclass
class HeteroGraph:
    schema: DatabaseSchema
    node_counts: dict[str, int]
    node_offset: dict[str, int]
    edges: dict[str, EdgeSet]

    @property
    def n_nodes(self) -> int:
        return sum(self.node_counts.values())

    def node_id(self, relation: str, row: int) -> int:
        return self.node_offset[relation] + row

    def neighbors(self, relation: str, row: int, fk_id: str, orientation: str) -> list[tuple[str, int]]:
        """Typed neighborhood of one node; orientation 'out' follows the FK
        reference, 'in' runs against it."""
        fk = self.schema.fk(fk_id)
        es = self.edges[fk_id]
        if orientation == "out":
            if relation != fk.source_relation:
                return []
            rows = es.dst[es.src == row]
            return [(fk.target_relation, int(r)) for r in rows]
        if orientation == "in":
            if relation != fk.target_relation:
                return []
            rows = es.src[es.dst == row]
            return [(fk.source_relation, int(r)) for r in rows]
        raise DomainError(f"orientation must be 'in' or 'out', got {orientation}")


def build_graph(schema: DatabaseSchema, db: Database) -> HeteroGraph:
    """Deterministic r2n conversion: node order follows schema relation order
    and row order; one edge per (source tuple, FK) pair."""
    counts = {}
    offsets = {}
    total = 0
    for name in schema.relations:
        counts[name] = db.relation(name).n_rows
        offsets[name] = total
        total += counts[name]
    edges = {}
    for fk in schema.fks:
        src = db.relation(fk.source_relation)
        tgt_index = db.relation(fk.target_relation).key_index()
        fk_cols = [src.columns[a] for a in fk.source_attrs]
        src_rows = []
        dst_rows = []
        for i in range(src.n_rows):
            ref = tuple(c.decode(i) for c in fk_cols)
            j = tgt_index.get(ref)
            if j is None:
                continue  # validation happens upstream
            src_rows.append(i)
            dst_rows.append(j)
        edges[fk.id] = EdgeSet(
            fk.id, np.asarray(src_rows, dtype=np.int64), np.asarray(dst_rows, dtype=np.int64)
        )
    return HeteroGraph(schema, counts, offsets, edges)


def dump_edges(graph: HeteroGraph) -> str:
    """Debug text format: one edge per line (src node, fk id, dst node)."""
    lines = []
    for fk in graph.schema.fks:
        es = graph.edges[fk.id]
        for s, d in zip(es.src, es.dst):
            lines.append(f"{fk.source_relation}:{s}\t{fk.id}\t{fk.target_relation}:{d}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Attribute encoders
# ---------------------------------------------------------------------------

@dataclass
class CategoricalEncoder:
    vocab: dict[str, int]  # symbol -> embedding row; row 0 is the missing row
    weight: torch.Tensor   # (len(vocab) + 1, d_attr)

    def rows_for(self, col: Column) -> np.ndarray:
        trans = np.zeros(len(col.symbols or ()) + 1, dtype=np.int64)
        for code, sym in enumerate(col.symbols or ()):
            trans[code] = self.vocab.get(sym, 0)  # unseen symbols map to missing
        codes = col.values
        safe = np.where(codes < 0, len(trans) - 1, codes)
        rows = trans[safe]
        rows[codes < 0] = 0
        return rows


@dataclass
class NumericEncoder:
    mean: float
    std: float  # stored safe (>= tiny); constant columns use 1.0
    scale: torch.Tensor    # (d_attr,)
    bias: torch.Tensor     # (d_attr,)
    missing: torch.Tensor  # (d_attr,)


@dataclass
class RelationEncoder:
    weight: torch.Tensor  # (d_rel, sum of attr dims)
    bias: torch.Tensor    # (d_rel,)


@dataclass
class EncoderParams:
    attr_dim: int
    rel_dim: int
    # per relation, data attributes in schema order (target label excluded)
    attr_order: dict[str, tuple[str, ...]]
    attr_encoders: dict[tuple[str, str], CategoricalEncoder | NumericEncoder]
    rel_encoders: dict[str, RelationEncoder] = field(default_factory=dict)

    def named_tensors(self):
        for (rel, attr), enc in self.attr_encoders.items():
            if isinstance(enc, CategoricalEncoder):
                yield f"enc.{rel}.{attr}.weight", enc.weight
            else:
                yield f"enc.{rel}.{attr}.scale", enc.scale
                yield f"enc.{rel}.{attr}.bias", enc.bias
                yield f"enc.{rel}.{attr}.missing", enc.missing
        for rel, enc in self.rel_encoders.items():
            yield f"enc.{rel}.linear.weight", enc.weight
            yield f"enc.{rel}.linear.bias", enc.bias


def init_encoders(
    schema: DatabaseSchema,
    db: Database,
    attr_dim: int,
    rel_dim: int,
    generator: torch.Generator,
) -> EncoderParams:
    """Fresh encoder tables: embeddings for categorical attrs, affine maps on
    z-scored values for numeric attrs (statistics from the given database),
    one linear map per relation."""
    attr_order = {rel: schema.explainable_attrs(rel) for rel in schema.relations}
    attr_encoders: dict[tuple[str, str], CategoricalEncoder | NumericEncoder] = {}
    rel_encoders = {}
    for rel_name, attrs in attr_order.items():
        for attr in attrs:
            col = db.relation(rel_name).columns[attr]
            if col.kind is AttributeKind.CATEGORICAL:
                vocab = {sym: i + 1 for i, sym in enumerate(col.symbols or ())}
                weight = torch.randn(len(vocab) + 1, attr_dim, generator=generator, dtype=torch.float64) * 0.5
                weight.requires_grad_(True)
                attr_encoders[(rel_name, attr)] = CategoricalEncoder(vocab, weight)
            else:
                vals = col.values[~np.isnan(col.values)]
                mean = float(vals.mean()) if vals.size else 0.0
                std = float(vals.std()) if vals.size else 0.0
                if std < 1e-12:
                    std = 1.0
                scale = torch.randn(attr_dim, generator=generator, dtype=torch.float64) * 0.5
                bias = torch.zeros(attr_dim, dtype=torch.float64)
                missing = torch.randn(attr_dim, generator=generator, dtype=torch.float64) * 0.5
                for t in (scale, bias, missing):
                    t.requires_grad_(True)
                attr_encoders[(rel_name, attr)] = NumericEncoder(mean, std, scale, bias, missing)
        fan_in = attr_dim * len(attrs)
        w = torch.randn(rel_dim, fan_in, generator=generator, dtype=torch.float64)
        if fan_in:
            w *= (2.0 / fan_in) ** 0.5
        b = torch.zeros(rel_dim, dtype=torch.float64)
        w.requires_grad_(True)
        b.requires_grad_(True)
        rel_encoders[rel_name] = RelationEncoder(w, b)
    return EncoderParams(attr_dim, rel_dim, attr_order, attr_encoders, rel_encoders)


# ---------------------------------------------------------------------------
# Replacement sampling (for masked encodings)
# ---------------------------------------------------------------------------

@dataclass
class ReplacementPlan:
    """Frozen replacement draws for one forward pass: per relation a
    (n_rows, n_data_attrs) matrix of replacement tuple indices for
    attribute-level masking, and an (n_rows,) vector for tuple-level
    masking. Treated as constants by backpropagation."""

    column: dict[str, np.ndarray] = field(default_factory=dict)
    tuple_: dict[str, np.ndarray] = field(default_factory=dict)


def draw_replacement_plan(
    db: Database, rng: np.random.Generator, level: str = "column"
) -> ReplacementPlan:
    plan = ReplacementPlan()
    for rel_name in db.schema.relations:
        n = db.relation(rel_name).n_rows
        k = len(db.schema.explainable_attrs(rel_name))
        if n == 0:
            continue
        if level == "column":
            plan.column[rel_name] = rng.integers(0, n, size=(n, k))
        elif level == "tuple":
            plan.tuple_[rel_name] = rng.integers(0, n, size=n)
        else:
            raise DomainError(f"unknown replacement level {level}")
    return plan


def _encode_attr(
    enc: CategoricalEncoder | NumericEncoder, col: Column, order: np.ndarray | None
) -> torch.Tensor:
    """Encode one column, optionally reading rows through an index array."""
    if isinstance(enc, CategoricalEncoder):
        rows = enc.rows_for(col)
        if order is not None:
            rows = rows[order]
        return enc.weight[torch.from_numpy(np.ascontiguousarray(rows))]
    values = col.values if order is None else col.values[order]
    miss = np.isnan(values)
    z = np.where(miss, 0.0, (values - enc.mean) / enc.std)
    z_t = torch.from_numpy(np.ascontiguousarray(z))
    out = z_t.unsqueeze(1) * enc.scale.unsqueeze(0) + enc.bias.unsqueeze(0)
    if miss.any():
        miss_t = torch.from_numpy(miss).unsqueeze(1)
        out = torch.where(miss_t, enc.missing.unsqueeze(0), out)
    return out


def encode_relation(
    params: EncoderParams,
    db: Database,
    rel_name: str,
    column_masks: dict[tuple[str, str], torch.Tensor] | None = None,
    plan: ReplacementPlan | None = None,
) -> torch.Tensor:
    """Feature matrix (n_rows, rel_dim) for one relation.

    With column masks, each attribute slot is the blend
    m * enc(t[A]) + (1 - m) * enc(t'[A]) with t' taken from the plan.
    """
    rel = db.relation(rel_name)
    n = rel.n_rows
    attrs = params.attr_order[rel_name]
    slots = []
    for j, attr in enumerate(attrs):
        enc = params.attr_encoders[(rel_name, attr)]
        col = rel.columns[attr]
        x = _encode_attr(enc, col, None)
        m = None if column_masks is None else column_masks.get((rel_name, attr))
        if m is not None:
            if plan is None or rel_name not in plan.column:
                raise DomainError("column masking requires a replacement plan")
            u = _encode_attr(enc, col, plan.column[rel_name][:, j])
            x = m * x + (1.0 - m) * u
        slots.append(x)
    renc = params.rel_encoders[rel_name]
    if slots:
        concat = torch.cat(slots, dim=1)
        return concat @ renc.weight.T + renc.bias.unsqueeze(0)
    return renc.bias.unsqueeze(0).expand(n, params.rel_dim) + torch.zeros(
        n, params.rel_dim, dtype=torch.float64
    )


def encode_node(
    params: EncoderParams,
    db: Database,
    node: tuple[str, int],
    attr_masks: dict[str, float] | None = None,
    replacement=None,
) -> torch.Tensor:
    """Mask-aware encoding of a single node.

    *replacement* is a sampler ``(relation, attr) -> tuple index`` consulted
    only for attributes with mask < 1; absent masks default to 1.
    """
    rel_name, row = node
    rel = db.relation(rel_name)
    attrs = params.attr_order[rel_name]
    attr_masks = attr_masks or {}
    for attr, m in attr_masks.items():
        if attr not in attrs:
            raise NotFound(f"{rel_name}.{attr} is not a maskable data attribute")
        if not 0.0 <= float(m) <= 1.0:
            raise DomainError(f"mask for {rel_name}.{attr} outside [0, 1]: {m}")
    slots = []
    idx = np.asarray([row])
    for attr in attrs:
        enc = params.attr_encoders[(rel_name, attr)]
        col = rel.columns[attr]
        x = _encode_attr(enc, col, idx)[0]
        m = float(attr_masks.get(attr, 1.0))
        if m < 1.0:
            if replacement is None:
                raise DomainError("masked encoding requires a replacement sampler")
            other = int(replacement(rel_name, attr))
            u = _encode_attr(enc, col, np.asarray([other]))[0]
            x = m * x + (1.0 - m) * u
        slots.append(x)
    renc = params.rel_encoders[rel_name]
    if slots:
        return torch.cat(slots) @ renc.weight.T + renc.bias
    return renc.bias.clone()


def uniform_replacement(db: Database, rng: np.random.Generator):
    """Sampler drawing a uniformly random tuple of the attribute's relation."""

    def sample(rel_name: str, attr: str) -> int:
        n = db.relation(rel_name).n_rows
        if n == 0:
            raise DomainError(f"cannot sample a replacement tuple from empty {rel_name}")
        return int(rng.integers(0, n))

    return sample
