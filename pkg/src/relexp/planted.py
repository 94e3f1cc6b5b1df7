"""Synthetic relational databases with a planted, known signal.

The label of each target tuple is a fixed documented function of the
signal elements: follow the signal FK path to a row of the signal
relation, z-score its signal attribute (or test predicate membership),
add Gaussian noise scaled by the noise level, and threshold at zero for
classification or emit the score for regression. The generated manifest
names the signal attributes, FK path, and predicates so recovery can be
scored exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .relstore import (
    AttributeDef,
    AttributeKind,
    Column,
    Database,
    DatabaseSchema,
    ForeignKey,
    Relation,
    RelationSchema,
    Task,
    emit_csv_database,
    emit_schema_descriptor,
)
from .treeio import dump_tree


@dataclass(frozen=True)
class PlantedConfig:
    n_relations: int = 5
    rows_target: int = 1000
    rows_satellite: int = 300
    topology: str = "star"  # star | chain | random-dag
    n_numeric: int = 2      # numeric data attrs per relation
    n_categorical: int = 2  # categorical data attrs per relation
    n_categories: int = 6
    signal_relation: str | None = None  # default: the first satellite
    signal_attr: str | None = None      # default: first numeric attr (x0)
    signal_kind: str = "attr"           # "attr" | "predicate"
    noise: float = 0.0
    task: str = "classification"
    seed: int = 0

    def __post_init__(self):
        if self.topology not in ("star", "chain", "random-dag"):
            raise ConfigError(f"unknown topology {self.topology}")
        if self.signal_kind not in ("attr", "predicate"):
            raise ConfigError(f"unknown signal kind {self.signal_kind}")
        if self.n_relations < 1:
            raise ConfigError("need at least one relation")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task}")

    def to_dict(self) -> dict:
        return {
            "n_relations": self.n_relations,
            "rows_target": self.rows_target,
            "rows_satellite": self.rows_satellite,
            "topology": self.topology,
            "n_numeric": self.n_numeric,
            "n_categorical": self.n_categorical,
            "n_categories": self.n_categories,
            "signal_relation": self.signal_relation,
            "signal_attr": self.signal_attr,
            "signal_kind": self.signal_kind,
            "noise": self.noise,
            "task": self.task,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlantedConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        extra = set(data) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown planted-config fields: {sorted(extra)}")
        return cls(**known)


@dataclass
class PlantedTruth:
    attrs: list[tuple[str, str]]
    fks: list[str]
    predicates: list[dict]
    label_rule: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "signal": {
                "attrs": [{"relation": r, "attr": a} for r, a in self.attrs],
                "fks": list(self.fks),
                "predicates": self.predicates,
                "label_rule": self.label_rule,
            },
            "config": self.config,
        }


def _topology_edges(cfg: PlantedConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(source index, target index) pairs; the source relation holds the FK column."""
    if cfg.n_relations == 1:
        return []
    if cfg.topology == "star":
        return [(0, i) for i in range(1, cfg.n_relations)]
    if cfg.topology == "chain":
        return [(i - 1, i) for i in range(1, cfg.n_relations)]
    return [(int(rng.integers(0, i)), i) for i in range(1, cfg.n_relations)]


def make_planted(cfg: PlantedConfig) -> tuple[DatabaseSchema, Database, PlantedTruth]:
    rng = np.random.default_rng(cfg.seed)
    edges = _topology_edges(cfg, rng)
    rel_names = [f"r{i}" for i in range(cfg.n_relations)]
    fk_cols: dict[int, list[tuple[str, int]]] = {i: [] for i in range(cfg.n_relations)}
    fks = []
    for src, dst in edges:
        fk_id = f"fk_{rel_names[src]}_{rel_names[dst]}"
        col = f"{rel_names[dst]}_id"
        fk_cols[src].append((col, dst))
        fks.append(ForeignKey(fk_id, rel_names[src], (col,), rel_names[dst]))

    data_attr_names = [f"x{i}" for i in range(cfg.n_numeric)] + [
        f"c{i}" for i in range(cfg.n_categorical)
    ]
    rel_schemas = {}
    for i, name in enumerate(rel_names):
        attrs = [AttributeDef("id", AttributeKind.NUMERIC)]
        attrs += [AttributeDef(col, AttributeKind.NUMERIC) for col, _ in fk_cols[i]]
        attrs += [
            AttributeDef(a, AttributeKind.NUMERIC if a.startswith("x") else AttributeKind.CATEGORICAL)
            for a in data_attr_names
        ]
        if i == 0:
            attrs.append(AttributeDef("label", AttributeKind.NUMERIC))
        rel_schemas[name] = RelationSchema(name, tuple(attrs), ("id",))
    schema = DatabaseSchema(
        relations=rel_schemas,
        fks=tuple(fks),
        target_relation="r0",
        task=Task(cfg.task),
        label_attr="label",
    )

    rows = {0: cfg.rows_target}
    for i in range(1, cfg.n_relations):
        rows[i] = cfg.rows_satellite
    columns: dict[str, dict[str, Column]] = {}
    fk_draws: dict[tuple[int, int], np.ndarray] = {}
    for i, name in enumerate(rel_names):
        n = rows[i]
        cols = {"id": Column(AttributeKind.NUMERIC, np.arange(n, dtype=np.float64))}
        for col, dst in fk_cols[i]:
            draws = rng.integers(0, rows[dst], size=n)
            fk_draws[(i, dst)] = draws
            cols[col] = Column(AttributeKind.NUMERIC, draws.astype(np.float64))
        for a in data_attr_names:
            if a.startswith("x"):
                cols[a] = Column(AttributeKind.NUMERIC, rng.standard_normal(n))
            else:
                codes = rng.integers(0, cfg.n_categories, size=n)
                cols[a] = Column(
                    AttributeKind.CATEGORICAL,
                    codes.astype(np.int64),
                    tuple(f"v{j}" for j in range(cfg.n_categories)),
                )
        columns[name] = cols

    # resolve the signal element and the FK path from the target to it
    signal_rel = cfg.signal_relation or (rel_names[1] if cfg.n_relations > 1 else rel_names[0])
    if signal_rel not in rel_names:
        raise ConfigError(f"signal relation {signal_rel} not generated")
    default_attr = "x0" if cfg.signal_kind == "attr" else "c0"
    signal_attr = cfg.signal_attr or default_attr
    if signal_attr not in data_attr_names:
        raise ConfigError(f"signal attribute {signal_attr} not generated")
    signal_idx = rel_names.index(signal_rel)
    path: list[str] = []
    hop = {dst: (src, f"fk_{rel_names[src]}_{rel_names[dst]}") for src, dst in edges}
    node = signal_idx
    while node != 0:
        if node not in hop:
            raise ConfigError(f"no FK path from target to {signal_rel}")
        src, fk_id = hop[node]
        path.append(fk_id)
        node = src
    path.reverse()

    # per target row, the signal-relation row reached through the path
    reached = np.arange(rows[0])
    node = 0
    for fk_id in path:
        dst = rel_names.index(schema.fk(fk_id).target_relation)
        reached = fk_draws[(node, dst)][reached]
        node = dst

    sig_col = columns[signal_rel][signal_attr]
    predicates: list[dict] = []
    if cfg.signal_kind == "attr":
        v = sig_col.values
        z = (v - v.mean()) / (v.std() if v.std() > 0 else 1.0)
        score = z[reached]
        rule = f"score = z({signal_rel}.{signal_attr} of referenced row)"
    else:
        n_in = max(1, cfg.n_categories // 2)
        in_set = set(range(n_in))
        member = np.isin(sig_col.values, list(in_set)).astype(np.float64)
        score = 2.0 * member[reached] - 1.0
        values = [f"v{j}" for j in sorted(in_set)]
        predicates = [{"relation": signal_rel, "attr": signal_attr, "values": values}]
        rule = f"score = +1 if {signal_rel}.{signal_attr} in {values} else -1"
    score = score + cfg.noise * rng.standard_normal(rows[0])
    if cfg.task == "classification":
        label = (score > 0).astype(np.float64)
        rule += "; label = 1[score > 0]"
    else:
        label = score
        rule += "; label = score"
    columns["r0"]["label"] = Column(AttributeKind.NUMERIC, label)

    relations = {name: Relation(rel_schemas[name], columns[name]) for name in rel_names}
    db = Database(schema, relations)
    truth = PlantedTruth(
        attrs=[(signal_rel, signal_attr)],
        fks=path,
        predicates=predicates,
        label_rule=rule,
        config=cfg.to_dict(),
    )
    return schema, db, truth


def generate_planted(cfg: PlantedConfig, out_dir: str | Path) -> tuple[DatabaseSchema, Database, PlantedTruth]:
    """Materialize a planted database: schema.yaml, data/*.csv, truth.yaml."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema, db, truth = make_planted(cfg)
    emit_schema_descriptor(schema, out_dir / "schema.yaml")
    emit_csv_database(db, out_dir / "data")
    dump_tree(truth.to_dict(), out_dir / "truth.yaml")
    return schema, db, truth


def load_truth(data: dict) -> PlantedTruth:
    sig = data["signal"]
    return PlantedTruth(
        attrs=[(d["relation"], d["attr"]) for d in sig["attrs"]],
        fks=list(sig["fks"]),
        predicates=list(sig.get("predicates", [])),
        label_rule=sig.get("label_rule", ""),
        config=data.get("config", {}),
    )
