"""Experiment orchestration: method dispatch, report emission, recovery
scoring against planted manifests, and the retrain-on-reduced-database
check. Every run writes a manifest that reproduces it exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .determinacy import estimate_dev, sample_instances
from .errors import ConfigError
from .explang import (
    CandidateConfig,
    Explanation,
    Language,
    candidate_predicates,
    cost as explanation_cost,
    explanation_sql,
    projection_of,
    save_explanation,
)
from .model import TrainConfig, TrainResult, load_checkpoint, train
from .perturb import PerturbationSpec, perturb
from .planted import PlantedTruth, load_truth
from .relstore import (
    AttributeRole,
    Database,
    DatabaseSchema,
    Relation,
    RelationSchema,
    Task,
    attribute_role,
    load_csv_database,
)
from .search import (
    MaskLearnResult,
    MaskTrainConfig,
    exhaustive_oracle,
    greedy_expansion,
    greedy_projection,
    learn_column_mask,
    learn_filter_mask,
    learn_fkpk_mask,
    random_subset,
    rank_local_impact,
    rank_pfi,
    threshold_mask,
)
from .treeio import dump_tree, load_tree

METHODS = (
    "column-mask",
    "fkpk-mask",
    "filter-mask",
    "proj-select",
    "local-impact",
    "pfi",
    "greedy",
    "greedy-expansion",
    "random",
    "empty",
    "oracle",
)

@dataclass(frozen=True)
class ExperimentConfig:
    schema_file: str
    data_dir: str
    checkpoint: str
    method: str
    out_dir: str
    mask: MaskTrainConfig = MaskTrainConfig()
    perm_family: str = "ind"
    fk_family: str = "uniform"
    n_samples: int = 5
    n_train_instances: int = 100
    n_eval_instances: int = 100
    k: int | None = None
    language: str | None = None
    seed: int = 0
    truth_file: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method}; choose from {METHODS}")
        if self.method in ("local-impact", "pfi", "greedy", "random", "oracle") and self.k is None:
            raise ConfigError(f"method {self.method} needs an explanation size k")
        if self.language is not None:
            try:
                Language(self.language)
            except ValueError:
                raise ConfigError(f"unknown language {self.language}") from None


def _config_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def mask_config_from_dict(data: dict) -> MaskTrainConfig:
    extra = set(data) - {f.name for f in fields(MaskTrainConfig)}
    if extra:
        raise ConfigError(f"unknown mask-config fields: {sorted(extra)}")
    return MaskTrainConfig(**data)


def train_config_from_dict(data: dict) -> TrainConfig:
    extra = set(data) - {f.name for f in fields(TrainConfig)}
    if extra:
        raise ConfigError(f"unknown train-config fields: {sorted(extra)}")
    return TrainConfig(**data)


def _write_trace_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c, "") for c in columns])


# ---------------------------------------------------------------------------
# Recovery scoring against a planted manifest
# ---------------------------------------------------------------------------

def _explanation_units(e: Explanation) -> dict[str, set]:
    units: dict[str, set] = {"attrs": set(), "fks": set(), "predicates": set()}
    for rel, view in e.projections.items():
        units["attrs"].update((rel, a) for a in view.data_attrs)
    units["fks"].update(e.joins)
    for rel, view in e.selections.items():
        units["predicates"].update((rel, p.attr) for p in view.disjuncts)
    return units


def _unit_name(u) -> str:
    return ".".join(u) if isinstance(u, tuple) else str(u)


def _pr(kept: set, truth: set) -> dict:
    tp = len(kept & truth)
    return {
        "kept": sorted(_unit_name(u) for u in kept),
        "true": sorted(_unit_name(u) for u in truth),
        "precision": (tp / len(kept)) if kept else None,
        "recall": (tp / len(truth)) if truth else None,
    }


def recovery_report(e: Explanation, truth: PlantedTruth) -> dict:
    """Precision/recall of explanation units vs the planted manifest.

    Projections score on (relation, attr), joins on FK id, selections on
    (relation, attr) of their predicates. An empty component has recall 0
    and undefined (null) precision.
    """
    units = _explanation_units(e)
    out = {}
    if e.language in (Language.PROJECTION, Language.PROJ_SELECT, Language.FKJOIN_PROJ, Language.FKJOIN_PROJ_SELECT):
        out["attrs"] = _pr(units["attrs"], set(map(tuple, truth.attrs)))
    if e.language in (Language.FKJOIN, Language.FKJOIN_PROJ, Language.FKJOIN_PROJ_SELECT):
        out["fks"] = _pr(units["fks"], set(truth.fks))
    if e.language in (Language.SELECTION, Language.PROJ_SELECT, Language.FKJOIN_PROJ_SELECT):
        truth_preds = {(p["relation"], p["attr"]) for p in truth.predicates}
        out["predicates"] = _pr(units["predicates"], truth_preds)
    return out


# ---------------------------------------------------------------------------
# Method dispatch
# ---------------------------------------------------------------------------

@dataclass
class MethodOutput:
    explanation: Explanation
    trace_rows: list[dict] = field(default_factory=list)
    trace_columns: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def run_method(cfg: ExperimentConfig, params, schema: DatabaseSchema, db: Database) -> MethodOutput:
    spec = PerturbationSpec(cfg.perm_family, cfg.fk_family, cfg.seed)
    balanced = schema.task is Task.BINARY_CLASSIFICATION
    train_rows = sample_instances(db, schema.task, cfg.n_train_instances, balanced, cfg.seed)
    eval_rows = sample_instances(db, schema.task, cfg.n_eval_instances, balanced, cfg.seed + 1)
    mask_cfg = replace(cfg.mask, seed=cfg.mask.seed if cfg.mask.seed else cfg.seed)
    m = cfg.method

    def mask_output(result: MaskLearnResult, explanation: Explanation) -> MethodOutput:
        return MethodOutput(
            explanation,
            result.trace,
            ["epoch", "train_task", "reg", "total", "val_total"],
            {"mask_values": {str(u): v for u, v in sorted(result.bundle.as_dict().items(), key=lambda kv: str(kv[0]))}},
        )

    if m == "column-mask":
        result = learn_column_mask(params, schema, db, train_rows, mask_cfg)
        return mask_output(result, threshold_mask(result.bundle, mask_cfg.delta, schema))
    if m == "fkpk-mask":
        result = learn_fkpk_mask(params, schema, db, train_rows, mask_cfg)
        return mask_output(result, threshold_mask(result.bundle, mask_cfg.delta, schema))
    if m == "filter-mask":
        preds = candidate_predicates(db, set(schema.all_explainable_attrs()), CandidateConfig())
        result = learn_filter_mask(params, schema, db, preds, train_rows, mask_cfg)
        return mask_output(result, threshold_mask(result.bundle, mask_cfg.delta, schema))
    if m == "proj-select":
        col = learn_column_mask(params, schema, db, train_rows, mask_cfg)
        proj = threshold_mask(col.bundle, mask_cfg.delta, schema)
        kept_attrs = {(rel, a) for rel, v in proj.projections.items() for a in v.data_attrs}
        selections = {}
        trace = list(col.trace)
        if kept_attrs:
            preds = candidate_predicates(db, kept_attrs, CandidateConfig())
            if preds:
                fil = learn_filter_mask(params, schema, db, preds, train_rows, mask_cfg)
                sel = threshold_mask(fil.bundle, mask_cfg.delta, schema)
                selections = sel.selections
                trace += fil.trace
        e = Explanation(Language.PROJ_SELECT, projections=proj.projections, selections=selections)
        return MethodOutput(e, trace, ["epoch", "train_task", "reg", "total", "val_total"])
    if m in ("local-impact", "pfi"):
        rank = (rank_local_impact if m == "local-impact" else rank_pfi)(
            params, schema, db, eval_rows, spec, cfg.n_samples
        )
        top = set(rank.order[: cfg.k])
        rows = [
            {"rank": i, "unit": f"{u[0]}.{u[1]}", "score": rank.scores[u]}
            for i, u in enumerate(rank.order)
        ]
        return MethodOutput(projection_of(schema, top), rows, ["rank", "unit", "score"])
    if m == "greedy":
        result = greedy_projection(params, schema, db, eval_rows, spec, cfg.k, cfg.n_samples)
        rows = [
            {"step": i, "unit": f"{t['unit'][0]}.{t['unit'][1]}", "dev": t["dev"], "sd": t["sd"]}
            for i, t in enumerate(result.trace)
        ]
        return MethodOutput(result.explanation, rows, ["step", "unit", "dev", "sd"])
    if m == "greedy-expansion":
        k = cfg.k if cfg.k is not None else len(schema.fks)
        result = greedy_expansion(params, schema, db, eval_rows, spec, k, cfg.n_samples)
        rows = [
            {"step": i, "unit": t["unit"], "dev": t["dev"], "sd": t["sd"]}
            for i, t in enumerate(result.trace)
        ]
        return MethodOutput(result.explanation, rows, ["step", "unit", "dev", "sd"])
    if m == "random":
        return MethodOutput(random_subset(schema, cfg.k, cfg.seed))
    if m == "empty":
        language = Language(cfg.language) if cfg.language else Language.PROJECTION
        return MethodOutput(Explanation(language))
    if m == "oracle":
        language = Language(cfg.language) if cfg.language else Language.PROJECTION
        preds = None
        if language is Language.SELECTION:
            preds = candidate_predicates(db, set(schema.all_explainable_attrs()), CandidateConfig())
        result = exhaustive_oracle(
            params, schema, db, language, cfg.k, spec, eval_rows, cfg.n_samples, preds
        )
        return MethodOutput(result.explanation, extra={"oracle_dev": result.dev, "n_candidates": result.n_candidates})
    raise ConfigError(f"unknown method {m}")


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute one explanation method end to end and emit the report bundle:
    explanation.yaml/.sql, devreport.yaml/.csv, trace.csv, recovery.yaml
    (when a planted manifest is given), timing.yaml, and manifest.yaml."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    schema, db = load_csv_database(cfg.schema_file, cfg.data_dir)
    params = load_checkpoint(cfg.checkpoint)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    output = run_method(cfg, params, schema, db)
    timings["method"] = time.perf_counter() - t0
    e = output.explanation
    e.validate(schema)

    t0 = time.perf_counter()
    balanced = schema.task is Task.BINARY_CLASSIFICATION
    eval_rows = sample_instances(db, schema.task, cfg.n_eval_instances, balanced, cfg.seed + 1)
    spec = PerturbationSpec(cfg.perm_family, cfg.fk_family, cfg.seed)
    report = estimate_dev(params, schema, db, e, spec, eval_rows, cfg.n_samples)
    timings["evaluate"] = time.perf_counter() - t0

    save_explanation(e, schema, out / "explanation.yaml")
    (out / "explanation.sql").write_text(
        "".join(s + ";\n" for s in explanation_sql(e, schema)), encoding="utf-8"
    )
    report.save(out / "devreport.yaml")
    report.save_csv(out / "devreport.csv")
    if output.trace_rows:
        _write_trace_csv(out / "trace.csv", output.trace_rows, output.trace_columns)
    summary = {
        "method": cfg.method,
        "language": e.language.value,
        "cost": explanation_cost(e),
        "dev_mean": report.overall_mean,
        "dev_sd": report.overall_sd,
    }
    summary.update(output.extra)
    recovery = None
    if cfg.truth_file:
        truth = load_truth(load_tree(cfg.truth_file))
        recovery = recovery_report(e, truth)
        dump_tree(recovery, out / "recovery.yaml")
        summary["recovery"] = recovery
    dump_tree(summary, out / "summary.yaml")
    manifest = {
        "command": "explain",
        "version": __version__,
        "inputs": {
            "schema": str(Path(cfg.schema_file).resolve()),
            "data": str(Path(cfg.data_dir).resolve()),
            "model": str(Path(cfg.checkpoint).resolve()),
            "truth": str(Path(cfg.truth_file).resolve()) if cfg.truth_file else None,
        },
        "options": {
            "method": cfg.method,
            "k": cfg.k,
            "language": cfg.language,
            "perm_family": cfg.perm_family,
            "fk_family": cfg.fk_family,
            "n_samples": cfg.n_samples,
            "n_train_instances": cfg.n_train_instances,
            "n_eval_instances": cfg.n_eval_instances,
            "seed": cfg.seed,
        },
        "mask_config": _config_dict(cfg.mask),
    }
    dump_tree(manifest, out / "manifest.yaml")
    dump_tree({k: round(v, 6) for k, v in timings.items()}, out / "timing.yaml")
    return summary


# ---------------------------------------------------------------------------
# Reduced-database materialization and the retrain check
# ---------------------------------------------------------------------------

def _kept_data_attrs(schema: DatabaseSchema, e: Explanation) -> dict[str, set[str]]:
    if e.language is Language.FKJOIN:
        joined = set()
        for fk_id in e.joins:
            fk = schema.fk(fk_id)
            joined.update((fk.source_relation, fk.target_relation))
        return {
            rel: set(schema.explainable_attrs(rel)) if rel in joined else set()
            for rel in schema.relations
        }
    if e.language is Language.SELECTION:
        return {rel: set(schema.explainable_attrs(rel)) for rel in schema.relations}
    return {
        rel: set(e.projections[rel].data_attrs) if rel in e.projections else set()
        for rel in schema.relations
    }


def reduce_database(
    schema: DatabaseSchema, db: Database, e: Explanation, seed: int = 0
) -> tuple[DatabaseSchema, Database]:
    """Materialize the sub-database an explanation claims is sufficient.

    Non-kept data attributes are dropped; join languages also drop unkept
    FK constraints and their columns; pure Selection keeps all columns but
    replaces the data cells of non-selected tuples with one seeded
    permutation draw.
    """
    e.validate(schema)
    if e.language is Language.SELECTION and not e.is_empty():
        db = perturb(db, e, PerturbationSpec(seed=seed))
    has_join = e.language in (Language.FKJOIN, Language.FKJOIN_PROJ, Language.FKJOIN_PROJ_SELECT)
    kept_fks = set(e.joins) if has_join else {fk.id for fk in schema.fks}
    kept_fk_list = tuple(fk for fk in schema.fks if fk.id in kept_fks)
    kept_fk_cols = {
        (fk.source_relation, a) for fk in kept_fk_list for a in fk.source_attrs
    }
    kept_data = _kept_data_attrs(schema, e)

    new_rel_schemas = {}
    new_relations = {}
    for rel_name, rel_schema in schema.relations.items():
        keep = []
        for a in rel_schema.attr_names:
            role = attribute_role(schema, rel_name, a)
            if role is AttributeRole.KEY:
                keep.append(a)
            elif role is AttributeRole.FOREIGN_KEY_PART:
                if (rel_name, a) in kept_fk_cols:
                    keep.append(a)
            else:
                if a in kept_data[rel_name] or (
                    rel_name == schema.target_relation and a == schema.label_attr
                ):
                    keep.append(a)
        attrs = tuple(ad for ad in rel_schema.attributes if ad.name in keep)
        new_rel_schemas[rel_name] = RelationSchema(rel_name, attrs, rel_schema.key)
        old = db.relation(rel_name)
        new_relations[rel_name] = Relation(
            new_rel_schemas[rel_name], {a: old.columns[a] for a in keep}
        )
    new_schema = DatabaseSchema(
        relations=new_rel_schemas,
        fks=kept_fk_list,
        target_relation=schema.target_relation,
        task=schema.task,
        label_attr=schema.label_attr,
    )
    for rel_name, rel in new_relations.items():
        rel.schema = new_rel_schemas[rel_name]
    return new_schema, Database(new_schema, new_relations)


def size_reduction(schema: DatabaseSchema, db: Database, e: Explanation) -> float:
    """Cell-level reduction: 1 - retained data cells / total data cells,
    counted over explainable (non-label) data attributes."""
    total = 0
    retained = 0
    kept_data = _kept_data_attrs(schema, e)
    from .explang import selection_masks

    sel_masks = selection_masks(e, db) if e.language is Language.SELECTION else {}
    for rel_name in schema.relations:
        n = db.relation(rel_name).n_rows
        attrs = schema.explainable_attrs(rel_name)
        total += n * len(attrs)
        if e.language is Language.SELECTION:
            n_kept_rows = int(sel_masks[rel_name].sum()) if rel_name in sel_masks else 0
            retained += n_kept_rows * len(attrs)
        else:
            retained += n * len(set(attrs) & kept_data[rel_name])
    if total == 0:
        return 0.0
    return 1.0 - retained / total


@dataclass
class RetrainReport:
    metric: str
    full_perf: float
    reduced_perf: float
    diff: float
    size_reduction: float
    full_metrics: dict
    reduced_metrics: dict

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "full_perf": self.full_perf,
            "reduced_perf": self.reduced_perf,
            "diff": self.diff,
            "size_reduction": self.size_reduction,
            "full": self.full_metrics,
            "reduced": self.reduced_metrics,
        }


def retrain_reduced(
    schema: DatabaseSchema,
    db: Database,
    e: Explanation,
    train_cfg: TrainConfig,
    full_result: TrainResult | None = None,
) -> RetrainReport:
    """Train a fresh model on the reduced database and compare test metrics
    with the full model (same split seed, hence the same test instances)."""
    if full_result is None:
        full_result = train(schema, db, train_cfg)
    red_schema, red_db = reduce_database(schema, db, e, seed=train_cfg.seed)
    reduced = train(red_schema, red_db, train_cfg)
    return RetrainReport(
        metric=full_result.metrics["metric"],
        full_perf=full_result.metrics["test"],
        reduced_perf=reduced.metrics["test"],
        diff=reduced.metrics["test"] - full_result.metrics["test"],
        size_reduction=size_reduction(schema, db, e),
        full_metrics=full_result.metrics,
        reduced_metrics=reduced.metrics,
    )
