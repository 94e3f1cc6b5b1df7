"""Explanation discovery.

Mask learning optimizes per-unit logits against the frozen model's task
loss plus an L1 penalty on the sigmoid mask values; thresholding maps
learned masks to explanations. Model-agnostic baselines (Local Impact,
PFI, Greedy, Greedy Expansion, Random Subset) rank or grow explanations
by their estimated deviation from determinacy. A guarded brute-force
oracle exists for tiny search spaces.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .determinacy import estimate_dev
from .errors import DomainError, SpaceTooLarge
from .explang import (
    AtomicPredicate,
    Explanation,
    Language,
    SelectionView,
    projection_of,
)
from .graph import build_graph, draw_replacement_plan
from .masking import (
    COLUMN,
    FILTER,
    FKPK,
    MaskBundle,
    column_mask_bundle,
    filter_mask_bundle,
    fkpk_mask_bundle,
)
from .model import GnnParams, batch_loss, forward, label_values
from .perturb import PerturbationSpec
from .relstore import Database, DatabaseSchema


@dataclass(frozen=True)
class MaskTrainConfig:
    lam: float = 0.05
    lr: float = 0.1
    epochs: int = 150
    patience: int = 20
    delta: float = 0.5
    seed: int = 0
    init: float = 0.9

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise DomainError("threshold must be in (0, 1)")


@dataclass
class MaskLearnResult:
    bundle: MaskBundle
    trace: list[dict]
    best_epoch: int


_REPLACEMENT_LEVEL = {COLUMN: "column", FKPK: None, FILTER: "tuple"}


def _learn(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    bundle: MaskBundle,
    train_instances: np.ndarray,
    cfg: MaskTrainConfig,
) -> MaskLearnResult:
    """Gradient descent on mask logits only; the model stays frozen.

    Replacement tuples are resampled every forward pass. Early stopping
    watches the objective on a held-out fifth of the training instances.
    """
    level = _REPLACEMENT_LEVEL[bundle.kind]
    graph = build_graph(schema, db)
    rng = np.random.default_rng(cfg.seed)
    rows = np.asarray(list(train_instances), dtype=np.int64)
    perm = rng.permutation(len(rows))
    n_val = max(1, len(rows) // 5) if len(rows) > 1 else 0
    val_rows = rows[perm[:n_val]]
    fit_rows = rows[perm[n_val:]]
    labels = torch.from_numpy(label_values(db))
    opt = torch.optim.Adam([bundle.logits], lr=cfg.lr)

    trace: list[dict] = []
    best_val = math.inf
    best_state = bundle.logits.detach().clone()
    best_epoch = 0
    stale = 0
    for epoch in range(cfg.epochs):
        plan = draw_replacement_plan(db, rng, level) if level else None
        preds = forward(params, graph, db, fit_rows, bundle, plan)
        task = batch_loss(params, preds, labels[torch.from_numpy(fit_rows)])
        reg = bundle.values().sum()
        total = task + cfg.lam * reg
        (grad,) = torch.autograd.grad(total, [bundle.logits])
        opt.zero_grad()
        bundle.logits.grad = grad
        opt.step()
        task_v, total_v = float(task.detach()), float(total.detach())
        with torch.no_grad():
            if len(val_rows):
                val_preds = forward(params, graph, db, val_rows, bundle, plan)
                val_task = float(batch_loss(params, val_preds, labels[torch.from_numpy(val_rows)]))
            else:
                val_task = task_v
            val_total = val_task + cfg.lam * float(bundle.values().sum())
        trace.append(
            {
                "epoch": epoch,
                "train_task": task_v,
                "reg": float(reg.detach()),
                "total": total_v,
                "val_total": val_total,
            }
        )
        if val_total < best_val - 1e-12:
            best_val = val_total
            best_state = bundle.logits.detach().clone()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    with torch.no_grad():
        bundle.logits.copy_(best_state)
    return MaskLearnResult(bundle, trace, best_epoch)


def learn_column_mask(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    train_instances: np.ndarray,
    cfg: MaskTrainConfig,
) -> MaskLearnResult:
    bundle = column_mask_bundle(schema, cfg.init)
    return _learn(params, schema, db, bundle, train_instances, cfg)


def learn_fkpk_mask(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    train_instances: np.ndarray,
    cfg: MaskTrainConfig,
) -> MaskLearnResult:
    bundle = fkpk_mask_bundle(schema, cfg.init)
    return _learn(params, schema, db, bundle, train_instances, cfg)


def learn_filter_mask(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    predicates: list[AtomicPredicate],
    train_instances: np.ndarray,
    cfg: MaskTrainConfig,
) -> MaskLearnResult:
    bundle = filter_mask_bundle(predicates, db, cfg.init)
    return _learn(params, schema, db, bundle, train_instances, cfg)


def reachable_relations(schema: DatabaseSchema, joins) -> set[str]:
    """Relations connected to the target through the given FK joins."""
    kept = set(joins)
    reached = {schema.target_relation}
    grew = True
    while grew:
        grew = False
        for fk in schema.fks:
            if fk.id not in kept:
                continue
            ends = {fk.source_relation, fk.target_relation}
            if ends & reached and not ends <= reached:
                reached |= ends
                grew = True
    return reached


def learn_fkjoin_proj(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    train_instances: np.ndarray,
    fk_cfg: MaskTrainConfig,
    col_cfg: MaskTrainConfig,
) -> tuple[Explanation, list[dict]]:
    """Join+projection composite: FK masks are learned and thresholded
    first, then column masks over the relations still reachable through
    the kept joins."""
    fk_result = _learn(params, schema, db, fkpk_mask_bundle(schema, fk_cfg.init), train_instances, fk_cfg)
    joins = threshold_mask(fk_result.bundle, fk_cfg.delta, schema).joins
    reached = reachable_relations(schema, joins)
    units = tuple(u for u in schema.all_explainable_attrs() if u[0] in reached)
    trace = list(fk_result.trace)
    projections = {}
    if units:
        col_bundle = column_mask_bundle(schema, col_cfg.init, units)
        col_result = _learn(params, schema, db, col_bundle, train_instances, col_cfg)
        trace += col_result.trace
        vals = col_result.bundle.as_dict()
        kept = {u for u, m in vals.items() if m >= col_cfg.delta}
        projections = projection_of(schema, kept).projections
    return Explanation(Language.FKJOIN_PROJ, projections=projections, joins=joins), trace


def threshold_mask(bundle: MaskBundle, delta: float, schema: DatabaseSchema) -> Explanation:
    """Units with mask value >= delta become views of the matching language."""
    if not 0.0 < delta < 1.0:
        raise DomainError("threshold must be in (0, 1)")
    vals = bundle.as_dict()
    if bundle.kind == COLUMN:
        kept = {unit for unit, m in vals.items() if m >= delta}
        return projection_of(schema, kept)
    if bundle.kind == FKPK:
        kept_ids = {unit for unit, m in vals.items() if m >= delta}
        joins = tuple(fk.id for fk in schema.fks if fk.id in kept_ids)
        return Explanation(Language.FKJOIN, joins=joins)
    kept_preds = [p for p, unit in zip(bundle.predicates, bundle.units) if vals[unit] >= delta]
    selections = {}
    for rel in schema.relations:
        preds = tuple(p for p in kept_preds if p.relation == rel)
        if preds:
            selections[rel] = SelectionView(rel, preds)
    return Explanation(Language.SELECTION, selections=selections)


# ---------------------------------------------------------------------------
# Model-agnostic baselines
# ---------------------------------------------------------------------------

@dataclass
class RankResult:
    order: list[tuple[str, str]]
    scores: dict[tuple[str, str], float]


def rank_local_impact(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    eval_instances: np.ndarray,
    spec: PerturbationSpec,
    n_samples: int = 5,
) -> RankResult:
    """Attributes scored by the deviation of the singleton explanation;
    lower deviation ranks first. Ties break by schema order."""
    units = schema.all_explainable_attrs()
    scores = {}
    for unit in units:
        e = projection_of(schema, {unit})
        scores[unit] = estimate_dev(
            params, schema, db, e, spec, eval_instances, n_samples
        ).overall_mean
    order = sorted(units, key=lambda u: (scores[u], units.index(u)))
    return RankResult(order, scores)


def rank_pfi(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    eval_instances: np.ndarray,
    spec: PerturbationSpec,
    n_samples: int = 5,
) -> RankResult:
    """Attributes scored by the deviation when only that attribute is
    removed; higher deviation implies higher importance."""
    units = schema.all_explainable_attrs()
    scores = {}
    for unit in units:
        rest = set(units) - {unit}
        e = projection_of(schema, rest)
        scores[unit] = estimate_dev(
            params, schema, db, e, spec, eval_instances, n_samples
        ).overall_mean
    order = sorted(units, key=lambda u: (-scores[u], units.index(u)))
    return RankResult(order, scores)


@dataclass
class GreedyResult:
    explanation: Explanation
    trace: list[dict]  # per step: unit, dev, sd
    noise_flags: list[int]  # steps where dev rose by more than the prior sd


def greedy_projection(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    eval_instances: np.ndarray,
    spec: PerturbationSpec,
    k_max: int,
    n_samples: int = 5,
) -> GreedyResult:
    """Forward selection of data attributes by largest deviation reduction."""
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    units = schema.all_explainable_attrs()
    selected: list[tuple[str, str]] = []
    trace = []
    flags = []
    for _ in range(min(k_max, len(units))):
        best_unit = None
        best = (math.inf, math.inf)
        for unit in units:
            if unit in selected:
                continue
            e = projection_of(schema, set(selected) | {unit})
            report = estimate_dev(params, schema, db, e, spec, eval_instances, n_samples)
            if report.overall_mean < best[0]:
                best = (report.overall_mean, report.overall_sd)
                best_unit = unit
        selected.append(best_unit)
        if trace and best[0] > trace[-1]["dev"] + trace[-1]["sd"]:
            flags.append(len(trace))
        trace.append({"unit": best_unit, "dev": best[0], "sd": best[1]})
    return GreedyResult(projection_of(schema, set(selected)), trace, flags)


def greedy_expansion(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    eval_instances: np.ndarray,
    spec: PerturbationSpec,
    k_max: int,
    n_samples: int = 5,
) -> GreedyResult:
    """Greedy FK-join selection restricted to joins incident to the relation
    set already connected to the prediction entity."""
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    connected = {schema.target_relation}
    selected: list[str] = []
    trace = []
    flags = []
    for _ in range(min(k_max, len(schema.fks))):
        candidates = [
            fk.id
            for fk in schema.fks
            if fk.id not in selected
            and (fk.source_relation in connected or fk.target_relation in connected)
        ]
        if not candidates:
            break
        best_id = None
        best = (math.inf, math.inf)
        for fk_id in candidates:
            joins = tuple(fk.id for fk in schema.fks if fk.id in set(selected) | {fk_id})
            e = Explanation(Language.FKJOIN, joins=joins)
            report = estimate_dev(params, schema, db, e, spec, eval_instances, n_samples)
            if report.overall_mean < best[0]:
                best = (report.overall_mean, report.overall_sd)
                best_id = fk_id
        selected.append(best_id)
        fk = schema.fk(best_id)
        connected.update((fk.source_relation, fk.target_relation))
        if trace and best[0] > trace[-1]["dev"] + trace[-1]["sd"]:
            flags.append(len(trace))
        trace.append({"unit": best_id, "dev": best[0], "sd": best[1]})
    joins = tuple(fk.id for fk in schema.fks if fk.id in selected)
    return GreedyResult(Explanation(Language.FKJOIN, joins=joins), trace, flags)


def random_subset(schema: DatabaseSchema, k: int, seed: int) -> Explanation:
    """Uniform k-subset of the data attributes as a projection explanation."""
    units = schema.all_explainable_attrs()
    if k > len(units):
        raise DomainError(f"k={k} exceeds the {len(units)} data attributes")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(units), size=k, replace=False)
    return projection_of(schema, {units[int(i)] for i in picked})


# ---------------------------------------------------------------------------
# Exhaustive oracle (test-scale only)
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    explanation: Explanation
    dev: float
    n_candidates: int


def _count_candidates(n_units: int, k: int) -> int:
    return sum(math.comb(n_units, i) for i in range(0, min(k, n_units) + 1))


def exhaustive_oracle(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    language: Language,
    k: int,
    spec: PerturbationSpec,
    eval_instances: np.ndarray,
    n_samples: int = 5,
    predicates: list[AtomicPredicate] | None = None,
) -> OracleResult:
    """Enumerate every explanation of cost <= k in the language and return
    the deviation argmin under fixed seeds. Ties go to the explanation
    first in (size, lexicographic) enumeration order."""
    if language is Language.PROJECTION:
        units: list = list(schema.all_explainable_attrs())
    elif language is Language.FKJOIN:
        units = [fk.id for fk in schema.fks]
    elif language is Language.SELECTION:
        if predicates is None:
            raise DomainError("selection oracle needs candidate predicates")
        units = list(predicates)
    else:
        raise DomainError(f"oracle does not support language {language.value}")
    n_cand = _count_candidates(len(units), k)
    if n_cand > 2**20:
        raise SpaceTooLarge(f"{n_cand} candidates exceed the 2^20 enumeration guard")

    def build(subset) -> Explanation:
        if language is Language.PROJECTION:
            return projection_of(schema, set(subset))
        if language is Language.FKJOIN:
            chosen = set(subset)
            return Explanation(
                Language.FKJOIN, joins=tuple(fk.id for fk in schema.fks if fk.id in chosen)
            )
        selections = {}
        for rel in schema.relations:
            preds = tuple(p for p in subset if p.relation == rel)
            if preds:
                selections[rel] = SelectionView(rel, preds)
        return Explanation(Language.SELECTION, selections=selections)

    best = None
    best_dev = math.inf
    for size in range(0, min(k, len(units)) + 1):
        for subset in itertools.combinations(units, size):
            e = build(subset)
            report = estimate_dev(params, schema, db, e, spec, eval_instances, n_samples)
            if report.overall_mean < best_dev - 1e-15:
                best_dev = report.overall_mean
                best = e
    return OracleResult(best, best_dev, n_cand)
