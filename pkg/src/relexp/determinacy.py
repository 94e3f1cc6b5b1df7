"""Distance metrics and Monte-Carlo estimation of deviation from determinacy.

The estimator never rejects samples: perturbations agree with the
explanation views by construction, so the conditional expectation reduces
to plain averaging over view-respecting draws.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, InsufficientClassMembers
from .explang import Explanation, cost as explanation_cost
from .graph import build_graph
from .model import GnnParams, label_values, predict_rows
from .perturb import PerturbationSpec, perturb
from .relstore import Database, DatabaseSchema, Task
from .treeio import dump_tree


def dist(a: float, b: float, task: Task, hard_label: bool = False) -> float:
    """Absolute difference on probabilities for classification, normalized
    absolute difference for regression (0 when both are 0)."""
    if task is Task.BINARY_CLASSIFICATION:
        if hard_label:
            return float((a >= 0.5) != (b >= 0.5))
        return abs(a - b)
    denom = abs(a) + abs(b)
    if denom == 0.0:
        return 0.0
    return abs(a - b) / denom


@dataclass
class DevReport:
    overall_mean: float
    overall_sd: float
    n_samples: int
    seed: int
    spec: dict
    language: str
    cost: int
    instance_keys: list
    per_instance_mean: np.ndarray
    per_instance_sd: np.ndarray
    per_sample_mean: np.ndarray

    def to_dict(self) -> dict:
        return {
            "dev_mean": float(self.overall_mean),
            "dev_sd": float(self.overall_sd),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "spec": self.spec,
            "language": self.language,
            "cost": self.cost,
            "per_sample_mean": [float(x) for x in self.per_sample_mean],
            "instances": [
                {
                    "key": list(k),
                    "mean": float(self.per_instance_mean[i]),
                    "sd": float(self.per_instance_sd[i]),
                }
                for i, k in enumerate(self.instance_keys)
            ],
        }

    def save(self, path: str | Path) -> None:
        dump_tree(self.to_dict(), path)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["instance", "mean", "sd"])
            for i, k in enumerate(self.instance_keys):
                name = ";".join(str(v) for v in k)
                writer.writerow([name, repr(float(self.per_instance_mean[i])), repr(float(self.per_instance_sd[i]))])


def estimate_dev(
    params: GnnParams,
    schema: DatabaseSchema,
    db: Database,
    e: Explanation,
    spec: PerturbationSpec,
    instances: np.ndarray | list[int] | None = None,
    n_samples: int = 5,
    hard_label: bool = False,
) -> DevReport:
    """Monte-Carlo deviation from determinacy over view-respecting
    perturbations, sample j seeded with spec.seed + j."""
    rel = db.relation(schema.target_relation)
    if instances is None:
        rows = np.arange(rel.n_rows)
    else:
        rows = np.asarray(list(instances), dtype=np.int64)
    graph = build_graph(schema, db)
    base = predict_rows(params, db, rows, graph)
    dists = np.zeros((n_samples, len(rows)))
    for j in range(n_samples):
        dbj = perturb(db, e, spec.with_seed(spec.seed + j))
        predsj = predict_rows(params, dbj, rows)
        for i in range(len(rows)):
            dists[j, i] = dist(float(base[i]), float(predsj[i]), schema.task, hard_label)
    per_instance_mean = dists.mean(axis=0) if len(rows) else np.zeros(0)
    per_instance_sd = dists.std(axis=0) if len(rows) else np.zeros(0)
    per_sample_mean = dists.mean(axis=1) if len(rows) else np.zeros(n_samples)
    overall = float(per_instance_mean.mean()) if len(rows) else 0.0
    overall_sd = float(per_sample_mean.std()) if len(rows) else 0.0
    keys = [rel.key_of(int(i)) for i in rows]
    return DevReport(
        overall_mean=overall,
        overall_sd=overall_sd,
        n_samples=n_samples,
        seed=spec.seed,
        spec=spec.describe(),
        language=e.language.value,
        cost=explanation_cost(e),
        instance_keys=keys,
        per_instance_mean=per_instance_mean,
        per_instance_sd=per_instance_sd,
        per_sample_mean=per_sample_mean,
    )


def objective(dev: float, cost: int, lam: float) -> float:
    """Soft-determinacy objective: deviation plus lambda times cost."""
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    if not (np.isfinite(dev) and np.isfinite(cost)):
        raise DomainError("objective needs finite inputs")
    return float(dev + lam * cost)


def sample_instances(
    db: Database, task: Task, n: int, balanced: bool, seed: int
) -> np.ndarray:
    """Target-relation rows for training/evaluating explanations.

    Balanced classification sampling draws ceil(n/2) per class; regression
    (or unbalanced) draws uniformly without replacement from labeled rows.
    """
    labels = label_values(db)
    labeled = np.flatnonzero(~np.isnan(labels))
    rng = np.random.default_rng(seed)
    if balanced and task is Task.BINARY_CLASSIFICATION:
        per_class = (n + 1) // 2
        picks = []
        for cls in (0.0, 1.0):
            members = labeled[labels[labeled] == cls]
            if len(members) < per_class:
                raise InsufficientClassMembers(
                    f"class {cls:g} has {len(members)} members, need {per_class}"
                )
            picks.append(rng.choice(members, size=per_class, replace=False))
        return np.concatenate(picks)
    if n > len(labeled):
        raise DomainError(f"asked for {n} instances, only {len(labeled)} labeled rows")
    return rng.choice(labeled, size=n, replace=False)
