"""Compact hetero-GNN with task head, training loop, and exact gradients.

Message passing follows the typed-neighborhood scheme: per layer, each
(FK, orientation) pair mean-aggregates neighbor vectors (empty
neighborhoods contribute zero), the update is a linear combination of
the node's own vector and all aggregates followed by ReLU, and a 2-layer
MLP head maps the last layer to the prediction. Classification outputs a
sigmoid probability, regression a raw-scale real (internally the head
works on z-scored labels).

Everything is float64; gradients come from reverse-mode autodiff and are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError, InsufficientData, ParseError
from .graph import (
    EncoderParams,
    CategoricalEncoder,
    HeteroGraph,
    NumericEncoder,
    RelationEncoder,
    ReplacementPlan,
    build_graph,
    draw_replacement_plan,
    encode_relation,
    init_encoders,
)
from .masking import COLUMN, FILTER, FKPK, MaskBundle, mask_blend
from .relstore import Database, DatabaseSchema, Task
from .treeio import dumps_tree
from .relstore import schema_descriptor_dict

CHECKPOINT_MAGIC = b"RELEXPCKPT1\n"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 256
    layers: int = 2
    seed: int = 0
    patience: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    attr_dim: int = 4
    hidden_dim: int = 16
    head_hidden: int = 16

    def __post_init__(self):
        if self.layers < 1:
            raise DomainError("layers must be >= 1")
        for name in ("lr", "epochs", "batch_size", "patience", "attr_dim", "hidden_dim", "head_hidden"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")


@dataclass
class LayerParams:
    w_self: torch.Tensor
    bias: torch.Tensor
    w_rel: dict[tuple[str, str], torch.Tensor]  # (fk id, orientation) -> (d, d)


@dataclass
class GnnParams:
    task: Task
    encoders: EncoderParams
    layers: list[LayerParams]
    head_w1: torch.Tensor
    head_b1: torch.Tensor
    head_w2: torch.Tensor
    head_b2: torch.Tensor
    label_mean: float = 0.0
    label_std: float = 1.0
    schema_fingerprint: str = ""

    def named_tensors(self):
        yield from self.encoders.named_tensors()
        for i, layer in enumerate(self.layers):
            yield f"conv{i}.self", layer.w_self
            yield f"conv{i}.bias", layer.bias
            for (fk_id, o) in sorted(layer.w_rel):
                yield f"conv{i}.rel.{fk_id}.{o}", layer.w_rel[(fk_id, o)]
        yield "head.w1", self.head_w1
        yield "head.b1", self.head_b1
        yield "head.w2", self.head_w2
        yield "head.b2", self.head_b2

    def tensor_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(t.detach().numpy().tobytes())
        return h.hexdigest()


def schema_fingerprint(schema: DatabaseSchema) -> str:
    return hashlib.sha256(dumps_tree(schema_descriptor_dict(schema)).encode()).hexdigest()


def init_gnn_params(
    schema: DatabaseSchema, db: Database, config: TrainConfig, generator: torch.Generator
) -> GnnParams:
    enc = init_encoders(schema, db, config.attr_dim, config.hidden_dim, generator)
    d = config.hidden_dim
    layers = []
    pairs = [(fk.id, o) for fk in schema.fks for o in ("in", "out")]
    for _ in range(config.layers):
        w_self = torch.randn(d, d, generator=generator, dtype=torch.float64) * (1.0 / d**0.5)
        bias = torch.zeros(d, dtype=torch.float64)
        w_rel = {
            pair: torch.randn(d, d, generator=generator, dtype=torch.float64) * (1.0 / d**0.5)
            for pair in pairs
        }
        for t in [w_self, bias, *w_rel.values()]:
            t.requires_grad_(True)
        layers.append(LayerParams(w_self, bias, w_rel))
    dh = config.head_hidden
    head_w1 = torch.randn(dh, d, generator=generator, dtype=torch.float64) * (2.0 / d) ** 0.5
    head_b1 = torch.zeros(dh, dtype=torch.float64)
    head_w2 = torch.randn(1, dh, generator=generator, dtype=torch.float64) * (2.0 / dh) ** 0.5
    head_b2 = torch.zeros(1, dtype=torch.float64)
    for t in (head_w1, head_b1, head_w2, head_b2):
        t.requires_grad_(True)
    return GnnParams(
        task=schema.task,
        encoders=enc,
        layers=layers,
        head_w1=head_w1,
        head_b1=head_b1,
        head_w2=head_w2,
        head_b2=head_b2,
        schema_fingerprint=schema_fingerprint(schema),
    )


def _expand_masks(masks: MaskBundle | None):
    col_masks = fk_masks = None
    if masks is None:
        return None, None
    vals = masks.values()
    if masks.kind == COLUMN:
        col_masks = {unit: vals[i] for i, unit in enumerate(masks.units)}
    elif masks.kind == FKPK:
        fk_masks = {unit: vals[i] for i, unit in enumerate(masks.units)}
    return col_masks, fk_masks


def _edge_tensors(es):
    # cached LongTensor views of the edge arrays
    cache = getattr(es, "_tensors", None)
    if cache is None:
        cache = (torch.from_numpy(es.src), torch.from_numpy(es.dst))
        es._tensors = cache
    return cache


def forward(
    params: GnnParams,
    graph: HeteroGraph,
    db: Database,
    instances: np.ndarray | list[int] | None = None,
    masks: MaskBundle | None = None,
    plan: ReplacementPlan | None = None,
) -> torch.Tensor:
    """Predictions for the given target-relation rows (all rows if None)."""
    schema = db.schema
    col_masks, fk_masks = _expand_masks(masks)
    h = {
        rel: encode_relation(params.encoders, db, rel, col_masks, plan)
        for rel in schema.relations
    }
    if masks is not None and masks.kind == FILTER:
        for rel in schema.relations:
            n = graph.node_counts[rel]
            if n == 0:
                continue
            if plan is None or rel not in plan.tuple_:
                raise DomainError("filter masking requires a tuple-level replacement plan")
            m = masks.tuple_mask(rel).unsqueeze(1)
            repl = torch.from_numpy(plan.tuple_[rel])
            h[rel] = mask_blend(h[rel], m, h[rel][repl])

    for layer in params.layers:
        new = {rel: v @ layer.w_self.T + layer.bias for rel, v in h.items()}
        for (fk_id, orient) in sorted(layer.w_rel):
            fk = schema.fk(fk_id)
            es = graph.edges[fk_id]
            src_t, dst_t = _edge_tensors(es)
            if orient == "out":
                receiver, sender = fk.source_relation, fk.target_relation
                recv_idx, send_idx = src_t, dst_t
            else:
                receiver, sender = fk.target_relation, fk.source_relation
                recv_idx, send_idx = dst_t, src_t
            n_recv = graph.node_counts[receiver]
            if n_recv == 0:
                continue
            d = h[sender].shape[1]
            agg = torch.zeros(n_recv, d, dtype=torch.float64).index_add(
                0, recv_idx, h[sender][send_idx]
            )
            counts = torch.bincount(recv_idx, minlength=n_recv).clamp(min=1)
            mean = agg / counts.unsqueeze(1).to(torch.float64)
            if fk_masks is not None:
                mean = fk_masks[fk_id] * mean  # mu with zero replacement
            new[receiver] = new[receiver] + mean @ layer.w_rel[(fk_id, orient)].T
        h = {rel: torch.relu(v) for rel, v in new.items()}

    tgt = schema.target_relation
    n_tgt = graph.node_counts[tgt]
    if instances is None:
        rows = np.arange(n_tgt)
    else:
        rows = np.asarray(list(instances), dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n_tgt):
            raise DomainError("instance outside the target relation")
    z = h[tgt][torch.from_numpy(rows)]
    hidden = torch.relu(z @ params.head_w1.T + params.head_b1)
    out = (hidden @ params.head_w2.T + params.head_b2).squeeze(1)
    if params.task is Task.BINARY_CLASSIFICATION:
        return torch.sigmoid(out)
    return out * params.label_std + params.label_mean


def loss(pred, label, task: Task, label_std: float = 1.0, label_mean: float = 0.0):
    """Binary cross-entropy on clamped probabilities, or squared error on
    z-scored values for regression."""
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.tensor(float(pred), dtype=torch.float64)
    if label is None or (isinstance(label, float) and np.isnan(label)):
        raise DomainError("loss needs a non-missing label")
    label_t = torch.tensor(float(label), dtype=torch.float64)
    if task is Task.BINARY_CLASSIFICATION:
        p = pred_t.clamp(1e-7, 1.0 - 1e-7)
        return -(label_t * torch.log(p) + (1.0 - label_t) * torch.log(1.0 - p))
    return ((pred_t - label_t) / label_std) ** 2


def batch_loss(params: GnnParams, preds: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if torch.isnan(labels).any():
        raise DomainError("batch contains a missing label")
    if params.task is Task.BINARY_CLASSIFICATION:
        p = preds.clamp(1e-7, 1.0 - 1e-7)
        return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()
    return (((preds - labels) / params.label_std) ** 2).mean()


def label_values(db: Database) -> np.ndarray:
    """Label column of the target relation as float64 (categorical labels
    are rejected at schema level for training; NaN marks unlabeled rows)."""
    schema = db.schema
    col = db.relation(schema.target_relation).columns[schema.label_attr]
    if col.symbols is not None:
        raise DomainError("label attribute must be numeric (0/1 for classification)")
    return col.values


@dataclass
class Gradients:
    by_name: dict[str, torch.Tensor]
    mask: torch.Tensor | None = None
    mask_units: tuple | None = None


def backward(
    params: GnnParams,
    graph: HeteroGraph,
    db: Database,
    batch: np.ndarray | list[int],
    masks: MaskBundle | None = None,
    which: str = "params",
    plan: ReplacementPlan | None = None,
) -> Gradients:
    """Exact reverse-mode gradients of the mean batch loss.

    Replacement draws in *plan* are constants of the pass. *which* selects
    the variable set: "params", "masks", or "both".
    """
    if which not in ("params", "masks", "both"):
        raise DomainError(f"unknown gradient selection {which}")
    if which in ("masks", "both") and masks is None:
        raise DomainError("mask gradients need a mask bundle")
    rows = np.asarray(list(batch), dtype=np.int64)
    labels = torch.from_numpy(label_values(db)[rows])
    preds = forward(params, graph, db, rows, masks, plan)
    total = batch_loss(params, preds, labels)
    named = list(params.named_tensors())
    targets = []
    if which in ("params", "both"):
        targets.extend(t for _, t in named)
    if which in ("masks", "both"):
        targets.append(masks.logits)
    grads = torch.autograd.grad(total, targets, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, targets)]
    out = Gradients({})
    i = 0
    if which in ("params", "both"):
        out.by_name = {name: grads[j] for j, (name, _) in enumerate(named)}
        i = len(named)
    if which in ("masks", "both"):
        out.mask = grads[i]
        out.mask_units = masks.units
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based ROC-AUC with tie-averaged ranks; 0.5 if one class absent."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mae(labels: np.ndarray, preds: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(labels) - np.asarray(preds))))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: GnnParams
    metrics: dict
    split: dict[str, np.ndarray]
    config: TrainConfig = field(default=None)


def _clone_state(params: GnnParams) -> dict[str, torch.Tensor]:
    return {name: t.detach().clone() for name, t in params.named_tensors()}


def _restore_state(params: GnnParams, state: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, t in params.named_tensors():
            t.copy_(state[name])


def _eval_metric(params, graph, db, rows, labels):
    with torch.no_grad():
        preds = forward(params, graph, db, rows).numpy()
    if params.task is Task.BINARY_CLASSIFICATION:
        return roc_auc(labels, preds), True  # higher is better
    return mae(labels, preds), False


def train(schema: DatabaseSchema, db: Database, config: TrainConfig) -> TrainResult:
    """Adam training with a seeded 60/20/20 split over labeled target rows
    and early stopping on the validation metric (ROC-AUC / MAE)."""
    all_labels = label_values(db)
    labeled = np.flatnonzero(~np.isnan(all_labels))
    if len(labeled) < 10:
        raise InsufficientData(f"need at least 10 labeled instances, have {len(labeled)}")
    rng = np.random.default_rng(config.seed)
    perm = labeled[rng.permutation(len(labeled))]
    n = len(perm)
    n_train = max(1, int(round(0.6 * n)))
    n_val = max(1, int(round(0.2 * n)))
    train_rows = perm[:n_train]
    val_rows = perm[n_train : n_train + n_val]
    test_rows = perm[n_train + n_val :]
    if len(test_rows) == 0:
        test_rows = val_rows

    gen = torch.Generator().manual_seed(config.seed)
    params = init_gnn_params(schema, db, config, gen)
    if schema.task is Task.REGRESSION:
        params.label_mean = float(all_labels[train_rows].mean())
        std = float(all_labels[train_rows].std())
        params.label_std = std if std > 1e-12 else 1.0
    graph = build_graph(schema, db)
    tensors = [t for _, t in params.named_tensors()]
    opt = torch.optim.Adam(tensors, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)

    best_metric = None
    best_state = _clone_state(params)
    best_epoch = 0
    stale = 0
    labels_t = torch.from_numpy(all_labels)
    for epoch in range(config.epochs):
        order = torch.randperm(len(train_rows), generator=gen).numpy()
        for start in range(0, len(order), config.batch_size):
            batch = train_rows[order[start : start + config.batch_size]]
            opt.zero_grad()
            preds = forward(params, graph, db, batch)
            total = batch_loss(params, preds, labels_t[torch.from_numpy(batch)])
            total.backward()
            opt.step()
        val_metric, higher_better = _eval_metric(params, graph, db, val_rows, all_labels[val_rows])
        improved = (
            best_metric is None
            or (higher_better and val_metric > best_metric + 1e-12)
            or (not higher_better and val_metric < best_metric - 1e-12)
        )
        if improved:
            best_metric = val_metric
            best_state = _clone_state(params)
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    _restore_state(params, best_state)
    train_metric, _ = _eval_metric(params, graph, db, train_rows, all_labels[train_rows])
    val_metric, _ = _eval_metric(params, graph, db, val_rows, all_labels[val_rows])
    test_metric, _ = _eval_metric(params, graph, db, test_rows, all_labels[test_rows])
    metrics = {
        "train": train_metric,
        "val": val_metric,
        "test": test_metric,
        "best_epoch": best_epoch,
        "epochs_run": epoch + 1,
        "metric": "roc_auc" if schema.task is Task.BINARY_CLASSIFICATION else "mae",
    }
    split = {"train": train_rows, "val": val_rows, "test": test_rows}
    return TrainResult(params, metrics, split, config)


def predict_all(params: GnnParams, schema: DatabaseSchema, db: Database) -> dict:
    """One prediction per target tuple, keyed by the tuple's key values."""
    graph = build_graph(schema, db)
    rel = db.relation(schema.target_relation)
    with torch.no_grad():
        preds = forward(params, graph, db).numpy()
    return {rel.key_of(i): float(preds[i]) for i in range(rel.n_rows)}


def predict_rows(params: GnnParams, db: Database, rows, graph: HeteroGraph | None = None) -> np.ndarray:
    if graph is None:
        graph = build_graph(db.schema, db)
    with torch.no_grad():
        return forward(params, graph, db, rows).numpy()


# ---------------------------------------------------------------------------
# Checkpoint format (documented in the README):
#   magic "RELEXPCKPT1\n", uint32 little-endian header length, UTF-8 JSON
#   header {version, meta, tensors: [{name, shape}]}, then the tensors'
#   float64 little-endian row-major bytes concatenated in header order.
# ---------------------------------------------------------------------------

def _encoder_meta(enc: EncoderParams) -> dict:
    attrs = []
    for (rel, attr), e in enc.attr_encoders.items():
        if isinstance(e, CategoricalEncoder):
            ordered = sorted(e.vocab, key=e.vocab.get)
            attrs.append({"relation": rel, "attr": attr, "kind": "categorical", "vocab": ordered})
        else:
            attrs.append(
                {"relation": rel, "attr": attr, "kind": "numeric", "mean": e.mean, "std": e.std}
            )
    return {
        "attr_dim": enc.attr_dim,
        "rel_dim": enc.rel_dim,
        "attr_order": {rel: list(a) for rel, a in enc.attr_order.items()},
        "attrs": attrs,
    }


def save_checkpoint(params: GnnParams, path) -> None:
    named = list(params.named_tensors())
    meta = {
        "task": params.task.value,
        "label_mean": params.label_mean,
        "label_std": params.label_std,
        "schema_fingerprint": params.schema_fingerprint,
        "n_layers": len(params.layers),
        "rel_pairs": [[fk, o] for (fk, o) in sorted(params.layers[0].w_rel)] if params.layers else [],
        "encoders": _encoder_meta(params.encoders),
    }
    header = {
        "version": 1,
        "meta": meta,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(t.detach().numpy().astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> GnnParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ParseError(f"{path}: unsupported checkpoint version")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            t = torch.from_numpy(arr)
            t.requires_grad_(True)
            tensors[entry["name"]] = t
    meta = header["meta"]
    em = meta["encoders"]
    attr_encoders = {}
    for a in em["attrs"]:
        rel, attr = a["relation"], a["attr"]
        if a["kind"] == "categorical":
            vocab = {sym: i + 1 for i, sym in enumerate(a["vocab"])}
            attr_encoders[(rel, attr)] = CategoricalEncoder(vocab, tensors[f"enc.{rel}.{attr}.weight"])
        else:
            attr_encoders[(rel, attr)] = NumericEncoder(
                a["mean"],
                a["std"],
                tensors[f"enc.{rel}.{attr}.scale"],
                tensors[f"enc.{rel}.{attr}.bias"],
                tensors[f"enc.{rel}.{attr}.missing"],
            )
    rel_encoders = {
        rel: RelationEncoder(tensors[f"enc.{rel}.linear.weight"], tensors[f"enc.{rel}.linear.bias"])
        for rel in em["attr_order"]
    }
    encoders = EncoderParams(
        em["attr_dim"],
        em["rel_dim"],
        {rel: tuple(attrs) for rel, attrs in em["attr_order"].items()},
        attr_encoders,
        rel_encoders,
    )
    layers = []
    for i in range(meta["n_layers"]):
        w_rel = {
            (fk, o): tensors[f"conv{i}.rel.{fk}.{o}"] for fk, o in map(tuple, meta["rel_pairs"])
        }
        layers.append(LayerParams(tensors[f"conv{i}.self"], tensors[f"conv{i}.bias"], w_rel))
    return GnnParams(
        task=Task(meta["task"]),
        encoders=encoders,
        layers=layers,
        head_w1=tensors["head.w1"],
        head_b1=tensors["head.b1"],
        head_w2=tensors["head.w2"],
        head_b2=tensors["head.b2"],
        label_mean=meta["label_mean"],
        label_std=meta["label_std"],
        schema_fingerprint=meta["schema_fingerprint"],
    )
