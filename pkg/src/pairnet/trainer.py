"""Deterministic training and evaluation driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_module, save_module
from .fusion import build_predictions, relation_targets, triplet_matching
from .losses import LossWeights, RelationLossConfig, SeesawCounter, relation_loss, total_loss
from .metrics import GroundTruth, RankedTriplets, evaluate
from .model import ModelConfig, PairNet, infer
from .optim import DivergenceError, OptimizerConfig, optimizer_step
from .oracle import EmbeddingTable, OracleConfig, assign_queries, oracle_queries
from .ppn import build_gt_matrix, ppn_loss

log = logging.getLogger(__name__)

EVAL_SALT = 1_000_003


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    relation_loss: RelationLossConfig = field(default_factory=RelationLossConfig)
    n_queries: int = 100
    dim: int = 256
    n_rel: int = 100
    decoder_layers: int = 6
    heads: int = 8
    learner: str = "cnn-tiny"
    oracle: OracleConfig = field(default_factory=OracleConfig)
    ppn_positive_weight: float | None = None  # None: cells / positives
    fold_pair_score: bool = False
    val_count: int | None = None  # None: 10% of the images
    ks: list = field(default_factory=lambda: [20, 50, 100])
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.n_rel > self.n_queries ** 2 - self.n_queries:
            raise ValueError(f"n_rel={self.n_rel} exceeds N_obj^2 - N_obj")
        self.oracle.n_queries = self.n_queries
        self.oracle.dim = self.dim

    def model_config(self, n_object_classes, n_relation_classes):
        return ModelConfig(n_object_classes, n_relation_classes, self.n_queries, self.dim,
                           self.n_rel, self.decoder_layers, self.heads, self.learner, self.seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        nested = {"optimizer": OptimizerConfig, "loss_weights": LossWeights,
                  "relation_loss": RelationLossConfig, "oracle": OracleConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            kwargs[key] = nested[key](**value) if key in nested else value
        return cls(**kwargs)


@dataclass
class RunRecord:
    config: dict
    seed: int
    step_losses: list = field(default_factory=list)   # per image-step component dicts
    epoch_losses: list = field(default_factory=list)  # per-epoch means
    epoch_reports: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self):
        return asdict(self)


def split_indices(n, val_count=None):
    if val_count is None:
        val_count = max(1, round(0.1 * n)) if n > 1 else 0
    return list(range(n - val_count)), list(range(n - val_count, n))


def _class_ce(class_logits, queries, classes):
    z = class_logits[queries]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(classes)), np.asarray(classes) - 1].mean())


def image_losses(model, scene, graph, table, config, counter=None, salt=0):
    """Forward one image and return its weighted total and component losses.

    Returns ``None`` when the oracle skips the scene.
    """
    qs = oracle_queries(scene, table, config.oracle, salt=salt)
    if qs is None:
        return None
    assignment = assign_queries(scene, qs)
    gt_matrix = build_gt_matrix(assignment, graph, config.n_queries)
    out = model.forward(qs.queries)
    l_ppn = ppn_loss(out.filtered, gt_matrix, config.ppn_positive_weight)
    preds = build_predictions(out.selection, qs.class_logits, out.relation_logits.data)
    gt_classes = [(scene.segment(s).category, r, scene.segment(o).category)
                  for s, r, o in graph.triplets]
    try:
        slots = triplet_matching(preds, gt_classes)
    except ValueError as exc:
        raise ValueError(f"image {scene.image_id}: {exc}") from exc
    targets = relation_targets(config.n_rel, slots, [r for _, r, _ in gt_classes])
    counts = counter.counts if counter is not None else None
    l_rel = relation_loss(out.relation_logits, targets, config.relation_loss, counts)
    if counter is not None:
        counter.stage(targets)
    if len(slots):
        # segmenter logits are frozen under the oracle: these terms carry no gradient
        l_sub = _class_ce(qs.class_logits, out.selection.subjects[slots],
                          [c for c, _, _ in gt_classes])
        l_obj = _class_ce(qs.class_logits, out.selection.objects[slots],
                          [c for _, _, c in gt_classes])
    else:
        l_sub = l_obj = 0.0
    components = {"subject": T.Tensor(l_sub), "object": T.Tensor(l_obj),
                  "relation": l_rel, "ppn": l_ppn, "original": T.Tensor(0.0)}
    return total_loss(components, config.loss_weights), components


def train(config, dataset, progress=None):
    """Train on the non-validation split; returns (model, RunRecord)."""
    started = time.perf_counter()
    x, y = dataset.n_object_classes, dataset.n_relation_classes
    model = PairNet(config.model_config(x, y))
    params = model.parameters()
    for name, p in model.named_parameters():
        p.name = name
    table = EmbeddingTable.create(x, config.oracle)
    train_idx, val_idx = split_indices(len(dataset.scenes), config.val_count)
    val = dataset.subset(val_idx)
    counter = SeesawCounter(y + 1)
    shuffle = np.random.default_rng([config.seed, 0x5EED])
    record = RunRecord(config.to_dict(), config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(train_idx)
        epoch_components = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            model.zero_grad()
            for i in batch:
                result = image_losses(model, dataset.scenes[i], dataset.graphs[i], table,
                                      config, counter, salt=epoch)
                if result is None:
                    continue
                total, components = result
                values = {k: float(v.data) for k, v in components.items()}
                values["total"] = float(total.data)
                if not np.isfinite(values["total"]):
                    raise DivergenceError(f"non-finite loss at step {step} "
                                          f"(image {dataset.scenes[i].image_id})")
                T.mul(total, 1.0 / len(batch)).backward()
                record.step_losses.append(values)
                epoch_components.append(values)
                step += 1
            try:
                optimizer_step(params, config.optimizer, epoch)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} after step {step - 1}") from exc
            counter.commit()
        mean = {k: float(np.mean([c[k] for c in epoch_components])) for k in epoch_components[0]}
        record.epoch_losses.append(mean)
        report = evaluate_model(model, config, val) if val.scenes else None
        record.epoch_reports.append(report.to_dict() if report else None)
        if progress is not None:
            progress(epoch, mean, report)
        log.info("epoch %d: %s", epoch, mean)
    record.wall_clock = time.perf_counter() - started
    model.seesaw_counts = counter.counts.copy()
    return model, record


def evaluate_model(model, config, dataset, ks=None, claiming="greedy",
                   pair_logits_fn=None, relation_logits_fn=None, salt=EVAL_SALT):
    """Full inference over ``dataset`` followed by the metrics suite.

    ``pair_logits_fn(scene, graph, query_set, assignment)`` and
    ``relation_logits_fn(scene, graph, query_set, assignment, selection)``
    let test harnesses inject ground truth into either stage.
    """
    ks = ks or config.ks
    table = EmbeddingTable.create(dataset.n_object_classes, config.oracle)
    images, query_sets, assignments = [], [], []
    for scene, graph in zip(dataset.scenes, dataset.graphs):
        qs = oracle_queries(scene, table, config.oracle, salt=salt)
        if qs is None:
            continue
        assignment = assign_queries(scene, qs)
        pair_logits = None
        if pair_logits_fn is not None:
            pair_logits = pair_logits_fn(scene, graph, qs, assignment)
        rel_fn = None
        if relation_logits_fn is not None:
            rel_fn = lambda sel, s=scene, g=graph, q=qs, a=assignment: \
                relation_logits_fn(s, g, q, a, sel)  # noqa: E731
        ranked, _ = infer(model, qs, pair_logits, rel_fn, config.fold_pair_score)
        images.append((RankedTriplets.from_predictions(ranked, qs.binary_masks()),
                       GroundTruth(scene, graph)))
        query_sets.append(qs)
        assignments.append(assignment)
    return evaluate(images, ks, claiming=claiming, query_sets=query_sets,
                    assignments=assignments, n_relation_classes=dataset.n_relation_classes)


def untrained_model(config, dataset):
    return PairNet(config.model_config(dataset.n_object_classes, dataset.n_relation_classes))


def save_run(out_dir, model, config, record=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.pnet"
    save_module(ckpt, model)
    meta = {"train_config": config.to_dict(), "model_config": model.config.to_dict()}
    ckpt.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    if record is not None:
        (out / "run.json").write_text(json.dumps(record.to_dict()), encoding="utf-8")
    return ckpt


def load_run(ckpt_path):
    ckpt_path = Path(ckpt_path)
    sidecar = ckpt_path.with_suffix(".json")
    for path in (ckpt_path, sidecar):
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint file {path} not found")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    config = TrainConfig.from_dict(meta["train_config"])
    model = PairNet(ModelConfig(**meta["model_config"]))
    load_module(ckpt_path, model)
    return model, config


def check_extents(model, dataset):
    mc = model.config
    if (mc.n_object_classes, mc.n_relation_classes) != (dataset.n_object_classes,
                                                        dataset.n_relation_classes):
        raise ValueError(
            f"checkpoint expects {mc.n_object_classes} object / {mc.n_relation_classes} "
            f"relation classes, dataset has {dataset.n_object_classes} / "
            f"{dataset.n_relation_classes}")
