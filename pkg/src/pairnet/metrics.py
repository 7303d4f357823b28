"""Segmentation-grounded scene-graph metrics: R@K, mR@K, pair recall,
thing/stuff categorical recall, detector IoU and Panoptic Quality."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .scene import mask_of

CATEGORIES = ("TT", "TS", "ST", "SS")


def mask_iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class RankedTriplets:
    """Ranked predictions of one image; masks are indexed through the query ids."""

    sub_query: np.ndarray
    obj_query: np.ndarray
    sub_class: np.ndarray
    obj_class: np.ndarray
    rel_class: np.ndarray
    score: np.ndarray
    masks: np.ndarray  # (N, H, W) bool, one per query

    @classmethod
    def from_predictions(cls, ranked, masks):
        col = lambda f: np.array([f(p) for p in ranked], dtype=np.int64)  # noqa: E731
        return cls(col(lambda p: p.sub_query), col(lambda p: p.obj_query),
                   col(lambda p: p.sub_class), col(lambda p: p.obj_class),
                   col(lambda p: p.rel_class),
                   np.array([p.score for p in ranked], dtype=np.float64),
                   np.asarray(masks, dtype=bool))

    def __len__(self):
        return len(self.sub_query)


@dataclass
class GroundTruth:
    scene: object
    graph: object


def _iou_table(masks, scene):
    """IoU of every predicted query mask against every GT segment, keyed by segment id."""
    table = {}
    flat = masks.reshape(masks.shape[0], -1)
    for seg in scene.segments:
        gt = mask_of(scene, seg.id).reshape(-1)
        inter = (flat & gt).sum(axis=1)
        union = (flat | gt).sum(axis=1)
        table[seg.id] = inter / np.maximum(union, 1)
    return table


def eligibility(pred, gt, k, threshold=0.5, use_relation=True):
    """(min(k, P), G) bool: prediction i may claim GT triplet j."""
    scene = gt.scene
    iou = _iou_table(pred.masks, scene)
    top = min(k, len(pred))
    out = np.zeros((top, len(gt.graph.triplets)), dtype=bool)
    for j, (sub, rel, obj) in enumerate(gt.graph.triplets):
        sub_cls, obj_cls = scene.segment(sub).category, scene.segment(obj).category
        ok = ((pred.sub_class[:top] == sub_cls) & (pred.obj_class[:top] == obj_cls)
              & (iou[sub][pred.sub_query[:top]] >= threshold)
              & (iou[obj][pred.obj_query[:top]] >= threshold))
        if use_relation:
            ok &= pred.rel_class[:top] == rel
        out[:, j] = ok
    return out


def greedy_claims(eligible):
    """Walk predictions in rank order; each claims the first unclaimed eligible GT."""
    claimed = np.zeros(eligible.shape[1], dtype=bool)
    for row in eligible:
        free = np.flatnonzero(row & ~claimed)
        if free.size:
            claimed[free[0]] = True
    return claimed


def optimal_claims(eligible):
    """Maximum one-to-one prediction/GT matching."""
    claimed = np.zeros(eligible.shape[1], dtype=bool)
    if eligible.size == 0:
        return claimed
    rows, cols = linear_sum_assignment(-eligible.astype(np.float64))
    good = eligible[rows, cols]
    claimed[cols[good]] = True
    return claimed


def recall_at_k(pred, gt, k, threshold=0.5, use_relation=True, claiming="greedy"):
    """Hit flags per GT triplet for the top-k predictions."""
    eligible = eligibility(pred, gt, k, threshold, use_relation)
    return greedy_claims(eligible) if claiming == "greedy" else optimal_claims(eligible)


def pair_recall_at_k(pred, gt, k, threshold=0.5, claiming="greedy"):
    return recall_at_k(pred, gt, k, threshold, use_relation=False, claiming=claiming)


def triplet_category(scene, triplet):
    sub, _, obj = triplet
    return (("T" if scene.segment(sub).is_thing else "S")
            + ("T" if scene.segment(obj).is_thing else "S"))


def categorical_recall_at_k(pred, gt, k, threshold=0.5, claiming="greedy"):
    """{category: (hits, total)} using one shared claiming pass."""
    hits = recall_at_k(pred, gt, k, threshold, claiming=claiming)
    tallies = {c: [0, 0] for c in CATEGORIES}
    for hit, t in zip(hits, gt.graph.triplets):
        cat = triplet_category(gt.scene, t)
        tallies[cat][0] += int(hit)
        tallies[cat][1] += 1
    return {c: tuple(v) for c, v in tallies.items()}


def detector_metrics(query_sets, assignments, truths, threshold=0.5):
    """Triplet-level mean subject/object IoU and Recall@threshold of the assigned queries."""
    sub_ious, obj_ious = [], []
    for qs, assignment, gt in zip(query_sets, assignments, truths):
        masks = qs.binary_masks()
        for sub, _, obj in gt.graph.triplets:
            sub_ious.append(mask_iou(masks[assignment.query_of(sub)], mask_of(gt.scene, sub)))
            obj_ious.append(mask_iou(masks[assignment.query_of(obj)], mask_of(gt.scene, obj)))
    if not sub_ious:
        return {"sub_iou": None, "obj_iou": None, "sub_recall": None, "obj_recall": None}
    sub_ious, obj_ious = np.array(sub_ious), np.array(obj_ious)
    return {"sub_iou": float(sub_ious.mean()), "obj_iou": float(obj_ious.mean()),
            "sub_recall": float((sub_ious >= threshold).mean()),
            "obj_recall": float((obj_ious >= threshold).mean())}


def predicted_segment_map(query_set, threshold=0.5):
    """Per-pixel argmax over mask scores of object-classified queries.

    Returns (segment map with ids query+1, 0 = unlabeled; {id: class}).
    """
    classes = query_set.predicted_classes()
    keep = np.flatnonzero(classes > 0)
    h, w = query_set.soft_masks.shape[1:]
    if keep.size == 0:
        return np.zeros((h, w), dtype=np.int64), {}
    scores = query_set.soft_masks[keep]
    best = scores.argmax(axis=0)
    seg_map = np.where(scores.max(axis=0) >= threshold, keep[best] + 1, 0)
    ids = np.unique(seg_map)
    return seg_map, {int(i): int(classes[i - 1]) for i in ids if i > 0}


@dataclass
class PQStat:
    iou: dict = field(default_factory=lambda: defaultdict(float))
    tp: dict = field(default_factory=lambda: defaultdict(int))
    fp: dict = field(default_factory=lambda: defaultdict(int))
    fn: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, pred_map, pred_classes, scene):
        matched_pred, matched_gt = set(), set()
        for seg in scene.segments:
            gt = scene.segment_map == seg.id
            for pid, cls in pred_classes.items():
                if cls != seg.category or pid in matched_pred:
                    continue
                pm = pred_map == pid
                iou = np.logical_and(gt, pm).sum() / np.logical_or(gt, pm).sum()
                if iou > 0.5:
                    self.iou[cls] += float(iou)
                    self.tp[cls] += 1
                    matched_pred.add(pid)
                    matched_gt.add(seg.id)
                    break
        for seg in scene.segments:
            if seg.id not in matched_gt:
                self.fn[seg.category] += 1
        for pid, cls in pred_classes.items():
            if pid not in matched_pred:
                self.fp[cls] += 1

    def value(self):
        classes = set(self.tp) | set(self.fp) | set(self.fn)
        per_class = []
        for c in classes:
            denom = self.tp[c] + 0.5 * self.fp[c] + 0.5 * self.fn[c]
            if denom > 0:
                per_class.append(self.iou[c] / denom)
        return float(np.mean(per_class)) if per_class else 0.0


def panoptic_quality(pred_map, pred_classes, scene):
    stat = PQStat()
    stat.add(pred_map, pred_classes, scene)
    return stat.value()


@dataclass
class MetricsReport:
    recall: dict
    mean_recall: dict
    per_class_recall: dict
    pair_recall: dict
    categorical_recall: dict
    detector: dict
    pq: float
    image_count: int
    claiming: str = "greedy"

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw):
        """Inverse of ``to_dict`` after a JSON round trip (string keys back to ints)."""
        by_k = lambda d: {int(k): v for k, v in d.items()}  # noqa: E731
        return cls(
            recall=by_k(raw["recall"]),
            mean_recall=by_k(raw["mean_recall"]),
            per_class_recall={int(k): by_k(v) for k, v in raw["per_class_recall"].items()},
            pair_recall=by_k(raw["pair_recall"]),
            categorical_recall={c: by_k(v) for c, v in raw["categorical_recall"].items()},
            detector=dict(raw["detector"]),
            pq=raw["pq"],
            image_count=raw["image_count"],
            claiming=raw.get("claiming", "greedy"),
        )

    def table(self):
        fmt = lambda v: "  -  " if v is None else f"{100 * v:5.1f}"  # noqa: E731
        ks = sorted(self.recall)
        lines = [f"images: {self.image_count}   claiming: {self.claiming}",
                 "metric      " + "".join(f"   @{k:<4}" for k in ks)]
        rows = [("R", self.recall), ("mR", self.mean_recall), ("pair-R", self.pair_recall)]
        rows += [(f"{c}-R", self.categorical_recall[c]) for c in CATEGORIES]
        for name, values in rows:
            lines.append(f"{name:<12}" + "".join(f"   {fmt(values[k])}" for k in ks))
        det = self.detector
        lines.append("detector    " + "  ".join(f"{k}={fmt(v)}" for k, v in det.items()))
        lines.append(f"PQ          {fmt(self.pq)}")
        return "\n".join(lines)


def _mean(values):
    return float(np.mean(values)) if values else None


def evaluate(images, ks=(20, 50, 100), threshold=0.5, claiming="greedy",
             query_sets=None, assignments=None, n_relation_classes=None):
    """Aggregate metrics over ``images``: a list of (RankedTriplets, GroundTruth).

    Dataset recall is the mean of per-image recalls over images with at least
    one GT triplet.  Per-class recall averages per-image class recalls over
    the images where that class occurs; mR@K averages over classes present.
    """
    ks = sorted(ks)
    recall = {k: [] for k in ks}
    pair = {k: [] for k in ks}
    cat = {k: {c: [] for c in CATEGORIES} for k in ks}
    per_class = {k: defaultdict(list) for k in ks}
    pq = PQStat()
    for index, (pred, gt) in enumerate(images):
        if query_sets is not None:
            pred_map, pred_classes = predicted_segment_map(query_sets[index])
            pq.add(pred_map, pred_classes, gt.scene)
        n = len(gt.graph.triplets)
        if n == 0:
            continue
        rels = np.array([t[1] for t in gt.graph.triplets])
        for k in ks:
            hits = recall_at_k(pred, gt, k, threshold, claiming=claiming)
            recall[k].append(hits.mean())
            pair[k].append(pair_recall_at_k(pred, gt, k, threshold, claiming).mean())
            for r in np.unique(rels):
                per_class[k][int(r)].append(hits[rels == r].mean())
            cats = np.array([triplet_category(gt.scene, t) for t in gt.graph.triplets])
            for c in CATEGORIES:
                sel = cats == c
                if sel.any():
                    cat[k][c].append(hits[sel].mean())
    class_recall = {k: {r: float(np.mean(v)) for r, v in sorted(per_class[k].items())}
                    for k in ks}
    detector = {"sub_iou": None, "obj_iou": None, "sub_recall": None, "obj_recall": None}
    if query_sets is not None and assignments is not None:
        detector = detector_metrics(query_sets, assignments, [gt for _, gt in images], threshold)
    return MetricsReport(
        recall={k: _mean(recall[k]) for k in ks},
        mean_recall={k: _mean(list(class_recall[k].values())) for k in ks},
        per_class_recall=class_recall,
        pair_recall={k: _mean(pair[k]) for k in ks},
        categorical_recall={c: {k: _mean(cat[k][c]) for k in ks} for c in CATEGORIES},
        detector=detector,
        pq=pq.value() if query_sets is not None else None,
        image_count=len(images),
        claiming=claiming,
    )


def random_pair_baseline(truths, n_queries, k):
    """Expected pair recall when k distinct off-diagonal cells are drawn uniformly.

    Each distinct GT (subject, object) cell is selected with probability
    k / (N^2 - N) and then claims exactly one of its triplets.
    """
    p = min(k, n_queries * n_queries - n_queries) / (n_queries * n_queries - n_queries)
    values = []
    for gt in truths:
        n = len(gt.graph.triplets)
        if n == 0:
            continue
        cells = {(s, o) for s, _, o in gt.graph.triplets}
        values.append(len(cells) * p / n)
    return float(np.mean(values)) if values else 0.0
