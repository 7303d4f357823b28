"""Ground-truth-driven stand-in for a query-based panoptic segmenter.

Each scene segment becomes one object query built from a class embedding,
an instance offset (so two same-class segments stay distinguishable) and
Gaussian noise.  Class logits and soft masks are derived from the ground
truth with configurable corruption.  Leftover queries are "no object".
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .assignment import hungarian
from .checkpoint import CheckpointFormatError, load_arrays, save_arrays
from .scene import mask_of

log = logging.getLogger(__name__)

PEAK_LOGIT = 6.0
MASK_ON, MASK_OFF, MASK_EMPTY = 0.95, 0.02, 0.01


@dataclass
class OracleConfig:
    n_queries: int = 100
    dim: int = 256
    noise: float = 0.0
    flip_prob: float = 0.0
    perturb_rate: float = 0.0
    offset_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        for name in ("flip_prob", "perturb_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class EmbeddingTable:
    classes: np.ndarray  # (x + 1, d); last row is "no object"
    offsets: np.ndarray  # (n_queries, d)

    @classmethod
    def create(cls, n_object_classes, config):
        rng = np.random.default_rng([config.seed, 0x0E3B])
        return cls(rng.standard_normal((n_object_classes + 1, config.dim)),
                   config.offset_scale * rng.standard_normal((config.n_queries, config.dim)))

    @property
    def n_object_classes(self):
        return self.classes.shape[0] - 1


@dataclass
class ObjectQuerySet:
    queries: np.ndarray       # (N, d)
    class_logits: np.ndarray  # (N, x + 1), last column = no object
    soft_masks: np.ndarray    # (N, H, W) in [0, 1]
    source: dict = field(default_factory=dict)  # segment id -> generating query slot

    @property
    def n_queries(self):
        return self.queries.shape[0]

    def binary_masks(self):
        return self.soft_masks > 0.5

    def predicted_classes(self):
        """1-based class per query, 0 for no-object."""
        arg = self.class_logits.argmax(axis=1)
        return np.where(arg == self.class_logits.shape[1] - 1, 0, arg + 1)


@dataclass
class QueryAssignment:
    segment_to_query: dict
    unmatched: list

    def query_of(self, segment_id):
        return self.segment_to_query[segment_id]


def _image_rng(config, image_id, salt):
    key = zlib.crc32(str(image_id).encode("utf-8"))
    return np.random.default_rng([config.seed, key, salt])


def _boundary(mask):
    edge = np.zeros_like(mask)
    edge[1:, :] |= mask[1:, :] != mask[:-1, :]
    edge[:-1, :] |= mask[:-1, :] != mask[1:, :]
    edge[:, 1:] |= mask[:, 1:] != mask[:, :-1]
    edge[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    return edge


def oracle_queries(scene, table, config, salt=0):
    """Build an :class:`ObjectQuerySet` for ``scene``; ``None`` if it has too many segments."""
    n, x = config.n_queries, table.n_object_classes
    if len(scene.segments) > n:
        log.warning("skipping %s: %d segments exceed %d queries",
                    scene.image_id, len(scene.segments), n)
        return None
    rng = _image_rng(config, scene.image_id, salt)
    order = rng.permutation(n)
    queries = np.empty((n, config.dim))
    logits = np.zeros((n, x + 1))
    masks = np.full((n, scene.height, scene.width), MASK_EMPTY)
    source = {}
    ordinal = {}
    for slot, seg in enumerate(scene.segments):
        q = int(order[slot])
        k = ordinal.get(seg.category, 0)
        ordinal[seg.category] = k + 1
        queries[q] = (table.classes[seg.category - 1] + table.offsets[k]
                      + config.noise * rng.standard_normal(config.dim))
        shown = seg.category
        if rng.random() < config.flip_prob:
            shown = int(rng.choice([c for c in range(1, x + 1) if c != seg.category]))
        logits[q, shown - 1] = PEAK_LOGIT
        gt = mask_of(scene, seg.id)
        flip = _boundary(gt) & (rng.random(gt.shape) < config.perturb_rate)
        masks[q] = np.where(gt ^ flip, MASK_ON, MASK_OFF)
        source[seg.id] = q
    for slot in range(len(scene.segments), n):
        q = int(order[slot])
        queries[q] = (table.classes[x] + table.offsets[slot]
                      + config.noise * rng.standard_normal(config.dim))
        logits[q, x] = PEAK_LOGIT
    return ObjectQuerySet(queries, logits, masks, source)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def assignment_cost(scene, query_set):
    """(n_segments, N) cost: class CE + mean mask BCE + Dice, unit weights."""
    logp = _log_softmax(query_set.class_logits)
    probs = np.clip(query_set.soft_masks.reshape(query_set.n_queries, -1), 1e-12, 1 - 1e-12)
    costs = []
    for seg in scene.segments:
        gt = mask_of(scene, seg.id).reshape(-1).astype(np.float64)
        ce = -logp[:, seg.category - 1]
        bce = -(gt * np.log(probs) + (1 - gt) * np.log(1 - probs)).mean(axis=1)
        dice = 1.0 - (2.0 * (probs * gt).sum(axis=1) + 1.0) / (probs.sum(axis=1) + gt.sum() + 1.0)
        costs.append(ce + bce + dice)
    return np.array(costs).reshape(len(scene.segments), query_set.n_queries)


def assign_queries(scene, query_set):
    rows, cols = hungarian(assignment_cost(scene, query_set))
    mapping = {scene.segments[r].id: int(c) for r, c in zip(rows, cols)}
    used = set(mapping.values())
    return QueryAssignment(mapping, [q for q in range(query_set.n_queries) if q not in used])


def save_precomputed(path, query_sets):
    arrays = {}
    for image_id, qs in query_sets.items():
        arrays[f"{image_id}/queries"] = qs.queries
        arrays[f"{image_id}/class_logits"] = qs.class_logits
        arrays[f"{image_id}/soft_masks"] = qs.soft_masks
    save_arrays(path, arrays)


def load_precomputed(path, n_queries, dim):
    arrays = load_arrays(path)
    grouped = {}
    for name, value in arrays.items():
        image_id, _, part = name.rpartition("/")
        grouped.setdefault(image_id, {})[part] = value
    out = {}
    for image_id, parts in grouped.items():
        missing = {"queries", "class_logits", "soft_masks"} - set(parts)
        if missing:
            raise CheckpointFormatError(f"{path}: image {image_id} lacks {sorted(missing)}")
        q, logits, masks = parts["queries"], parts["class_logits"], parts["soft_masks"]
        if q.shape != (n_queries, dim):
            raise CheckpointFormatError(
                f"{path}: image {image_id} queries {q.shape} != expected {(n_queries, dim)}")
        if logits.ndim != 2 or logits.shape[0] != n_queries:
            raise CheckpointFormatError(f"{path}: image {image_id} class logits {logits.shape}")
        if masks.ndim != 3 or masks.shape[0] != n_queries:
            raise CheckpointFormatError(f"{path}: image {image_id} soft masks {masks.shape}")
        out[image_id] = ObjectQuerySet(q, logits, masks)
    return out


def calibrate_perturbation(scenes, graphs, table, config, target_iou, iterations=25):
    """Bisect ``perturb_rate`` so the triplet-level mean subject IoU meets ``target_iou``."""
    from .metrics import mask_iou

    def mean_sub_iou(rate):
        cfg = OracleConfig(**{**config.to_dict(), "perturb_rate": rate})
        ious = []
        for scene, graph in zip(scenes, graphs):
            qs = oracle_queries(scene, table, cfg)
            if qs is None:
                continue
            assignment = assign_queries(scene, qs)
            binary = qs.binary_masks()
            for sub, _, _ in graph.triplets:
                ious.append(mask_iou(binary[assignment.query_of(sub)], mask_of(scene, sub)))
        return float(np.mean(ious)) if ious else 1.0

    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mean_sub_iou(mid) > target_iou:
            lo = mid
        else:
            hi = mid
    rate = 0.5 * (lo + hi)
    return rate, mean_sub_iou(rate)
