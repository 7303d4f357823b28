"""Panoptic scenes, scene graphs, and the JSON annotation format.

Class indices are 1-based everywhere (0 is reserved for "unlabeled" in
segment maps, "no relation" in relation distributions).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HEAD_THRESHOLD = 10_000
TAIL_THRESHOLD = 500


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    id: int
    category: int
    is_thing: bool


@dataclass
class PanopticScene:
    image_id: str
    segment_map: np.ndarray  # (H, W) int
    segments: list

    @property
    def height(self):
        return self.segment_map.shape[0]

    @property
    def width(self):
        return self.segment_map.shape[1]

    def segment(self, segment_id):
        for s in self.segments:
            if s.id == segment_id:
                return s
        raise KeyError(f"{self.image_id}: no segment {segment_id}")

    def validate(self):
        ids = [s.id for s in self.segments]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise AnnotationError(f"segment ids must be contiguous from 1, got {ids}")
        present = set(np.unique(self.segment_map).tolist()) - {0}
        if present - set(ids):
            raise AnnotationError(f"segment map uses undeclared ids {sorted(present - set(ids))}")
        if set(ids) - present:
            raise AnnotationError(f"segments cover no pixels: {sorted(set(ids) - present)}")


@dataclass
class SceneGraph:
    triplets: list = field(default_factory=list)  # (subject_id, relation, object_id)

    def validate(self, scene, n_relations=None):
        ids = {s.id for s in scene.segments}
        seen = set()
        for t in self.triplets:
            sub, rel, obj = t
            if sub == obj:
                raise AnnotationError(f"triplet {list(t)} relates a segment to itself")
            if sub not in ids or obj not in ids:
                raise AnnotationError(f"triplet {list(t)} references a missing segment")
            if rel < 1 or (n_relations is not None and rel > n_relations):
                raise AnnotationError(f"triplet {list(t)} has relation class out of range")
            if tuple(t) in seen:
                raise AnnotationError(f"duplicate triplet {list(t)}")
            seen.add(tuple(t))


@dataclass
class RelationVocabulary:
    names: list
    counts: np.ndarray
    groups: list
    head_threshold: int = HEAD_THRESHOLD
    tail_threshold: int = TAIL_THRESHOLD


@dataclass
class Dataset:
    object_classes: list
    thing_flags: list
    relation_classes: list
    scenes: list
    graphs: list
    rejected: list = field(default_factory=list)  # (image_id, reason)

    @property
    def n_object_classes(self):
        return len(self.object_classes)

    @property
    def n_relation_classes(self):
        return len(self.relation_classes)

    def relation_counts(self):
        counts = np.zeros(self.n_relation_classes, dtype=np.int64)
        for g in self.graphs:
            for _, rel, _ in g.triplets:
                counts[rel - 1] += 1
        return counts

    def vocabulary(self, head_threshold=HEAD_THRESHOLD, tail_threshold=TAIL_THRESHOLD):
        counts = self.relation_counts()
        return RelationVocabulary(self.relation_classes, counts,
                                  split_head_body_tail(counts, head_threshold, tail_threshold),
                                  head_threshold, tail_threshold)

    def subset(self, indices):
        return Dataset(self.object_classes, self.thing_flags, self.relation_classes,
                       [self.scenes[i] for i in indices], [self.graphs[i] for i in indices])

    def by_id(self, image_id):
        for scene, graph in zip(self.scenes, self.graphs):
            if scene.image_id == image_id:
                return scene, graph
        raise KeyError(f"no image {image_id!r}")


def split_head_body_tail(counts, head_threshold=HEAD_THRESHOLD, tail_threshold=TAIL_THRESHOLD):
    """Tag each class head (> head), tail (< tail) or body (inclusive in between)."""
    groups = []
    for c in counts:
        if c > head_threshold:
            groups.append("head")
        elif c < tail_threshold:
            groups.append("tail")
        else:
            groups.append("body")
    return groups


def mask_of(scene, segment_id):
    if segment_id not in {s.id for s in scene.segments}:
        raise KeyError(f"{scene.image_id}: no segment {segment_id}")
    return scene.segment_map == segment_id


def _parse_image(raw, n_objects, thing_flags, n_relations):
    image_id = str(raw["image_id"])
    h, w = int(raw["height"]), int(raw["width"])
    flat = np.asarray(raw["segment_map"], dtype=np.int64)
    if flat.size != h * w:
        raise AnnotationError(f"segment_map has {flat.size} entries, expected {h}x{w}")
    segments = []
    for s in raw["segments"]:
        cat = int(s["class"])
        if not 1 <= cat <= n_objects:
            raise AnnotationError(f"segment {s['id']} has class {cat} out of range")
        segments.append(Segment(int(s["id"]), cat, bool(thing_flags[cat - 1])))
    scene = PanopticScene(image_id, flat.reshape(h, w), segments)
    scene.validate()
    graph = SceneGraph([tuple(int(v) for v in t) for t in raw.get("relations", [])])
    graph.validate(scene, n_relations)
    return scene, graph


def load_dataset(path):
    """Parse an annotation file; invalid images are skipped and listed in ``rejected``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        objects = list(doc["object_classes"])
        flags = [bool(f) for f in doc["thing_flags"]]
        relations = list(doc["relation_classes"])
        images = doc["images"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise AnnotationError(f"{path}: malformed annotation file: {exc}") from exc
    if len(flags) != len(objects):
        raise AnnotationError(f"{path}: thing_flags length {len(flags)} != {len(objects)} classes")
    scenes, graphs, rejected = [], [], []
    for raw in images:
        image_id = str(raw.get("image_id", "?"))
        try:
            scene, graph = _parse_image(raw, len(objects), flags, len(relations))
        except (AnnotationError, KeyError, TypeError, ValueError) as exc:
            log.warning("rejected image %s: %s", image_id, exc)
            rejected.append((image_id, str(exc)))
            continue
        scenes.append(scene)
        graphs.append(graph)
    return Dataset(objects, flags, relations, scenes, graphs, rejected)


def dataset_to_json(dataset):
    images = []
    for scene, graph in zip(dataset.scenes, dataset.graphs):
        images.append({
            "image_id": scene.image_id,
            "height": scene.height,
            "width": scene.width,
            "segment_map": scene.segment_map.reshape(-1).tolist(),
            "segments": [{"id": s.id, "class": s.category} for s in scene.segments],
            "relations": [list(t) for t in graph.triplets],
        })
    return {
        "object_classes": list(dataset.object_classes),
        "thing_flags": list(dataset.thing_flags),
        "relation_classes": list(dataset.relation_classes),
        "images": images,
    }


def save_dataset(path, dataset):
    Path(path).write_text(json.dumps(dataset_to_json(dataset), separators=(",", ":")),
                          encoding="utf-8")
