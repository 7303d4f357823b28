"""Seeded generator of long-tailed synthetic panoptic scene graphs.

Scenes are guillotine tilings of the pixel grid into rectangles, so every
pixel is labeled.  Relation classes follow a power law ``p(r) ~ r^-skew``.
Each relation prefers a few (subject class, object class) pairs drawn once
from the seed.  Graphs are sampled before the tiling: every relation is
placed on one of its preferred pairs, adding segments as needed, so both
which pairs relate and how are learnable from object identity alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .scene import Dataset, PanopticScene, SceneGraph, Segment


@dataclass
class SynthConfig:
    n_scenes: int = 550
    height: int = 24
    width: int = 24
    n_object_classes: int = 8
    n_stuff_classes: int = 3
    n_relation_classes: int = 6
    mean_relations: float = 5.6
    skew: float = 1.0
    min_segments: int = 4
    max_segments: int = 8
    pairs_per_relation: int = 3
    seed: int = 0

    def validate(self):
        if self.n_object_classes < 2 or self.n_relation_classes < 2:
            raise ValueError("need at least 2 object classes and 2 relation classes")
        if not 0 <= self.n_stuff_classes < self.n_object_classes:
            raise ValueError("stuff classes must be a proper subset of object classes")
        if self.mean_relations <= 0:
            raise ValueError("mean_relations must be positive")
        if not 2 <= self.min_segments <= self.max_segments:
            raise ValueError("need 2 <= min_segments <= max_segments")
        if self.max_segments > self.height * self.width:
            raise ValueError(f"{self.max_segments} segments cannot tile a "
                             f"{self.height}x{self.width} grid")

    def to_dict(self):
        return asdict(self)


def relation_prior(n_relations, skew):
    w = np.arange(1, n_relations + 1, dtype=np.float64) ** -float(skew)
    return w / w.sum()


def affinity_table(config, rng):
    """(y, x, x) booleans: the (subject class, object class) pairs each relation prefers.

    Preferred pairs are disjoint across relations while enough pairs exist,
    so a class pair mostly determines its relation.
    """
    x, y = config.n_object_classes, config.n_relation_classes
    table = np.zeros((y, x, x), dtype=bool)
    per = min(config.pairs_per_relation, x * x)
    order = rng.permutation(x * x)
    for r in range(y):
        if (r + 1) * per <= x * x:
            cells = order[r * per:(r + 1) * per]
        else:
            cells = rng.choice(x * x, size=per, replace=False)
        table[r].flat[cells] = True
    return table


def _tile(rng, height, width, n_segments):
    rects = [(0, 0, height, width)]
    while len(rects) < n_segments:
        areas = np.array([h * w for _, _, h, w in rects], dtype=np.float64)
        splittable = areas >= 2
        probs = np.where(splittable, areas, 0.0)
        i = rng.choice(len(rects), p=probs / probs.sum())
        top, left, h, w = rects.pop(i)
        if h >= w:
            cut = int(rng.integers(1, h))
            rects += [(top, left, cut, w), (top + cut, left, h - cut, w)]
        else:
            cut = int(rng.integers(1, w))
            rects += [(top, left, h, cut), (top, left + cut, h, w - cut)]
    segment_map = np.zeros((height, width), dtype=np.int64)
    for sid, (top, left, h, w) in enumerate(rects, start=1):
        segment_map[top:top + h, left:left + w] = sid
    return segment_map


class _SceneBuilder:
    """Grows a scene's segment classes and triplets one relation at a time."""

    def __init__(self, config, n_target):
        self.n_things = config.n_object_classes - config.n_stuff_classes
        self.n_target = n_target
        self.classes = []
        self.triplets = []

    def _can_add(self, *new):
        if len(self.classes) + len(new) > self.n_target:
            return False
        stuff = [c for c in new if c > self.n_things]
        return len(set(stuff)) == len(stuff) and not set(stuff) & set(self.classes)

    def placements(self, r, preferred):
        """Ways to realise relation r on a preferred pair, reusing or adding segments."""
        seen = set(self.triplets)
        found = []
        for a, b in preferred:
            subs = [i for i, c in enumerate(self.classes) if c == a]
            objs = [j for j, c in enumerate(self.classes) if c == b]
            found += [(i, j) for i in subs for j in objs if i != j and (i, r, j) not in seen]
            if self._can_add(b):
                found += [(i, ("new", b)) for i in subs]
            if self._can_add(a):
                found += [(("new", a), j) for j in objs]
            if self._can_add(a, b):
                found.append((("new", a), ("new", b)))
        return found

    def fallback(self, r):
        seen = set(self.triplets)
        n = len(self.classes)
        return [(i, j) for i in range(n) for j in range(n) if i != j and (i, r, j) not in seen]

    def place(self, r, choice):
        ends = []
        for end in choice:
            if isinstance(end, tuple):
                self.classes.append(end[1])
                end = len(self.classes) - 1
            ends.append(end)
        self.triplets.append((ends[0], r, ends[1]))

    def fill(self, rng, n_object_classes, min_segments):
        while len(self.classes) < max(self.n_target, min_segments):
            pool = list(range(1, self.n_things + 1))
            pool += [c for c in range(self.n_things + 1, n_object_classes + 1)
                     if c not in self.classes]
            self.classes.append(int(rng.choice(pool)))


def _sample_scene(rng, config, prior, table):
    """Graph first: each relation lands on one of its preferred class pairs.

    Returns (segment classes, 1-based triplets).  A relation with no room
    for a preferred pair falls back to a uniformly random existing pair.
    """
    n_target = int(rng.integers(config.min_segments, config.max_segments + 1))
    builder = _SceneBuilder(config, n_target)
    preferred = [[(int(a) + 1, int(b) + 1) for a, b in np.argwhere(t)] for t in table]
    for _ in range(int(rng.poisson(config.mean_relations))):
        r = int(rng.choice(len(prior), p=prior))
        options = builder.placements(r, preferred[r]) or builder.fallback(r)
        if options:
            builder.place(r, options[int(rng.integers(len(options)))])
    builder.fill(rng, config.n_object_classes, config.min_segments)
    order = rng.permutation(len(builder.classes))  # old index -> new index
    classes = [0] * len(order)
    for old, new in enumerate(order):
        classes[new] = builder.classes[old]
    triplets = [(int(order[i]) + 1, r + 1, int(order[j]) + 1) for i, r, j in builder.triplets]
    return classes, triplets


def synthesize(config):
    config.validate()
    root = np.random.SeedSequence(config.seed)
    table_seq, *scene_seqs = root.spawn(config.n_scenes + 1)
    table = affinity_table(config, np.random.default_rng(table_seq))
    prior = relation_prior(config.n_relation_classes, config.skew)
    n_things = config.n_object_classes - config.n_stuff_classes
    thing_flags = [c <= n_things for c in range(1, config.n_object_classes + 1)]
    scenes, graphs = [], []
    for i, seq in enumerate(scene_seqs):
        rng = np.random.default_rng(seq)
        classes, triplets = _sample_scene(rng, config, prior, table)
        segment_map = _tile(rng, config.height, config.width, len(classes))
        segments = [Segment(sid, c, thing_flags[c - 1]) for sid, c in enumerate(classes, start=1)]
        scenes.append(PanopticScene(f"synth_{i:05d}", segment_map, segments))
        graphs.append(SceneGraph(triplets))
    objects = [f"{'thing' if f else 'stuff'}_{c}" for c, f in
               enumerate(thing_flags, start=1)]
    relations = [f"rel_{r}" for r in range(1, config.n_relation_classes + 1)]
    return Dataset(objects, thing_flags, relations, scenes, graphs)
