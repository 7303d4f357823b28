"""Independent recall oracle: direct IoU plus Kuhn augmenting-path maximum matching."""

import numpy as np

from pairnet.metrics import RankedTriplets
from pairnet.scene import PanopticScene, SceneGraph, Segment


def iou(a, b):
    union = np.logical_or(a, b).sum()
    return np.logical_and(a, b).sum() / union if union else 0.0


def eligible_pairs(pred, scene, graph, k, use_relation=True, threshold=0.5):
    edges = []
    for i in range(min(k, len(pred))):
        row = []
        for j, (s, r, o) in enumerate(graph.triplets):
            seg_s, seg_o = scene.segment(s), scene.segment(o)
            ok = (pred.sub_class[i] == seg_s.category and pred.obj_class[i] == seg_o.category
                  and iou(pred.masks[pred.sub_query[i]], scene.segment_map == s) >= threshold
                  and iou(pred.masks[pred.obj_query[i]], scene.segment_map == o) >= threshold
                  and (not use_relation or pred.rel_class[i] == r))
            if ok:
                row.append(j)
        edges.append(row)
    return edges


def max_matching(edges, n_right):
    owner = [-1] * n_right

    def augment(u, seen):
        for v in edges[u]:
            if v not in seen:
                seen.add(v)
                if owner[v] == -1 or augment(owner[v], seen):
                    owner[v] = u
                    return True
        return False

    return sum(augment(u, set()) for u in range(len(edges)))


def random_instance(rng, max_gt=6, max_pred=10, height=3, width=4):
    """Tiny scene, graph and ranked predictions biased toward correct guesses."""
    while True:
        n_seg = int(rng.integers(2, 5))
        labels = rng.integers(1, n_seg + 1, size=height * width)
        labels[:n_seg] = np.arange(1, n_seg + 1)
        rng.shuffle(labels)
        if len(np.unique(labels)) == n_seg:
            break
    seg_map = labels.reshape(height, width)
    segments = [Segment(i, int(rng.integers(1, 3)), bool(rng.random() < 0.6))
                for i in range(1, n_seg + 1)]
    scene = PanopticScene("tiny", seg_map, segments)
    cells = [(s, r, o) for s in range(1, n_seg + 1) for o in range(1, n_seg + 1) if s != o
             for r in (1, 2)]
    n_gt = int(rng.integers(1, min(max_gt, len(cells)) + 1))
    triplets = [cells[i] for i in rng.choice(len(cells), n_gt, replace=False)]
    graph = SceneGraph(triplets)
    n_queries = n_seg + 2
    masks = np.zeros((n_queries, height, width), dtype=bool)
    for q in range(n_queries):
        if q < n_seg:
            masks[q] = seg_map == q + 1
            if rng.random() < 0.3:
                masks[q] ^= rng.random((height, width)) < 0.2
        else:
            masks[q] = rng.random((height, width)) < 0.3
    n_pred = int(rng.integers(1, max_pred + 1))
    rows = []
    for _ in range(n_pred):
        if rng.random() < 0.6:
            s, r, o = triplets[int(rng.integers(len(triplets)))]
            sub_q, obj_q = s - 1, o - 1
            sc, oc = scene.segment(s).category, scene.segment(o).category
            if rng.random() < 0.3:
                r = int(rng.integers(1, 3))
        else:
            sub_q, obj_q = rng.choice(n_queries, 2, replace=False)
            sc, oc, r = (int(v) for v in rng.integers(1, 3, size=3))
        rows.append((sub_q, obj_q, sc, oc, r))
    rows = np.array(rows, dtype=np.int64)
    pred = RankedTriplets(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], rows[:, 4],
                          np.linspace(1, 0, n_pred), masks)
    return scene, graph, pred
