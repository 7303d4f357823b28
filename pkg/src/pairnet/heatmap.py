"""Grayscale PGM heatmaps of the pair matrices and relation attention."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import infer
from .oracle import EmbeddingTable, assign_queries, oracle_queries
from .ppn import build_gt_matrix

MAXVAL = 255
_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


class PGMFormatError(ValueError):
    pass


def to_gray(matrix):
    """Min-max scale to 0..255; a constant matrix maps to mid-gray 128."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"heatmaps need a 2-D matrix, got shape {m.shape}")
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8), lo, hi
    return np.rint((m - lo) / (hi - lo) * MAXVAL).astype(np.uint8), lo, hi


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii") + gray.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    match = _HEADER.match(raw)
    if not match:
        raise PGMFormatError(f"{path}: not a binary P5 PGM")
    w, h, maxval = (int(g) for g in match.groups())
    if not 0 < maxval < 256:
        raise PGMFormatError(f"{path}: unsupported maxval {maxval}")
    body = raw[match.end():]
    if len(body) != w * h:
        raise PGMFormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _label(names, index):
    return names[index - 1] if 1 <= index <= len(names) else "none"


def inspect_image(model, config, dataset, image_id, out_dir, salt=None):
    """Write the five diagnostic heatmaps for one image plus a JSON sidecar.

    Returns the sidecar dict.
    """
    from .trainer import EVAL_SALT

    scene, graph = dataset.by_id(image_id)
    table = EmbeddingTable.create(dataset.n_object_classes, config.oracle)
    qs = oracle_queries(scene, table, config.oracle, EVAL_SALT if salt is None else salt)
    if qs is None:
        raise ValueError(f"image {image_id} has more segments than object queries")
    assignment = assign_queries(scene, qs)
    ranked, out = infer(model, qs, fold_pair_score=config.fold_pair_score)
    panels = {
        "query_similarity": qs.queries @ qs.queries.T,
        "rough": out.rough.data,
        "filtered_prob": T._sigmoid(out.filtered.data),
        "ground_truth": build_gt_matrix(assignment, graph, qs.n_queries),
        "attention": out.attention[-1].mean(axis=0),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, matrix in panels.items():
        gray, lo, hi = to_gray(matrix)
        path = out_dir / f"{image_id}_{name}.pgm"
        write_pgm(path, gray)
        files[name] = {"file": path.name, "min": lo, "max": hi, "shape": list(gray.shape)}
    slots = [{"slot": p.slot, "subject_query": p.sub_query, "object_query": p.obj_query,
              "subject": _label(dataset.object_classes, p.sub_class),
              "relation": _label(dataset.relation_classes, p.rel_class),
              "object": _label(dataset.object_classes, p.obj_class),
              "score": p.score}
             for p in sorted(ranked, key=lambda p: p.slot)]
    sidecar = {"image_id": image_id, "panels": files, "slots": slots}
    (out_dir / f"{image_id}_inspect.json").write_text(json.dumps(sidecar, indent=2),
                                                      encoding="utf-8")
    return sidecar
