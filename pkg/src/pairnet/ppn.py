"""Pair proposal: score every ordered (subject query, object query) cell and keep the top k."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MLP, Conv2d, Module
from .tensor import ShapeError, Tensor

COSINE_EPS = 1e-8
LEARNERS = ("cnn-tiny", "cnn-base", "mlp")


@dataclass
class TopKSelection:
    subjects: np.ndarray  # (k,) query index of each pair's subject
    objects: np.ndarray   # (k,) query index of each pair's object
    scores: np.ndarray    # (k,) filtered logits, descending

    def __len__(self):
        return len(self.subjects)

    def cells(self):
        return list(zip(self.subjects.tolist(), self.objects.tolist()))


class CNNMatrixLearner(Module):
    """Three same-padded convolutions 1 -> C -> C -> 1 with ReLU between; logit output."""

    def __init__(self, rng, channels=64, kernel_size=7):
        self.convs = [Conv2d(rng, 1, channels, kernel_size),
                      Conv2d(rng, channels, channels, kernel_size),
                      Conv2d(rng, channels, 1, kernel_size)]

    def forward(self, matrix):
        n = matrix.shape[0]
        x = matrix.reshape(1, n, n)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.relu(x)
        return x.reshape(n, n)


class MLPMatrixLearner(Module):
    """Row-wise MLP N -> h -> h -> N over the rough matrix."""

    def __init__(self, rng, n_queries, hidden=256):
        self.mlp = MLP(rng, [n_queries, hidden, hidden, n_queries])

    def forward(self, matrix):
        return self.mlp(matrix)


def make_matrix_learner(rng, kind, n_queries, kernel_size=7):
    if kind == "cnn-tiny":
        return CNNMatrixLearner(rng, 64, kernel_size)
    if kind == "cnn-base":
        return CNNMatrixLearner(rng, 256, kernel_size)
    if kind == "mlp":
        return MLPMatrixLearner(rng, n_queries)
    raise ValueError(f"unknown matrix learner {kind!r}; expected one of {LEARNERS}")


class PairProposalNetwork(Module):
    def __init__(self, rng, dim, n_queries, learner="cnn-tiny"):
        self.subject_projector = MLP(rng, [dim, dim, dim, dim])
        self.object_projector = MLP(rng, [dim, dim, dim, dim])
        self.learner = make_matrix_learner(rng, learner, n_queries)

    def project(self, queries):
        return self.subject_projector(queries), self.object_projector(queries)

    def forward(self, queries):
        """Returns (E_sub, E_obj, rough cosine matrix, filtered logits)."""
        e_sub, e_obj = self.project(queries)
        rough = rough_matrix(e_sub, e_obj)
        return e_sub, e_obj, rough, self.learner(rough)


def rough_matrix(e_sub, e_obj, eps=COSINE_EPS):
    """Cosine similarity of every subject row against every object row."""
    if e_sub.shape[-1] != e_obj.shape[-1]:
        raise ShapeError(f"embedding widths differ: {e_sub.shape} vs {e_obj.shape}")
    a = e_sub / T.clamp_min(T.norm(e_sub, axis=1), eps)
    b = e_obj / T.clamp_min(T.norm(e_obj, axis=1), eps)
    return T.matmul(a, T.transpose(b))


def build_gt_matrix(assignment, graph, n_queries):
    gt = np.zeros((n_queries, n_queries))
    for triplet in graph.triplets:
        sub, _, obj = triplet
        try:
            gt[assignment.query_of(sub), assignment.query_of(obj)] = 1.0
        except KeyError as exc:
            raise KeyError(f"triplet {list(triplet)} has an unassigned segment") from exc
    return gt


def positive_weight(gt):
    positives = gt.sum()
    return gt.size / positives if positives > 0 else 0.0


def ppn_loss(logits, gt, weight=None):
    """Positive-weighted BCE averaged over all cells.

    ``weight`` defaults to cells / positives; pass a number to override it.
    """
    logits = T.as_tensor(logits)
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} vs target {gt.shape}")
    p = positive_weight(gt) if weight is None else float(weight)
    pos = T.mul(T.log_sigmoid(logits), p * gt)
    neg = T.mul(T.log_sigmoid(T.mul(logits, -1.0)), 1.0 - gt)
    return T.mul(T.mean(T.add(pos, neg)), -1.0)


def top_k_pairs(logits, k):
    """k best off-diagonal cells; ties fall back to row-major order."""
    scores = np.array(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= k <= n * n - n:
        raise ValueError(f"k={k} exceeds the {n * n - n} off-diagonal cells")
    np.fill_diagonal(scores, -np.inf)
    flat = np.argsort(-scores.ravel(), kind="stable")[:k]
    rows, cols = np.divmod(flat, n)
    return TopKSelection(rows, cols, scores.ravel()[flat])


def select_pairs(queries, selection):
    queries = T.as_tensor(queries)
    return T.take(queries, selection.subjects), T.take(queries, selection.objects)
