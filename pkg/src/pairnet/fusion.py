"""Relation fusion: relation queries cross-attend to the selected pair queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .assignment import hungarian
from .layers import MLP, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, embedding_init
from .tensor import ShapeError


def concat_pairs(q_sub, q_obj):
    """Stack subject rows then object rows: (2 N_rel, d)."""
    if q_sub.shape != q_obj.shape:
        raise ShapeError(f"subject/object query extents differ: {q_sub.shape} vs {q_obj.shape}")
    return T.concat([q_sub, q_obj], axis=0)


class DecoderLayer(Module):
    """Pre-norm self-attention, cross-attention and feed-forward, each residual."""

    def __init__(self, rng, dim, heads, ffn_dim):
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = MLP(rng, [dim, ffn_dim, dim])

    def forward(self, x, memory, query_pos, key_pos, value_pos):
        h = self.norm_self(x)
        out, _ = self.self_attn(h, h, h, query_pos, query_pos, query_pos)
        x = x + out
        h = self.norm_cross(x)
        out, weights = self.cross_attn(h, memory, memory, query_pos, key_pos, value_pos)
        x = x + out
        x = x + self.ffn(self.norm_ffn(x))
        return x, weights


class RelationDecoder(Module):
    def __init__(self, rng, dim, n_relations_queries, layers=6, heads=8, ffn_dim=None):
        n = n_relations_queries
        self.relation_queries = Parameter(embedding_init(rng, (n, dim)))
        self.query_pos = Parameter(embedding_init(rng, (n, dim)))
        self.key_pos = Parameter(embedding_init(rng, (2 * n, dim)))
        self.value_pos = Parameter(embedding_init(rng, (2 * n, dim)))
        self.layers = [DecoderLayer(rng, dim, heads, ffn_dim or 4 * dim) for _ in range(layers)]

    @property
    def n_slots(self):
        return self.relation_queries.shape[0]

    def forward(self, pair_queries):
        """Returns decoded (N_rel, d) queries and per-layer cross-attention weights."""
        if pair_queries.shape[0] != 2 * self.n_slots:
            raise ShapeError(f"pair queries have {pair_queries.shape[0]} rows, "
                             f"decoder expects {2 * self.n_slots}")
        x = self.relation_queries
        maps = []
        for layer in self.layers:
            x, weights = layer(x, pair_queries, self.query_pos, self.key_pos, self.value_pos)
            maps.append(weights.data.copy())
        return x, maps


class RelationHead(Module):
    """Single affine layer to y + 1 logits (index 0 = no relation)."""

    def __init__(self, rng, dim, n_relation_classes):
        self.linear = Linear(rng, dim, n_relation_classes + 1)

    def forward(self, decoded):
        return self.linear(decoded)


def classify_relations(decoded, head):
    return head(decoded)


@dataclass
class TripletPrediction:
    slot: int
    sub_query: int
    obj_query: int
    sub_probs: np.ndarray  # (x + 1,), last = no object
    obj_probs: np.ndarray
    rel_probs: np.ndarray  # (y + 1,), first = no relation
    score: float = 0.0

    @property
    def sub_class(self):
        return int(np.argmax(self.sub_probs[:-1])) + 1

    @property
    def obj_class(self):
        return int(np.argmax(self.obj_probs[:-1])) + 1

    @property
    def rel_class(self):
        return int(np.argmax(self.rel_probs[1:])) + 1


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def build_predictions(selection, class_logits, relation_logits):
    sub = _softmax(class_logits[selection.subjects])
    obj = _softmax(class_logits[selection.objects])
    rel = _softmax(np.asarray(relation_logits))
    return [TripletPrediction(t, int(selection.subjects[t]), int(selection.objects[t]),
                              sub[t], obj[t], rel[t])
            for t in range(len(selection))]


def matching_cost(predictions, gt_triplets):
    """(N_gt, K) sum of subject, object and relation cross-entropies.

    ``gt_triplets`` holds (subject class, relation class, object class).
    """
    tiny = 1e-300
    sub = np.array([p.sub_probs for p in predictions])
    obj = np.array([p.obj_probs for p in predictions])
    rel = np.array([p.rel_probs for p in predictions])
    cost = np.empty((len(gt_triplets), len(predictions)))
    for g, (sc, rc, oc) in enumerate(gt_triplets):
        cost[g] = (-np.log(np.maximum(sub[:, sc - 1], tiny))
                   - np.log(np.maximum(obj[:, oc - 1], tiny))
                   - np.log(np.maximum(rel[:, rc], tiny)))
    return cost


def triplet_matching(predictions, gt_triplets):
    """Slot index assigned to each GT triplet (length N_gt)."""
    if len(gt_triplets) > len(predictions):
        raise ValueError(f"{len(gt_triplets)} ground-truth triplets exceed "
                         f"{len(predictions)} prediction slots; raise k")
    rows, cols = hungarian(matching_cost(predictions, gt_triplets))
    slots = np.empty(len(gt_triplets), dtype=np.int64)
    slots[rows] = cols
    return slots


def relation_targets(n_slots, slots, gt_relations):
    targets = np.zeros(n_slots, dtype=np.int64)
    targets[slots] = gt_relations
    return targets


def rank_triplets(predictions):
    """Score = P(subject) * P(object) * P(relation), each the best non-background probability."""
    for p in predictions:
        p.score = float(p.sub_probs[:-1].max() * p.obj_probs[:-1].max() * p.rel_probs[1:].max())
    return sorted(predictions, key=lambda p: (-p.score, p.slot))
