"""Pair-then-relation model: pair proposal followed by relation fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .fusion import RelationDecoder, RelationHead, build_predictions, concat_pairs, rank_triplets
from .layers import Module
from .ppn import PairProposalNetwork, select_pairs, top_k_pairs


@dataclass
class ModelConfig:
    n_object_classes: int
    n_relation_classes: int
    n_queries: int = 100
    dim: int = 256
    n_rel: int = 100
    decoder_layers: int = 6
    heads: int = 8
    learner: str = "cnn-tiny"
    seed: int = 0

    def __post_init__(self):
        if self.n_rel > self.n_queries ** 2 - self.n_queries:
            raise ValueError(f"n_rel={self.n_rel} exceeds the off-diagonal cell count")

    def to_dict(self):
        return asdict(self)


@dataclass
class ForwardResult:
    e_sub: T.Tensor
    e_obj: T.Tensor
    rough: T.Tensor
    filtered: T.Tensor
    selection: object
    pair_queries: T.Tensor
    decoded: T.Tensor
    attention: list
    relation_logits: T.Tensor


class PairNet(Module):
    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng([config.seed, 0x9A1E])
        self.ppn = PairProposalNetwork(rng, config.dim, config.n_queries, config.learner)
        self.decoder = RelationDecoder(rng, config.dim, config.n_rel,
                                       config.decoder_layers, config.heads)
        self.head = RelationHead(rng, config.dim, config.n_relation_classes)

    def forward(self, queries, pair_logits=None):
        """Run one image's object queries through PPN and relation fusion.

        ``pair_logits`` replaces the learned filtered matrix for top-k
        selection (test harnesses only); the learned matrix is still returned.
        """
        q = T.as_tensor(queries)
        e_sub, e_obj, rough, filtered = self.ppn(q)
        selection = top_k_pairs(filtered if pair_logits is None else pair_logits,
                                self.config.n_rel)
        q_sub, q_obj = select_pairs(q, selection)
        pair_queries = concat_pairs(q_sub, q_obj)
        decoded, attention = self.decoder(pair_queries)
        logits = self.head(decoded)
        return ForwardResult(e_sub, e_obj, rough, filtered, selection, pair_queries,
                             decoded, attention, logits)


def infer(model, query_set, pair_logits=None, relation_logits=None, fold_pair_score=False):
    """Ranked triplet predictions for one image."""
    with T.no_grad():
        out = model.forward(query_set.queries, pair_logits)
    logits = out.relation_logits.data
    if relation_logits is not None:
        logits = relation_logits(out.selection)
    preds = build_predictions(out.selection, query_set.class_logits, logits)
    ranked = rank_triplets(preds)
    if fold_pair_score:
        cell = 1.0 / (1.0 + np.exp(-out.selection.scores))
        for p in ranked:
            p.score *= float(cell[p.slot])
        ranked = sorted(ranked, key=lambda p: (-p.score, p.slot))
    return ranked, out
