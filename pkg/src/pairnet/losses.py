"""Relation classification losses and the weighted training objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T

LOSS_KINDS = ("cross-entropy", "focal", "seesaw")


@dataclass
class RelationLossConfig:
    kind: str = "seesaw"
    gamma: float = 2.0
    p_mit: float = 0.8
    q_comp: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown relation loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.gamma < 0:
            raise ValueError("focal gamma must be non-negative")


@dataclass
class LossWeights:
    subject: float = 4.0
    object: float = 4.0
    relation: float = 2.0
    ppn: float = 5.0
    original: float = 1.0

    def to_dict(self):
        return asdict(self)


def _pick(log_probs, targets):
    return T.take(log_probs, (np.arange(len(targets)), np.asarray(targets)))


def cross_entropy(logits, targets):
    return T.mul(T.mean(_pick(T.log_softmax(logits, axis=-1), targets)), -1.0)


def focal_loss(logits, targets, gamma=2.0):
    ce = T.mul(_pick(T.log_softmax(logits, axis=-1), targets), -1.0)
    if gamma == 0:
        return T.mean(ce)
    p_true = T.exp(T.mul(ce, -1.0))
    modulator = T.power(T.clamp_min(T.sub(1.0, p_true), 1e-12), gamma)
    return T.mean(T.mul(modulator, ce))


def seesaw_weights(probs, targets, counts, p_mit=0.8, q_comp=2.0):
    """(K, C) multiplicative weights on exp(logit_j) for each slot's negatives.

    Class 0 (no relation) is exempt from count-based mitigation.
    """
    counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    targets = np.asarray(targets)
    ratio = counts[None, :] / counts[targets][:, None]
    mitigation = np.minimum(1.0, ratio ** p_mit)
    mitigation[targets == 0, :] = 1.0
    mitigation[:, 0] = 1.0
    p_true = probs[np.arange(len(targets)), targets][:, None]
    compensation = np.maximum(1.0, (probs / p_true) ** q_comp)
    weights = mitigation * compensation
    weights[np.arange(len(targets)), targets] = 1.0
    return weights


def seesaw_loss(logits, targets, counts, p_mit=0.8, q_comp=2.0):
    logits = T.as_tensor(logits)
    probs = T._softmax(logits.data, -1)
    weights = seesaw_weights(probs, targets, counts, p_mit, q_comp)
    adjusted = T.add(logits, np.log(weights))
    return T.mul(T.mean(_pick(T.log_softmax(adjusted, axis=-1), targets)), -1.0)


class SeesawCounter:
    """Running per-class target counts; staged targets commit at optimizer steps."""

    def __init__(self, n_classes):
        self.counts = np.zeros(n_classes, dtype=np.float64)
        self._pending = np.zeros(n_classes, dtype=np.float64)

    def stage(self, targets):
        np.add.at(self._pending, np.asarray(targets), 1.0)

    def commit(self):
        self.counts += self._pending
        self._pending[:] = 0.0


def relation_loss(logits, targets, config, counts=None):
    if config.kind == "cross-entropy":
        return cross_entropy(logits, targets)
    if config.kind == "focal":
        return focal_loss(logits, targets, config.gamma)
    if config.kind == "seesaw":
        if counts is None:
            counts = np.ones(T.as_tensor(logits).shape[1])
        return seesaw_loss(logits, targets, counts, config.p_mit, config.q_comp)
    raise ValueError(f"unknown relation loss {config.kind!r}")


def total_loss(components, weights):
    """Weighted sum over the named components present in ``components``."""
    total = T.Tensor(0.0)
    for name, value in components.items():
        total = T.add(total, T.mul(value, getattr(weights, name)))
    return total
