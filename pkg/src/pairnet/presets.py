"""The standard desk-scale experiment: a small synthetic set and matching model extents."""

from __future__ import annotations

from .synth import SynthConfig
from .trainer import TrainConfig

STANDARD_SYNTH = dict(n_scenes=550, height=24, width=24, n_object_classes=8, n_stuff_classes=3,
                      n_relation_classes=6, mean_relations=5.6, pairs_per_relation=3, seed=0)

STANDARD_TRAIN = dict(epochs=12, batch_size=8, n_queries=16, dim=32, n_rel=20,
                      decoder_layers=6, heads=1, val_count=50, ks=[20, 50, 100], seed=0,
                      oracle=dict(noise=0.1), optimizer=dict(learning_rate=3e-3))


def standard_synth_config(**overrides):
    return SynthConfig(**{**STANDARD_SYNTH, **overrides})


def standard_train_config(**overrides):
    raw = {**STANDARD_TRAIN, **overrides}
    return TrainConfig.from_dict(raw)
