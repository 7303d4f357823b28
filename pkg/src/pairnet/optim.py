"""AdamW with a multi-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    milestones: list = field(default_factory=lambda: [5, 10])
    decay_factor: float = 0.1

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")


def learning_rate_at(config, epoch):
    """Initial rate decayed once for every milestone already reached."""
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.learning_rate * config.decay_factor ** passed


def optimizer_step(params, config, epoch):
    lr = learning_rate_at(config, epoch)
    b1, b2 = config.beta1, config.beta2
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step += 1
        p.data = p.data * (1.0 - lr * config.weight_decay)
        p.exp_avg = b1 * p.exp_avg + (1.0 - b1) * p.grad
        p.exp_avg_sq = b2 * p.exp_avg_sq + (1.0 - b2) * p.grad ** 2
        m_hat = p.exp_avg / (1.0 - b1 ** p.step)
        v_hat = p.exp_avg_sq / (1.0 - b2 ** p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return lr
