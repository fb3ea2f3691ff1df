"""MLP classifier head over globally pooled features."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import (
    Param,
    Tensor,
    dropout,
    global_avg_pool,
    kaiming_param,
    linear,
    relu,
    zero_param,
)


class HeadParams:
    """Two hidden relu layers plus the logit projection.

    Inverted dropout follows each hidden relu in training mode, so
    evaluation needs no rescaling. ``rng=None`` zero-initializes weights.
    """

    def __init__(self, channels: int, classes: int, hidden1: int = 512,
                 hidden2: int = 256, dropout_rate: float = 0.5, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if min(channels, classes, hidden1, hidden2) < 1:
            raise ConfigError(
                f"head dims must be positive, got channels={channels} classes={classes} "
                f"hidden={hidden1},{hidden2}"
            )
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.classes = classes
        self.dropout_rate = dropout_rate

        def weight(out_d, in_d):
            if rng is None:
                return zero_param((out_d, in_d), dtype)
            return kaiming_param((out_d, in_d), in_d, rng, dtype)

        self.w1 = weight(hidden1, channels)
        self.b1 = zero_param((hidden1,), dtype)
        self.w2 = weight(hidden2, hidden1)
        self.b2 = zero_param((hidden2,), dtype)
        self.w3 = weight(classes, hidden2)
        self.b3 = zero_param((classes,), dtype)

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


def head_forward(feat: Tensor, p: HeadParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Pool spatially and classify; returns logits of shape (n, classes).

    ``rng`` is required only when ``training`` is true and the dropout rate
    is nonzero; evaluation is deterministic.
    """
    drop = p.dropout_rate if training else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("training-mode head_forward with dropout needs an rng")
    pooled = global_avg_pool(feat)
    hidden = relu(linear(pooled, p.w1, p.b1))
    if drop > 0.0:
        hidden = dropout(hidden, drop, rng)
    hidden = relu(linear(hidden, p.w2, p.b2))
    if drop > 0.0:
        hidden = dropout(hidden, drop, rng)
    return linear(hidden, p.w3, p.b3)
