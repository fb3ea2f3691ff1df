"""Channel semantic weaving: bottleneck channel gate over the feature map.

Each channel is summarized by its spatial mean, pushed through a
reduce/restore pair of affine layers, and squashed to a weight in (0, 1)
that rescales the channel everywhere. Gating never amplifies magnitude and
is invariant to spatial permutations of the input.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import (
    Param,
    Tensor,
    global_avg_pool,
    kaiming_param,
    linear,
    relu,
    scale_channels,
    sigmoid,
    zero_param,
)


class CswParams:
    """Bottleneck weights; ``channels`` must be divisible by ``reduction``.

    ``rng=None`` zero-initializes everything, which pins every gate at 0.5.
    """

    def __init__(self, channels: int, reduction: int = 16, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if channels < 1:
            raise ConfigError(f"channel count must be positive, got {channels}")
        if channels % reduction != 0:
            raise ConfigError(
                f"channel count {channels} is not divisible by the reduction ratio {reduction}"
            )
        self.channels = channels
        self.reduction = reduction
        hidden = channels // reduction
        if rng is None:
            self.w1 = zero_param((hidden, channels), dtype)
            self.w2 = zero_param((channels, hidden), dtype)
        else:
            self.w1 = kaiming_param((hidden, channels), channels, rng, dtype)
            self.w2 = kaiming_param((channels, hidden), hidden, rng, dtype)
        self.b1 = zero_param((hidden,), dtype)
        self.b2 = zero_param((channels,), dtype)

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


def csw_forward(feat: Tensor, p: CswParams) -> tuple[Tensor, Tensor]:
    """Gate ``feat`` per channel; returns (gated map, gates).

    The gates tensor is (n, channels) with every entry strictly inside
    (0, 1); it is returned for diagnostics and export.
    """
    if feat.shape[1] != p.channels:
        raise ValueError(f"input {feat.shape} does not match the configured {p.channels} channels")
    summary = global_avg_pool(feat)
    hidden = relu(linear(summary, p.w1, p.b1))
    gates = sigmoid(linear(hidden, p.w2, p.b2))
    return scale_channels(feat, gates), gates
