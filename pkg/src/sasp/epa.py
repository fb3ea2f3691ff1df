"""Extensional perception aggregator: five-branch strip-context fusion.

The module mixes a local 3x3 view of the feature map with whole-row and
whole-column context. Two branches pool the full-channel map into strips,
convolve, and bilinearly stretch the strips back to the full grid; two more
do the same on a channel-reduced copy with 1x3 / 3x1 kernels. The fused
branches are projected back to the input width by a 1x1 convolution and
added residually, so a zero-initialized aggregator is the identity on
non-negative inputs.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import (
    Param,
    Tensor,
    adaptive_avg_pool,
    add,
    bilinear_upsample,
    concat_channels,
    conv2d,
    kaiming_param,
    no_grad,
    relu,
    zero_param,
)

BRANCH_NAMES = ("loc", "h", "v", "sh", "sv", "fused1", "fused2")


class EpaParams:
    """Kernels and biases of the aggregator.

    ``channels`` must be divisible by ``reduction`` (the two asymmetric
    branches run at channels/reduction width). Pass ``rng`` for
    Kaiming-uniform kernels; with ``rng=None`` everything starts at zero,
    which keeps the module an exact identity on non-negative inputs.
    """

    def __init__(self, channels: int, reduction: int = 4, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if channels < 1:
            raise ConfigError(f"channel count must be positive, got {channels}")
        if channels % reduction != 0:
            raise ConfigError(
                f"channel count {channels} is not divisible by the reduction factor {reduction}"
            )
        self.channels = channels
        self.reduced = channels // reduction

        def kernel(out_c, in_c, kh, kw):
            shape = (out_c, in_c, kh, kw)
            if rng is None:
                return zero_param(shape, dtype)
            return kaiming_param(shape, in_c * kh * kw, rng, dtype)

        c, cr = channels, self.reduced
        self.k_loc = kernel(c, c, 3, 3)
        self.b_loc = zero_param((c,), dtype)
        self.k_h = kernel(c, c, 3, 3)
        self.b_h = zero_param((c,), dtype)
        self.k_v = kernel(c, c, 3, 3)
        self.b_v = zero_param((c,), dtype)
        self.k_reduce = kernel(cr, c, 1, 1)
        self.b_reduce = zero_param((cr,), dtype)
        self.k_sh = kernel(cr, cr, 1, 3)
        self.b_sh = zero_param((cr,), dtype)
        self.k_sv = kernel(cr, cr, 3, 1)
        self.b_sv = zero_param((cr,), dtype)
        self.k_proj = kernel(c, c + cr, 1, 1)
        self.b_proj = zero_param((c,), dtype)

    def params(self) -> list[Param]:
        return [
            self.k_loc, self.b_loc,
            self.k_h, self.b_h,
            self.k_v, self.b_v,
            self.k_reduce, self.b_reduce,
            self.k_sh, self.b_sh,
            self.k_sv, self.b_sv,
            self.k_proj, self.b_proj,
        ]


def _pipeline(feat: Tensor, p: EpaParams) -> tuple[Tensor, dict[str, Tensor]]:
    n, c, h, w = feat.shape
    if c != p.channels:
        raise ValueError(f"input {feat.shape} does not match the configured {p.channels} channels")

    local = conv2d(feat, p.k_loc, p.b_loc, pad=(1, 1))

    # whole-row / whole-column context at full channel width
    row_strip = adaptive_avg_pool(feat, h, 1)
    row_ctx = bilinear_upsample(conv2d(row_strip, p.k_h, p.b_h, pad=(1, 1)), h, w)
    col_strip = adaptive_avg_pool(feat, 1, w)
    col_ctx = bilinear_upsample(conv2d(col_strip, p.k_v, p.b_v, pad=(1, 1)), h, w)

    # asymmetric-kernel strips on the channel-reduced copy
    slim = conv2d(feat, p.k_reduce, p.b_reduce)
    asym_h = bilinear_upsample(
        conv2d(adaptive_avg_pool(slim, 1, w), p.k_sh, p.b_sh, pad=(0, 1)), h, w
    )
    asym_v = bilinear_upsample(
        conv2d(adaptive_avg_pool(slim, h, 1), p.k_sv, p.b_sv, pad=(1, 0)), h, w
    )

    fused_full = relu(add(add(local, row_ctx), col_ctx))
    fused_slim = relu(add(asym_h, asym_v))
    merged = conv2d(concat_channels(fused_full, fused_slim), p.k_proj, p.b_proj)
    out = relu(add(feat, merged))

    branches = {
        "loc": local,
        "h": row_ctx,
        "v": col_ctx,
        "sh": asym_h,
        "sv": asym_v,
        "fused1": fused_full,
        "fused2": fused_slim,
    }
    return out, branches


def epa_forward(feat: Tensor, p: EpaParams) -> Tensor:
    """Run the aggregator; output shape equals input shape and is >= 0."""
    return _pipeline(feat, p)[0]


def epa_branch_responses(feat: Tensor, p: EpaParams) -> dict[str, Tensor]:
    """Per-branch activations for diagnostics, computed without taping.

    Keys: loc / h / v (full width), sh / sv / fused2 (reduced width), fused1.
    """
    with no_grad():
        _, branches = _pipeline(feat, p)
    return branches
