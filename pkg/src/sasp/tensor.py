"""Rank-2/rank-4 tensors with recorded reverse-mode gradients.

Each differentiable operation allocates a fresh output tensor and, when a
:class:`Tape` is active on the current thread, records a closure that routes
the output gradient back to the inputs. Replaying the closures newest-first
is the backward pass; because the forward pass executes sequentially, the
reverse recording order is a valid topological order. A tensor touched
outside any active tape receives no gradient.

Data is float32 (training) or float64 (gradient-check builds); dtype follows
the arrays fed in.
"""
from __future__ import annotations

import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import TapeError

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "no_grad",
    "conv2d",
    "adaptive_avg_pool",
    "avg_pool2x2",
    "bilinear_upsample",
    "global_avg_pool",
    "relu",
    "sigmoid",
    "add",
    "concat_channels",
    "scale_channels",
    "linear",
    "dropout",
    "tensor_sum",
    "kaiming_param",
    "zero_param",
]

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus an additively accumulated gradient buffer.

    ``grad`` stays ``None`` until a backward pass routes a gradient here;
    gradients from multiple uses of the same tensor add up.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Tensor):
    """Trainable tensor carrying a momentum slot for the optimizer.

    Rank >= 2 params are weights (weight decay applies); rank-1 params are
    biases and are excluded from decay.
    """

    __slots__ = ("momentum_buf",)

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype)
        self.momentum_buf = np.zeros_like(self.data)


class Tape:
    """Ordered record of backward rules for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss. One tape must only be replayed from
    a single thread; distinct tapes are independent.
    """

    def __init__(self) -> None:
        self._rules: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def record(self, rule) -> None:
        """Append a backward closure; used by every differentiable op."""
        self._rules.append(rule)

    def __len__(self) -> int:
        return len(self._rules)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay the rules newest-first."""
        if not self._rules:
            raise TapeError("backward on an empty tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rule in reversed(self._rules):
            rule()


class no_grad:
    """Context that suppresses gradient recording on the current thread."""

    def __enter__(self) -> "no_grad":
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False


def _accumulate(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _require_rank(t: Tensor, rank: int, what: str) -> None:
    if t.data.ndim != rank:
        raise ValueError(f"{what} must be rank {rank}, got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Cross-correlate ``x`` with ``kernel`` (stride 1) and add a per-channel bias.

    ``x`` is (n, c, h, w), ``kernel`` (out_c, in_c, kh, kw) with odd kh/kw,
    ``bias`` (out_c,). ``pad`` zero-pads the two spatial axes symmetrically.
    """
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    _require_rank(bias, 1, "conv2d bias")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    ph, pw = pad
    if c != ic:
        raise ValueError(
            f"conv2d: input {x.shape} has {c} channels but kernel {kernel.shape} expects {ic}"
        )
    if bias.shape[0] != oc:
        raise ValueError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if ph < 0 or pw < 0:
        raise ValueError(f"conv2d: negative padding {pad}")
    oh = h + 2 * ph - kh + 1
    ow = w + 2 * pw - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: non-positive output size {oh}x{ow} "
            f"(input {x.shape}, kernel {kernel.shape}, pad {pad})"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n, c, oh, ow, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    kmat = kernel.data.reshape(oc, c * kh * kw)
    out_data = (cols @ kmat.T).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = Tensor(out_data)

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
            _accumulate(kernel, (gmat.T @ cols).reshape(oc, c, kh, kw))
            gcols = (gmat @ kmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + oh, v:v + ow] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            _accumulate(x, gxp[:, :, ph:ph + h, pw:pw + w])

        tape.record(rule)
    return out


# ---------------------------------------------------------------------------
# pooling and resampling

def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool to a strip or to a single cell.

    Supported outputs: (h, 1) row strips (mean over each row), (1, w) column
    strips (mean over each column), and (1, 1) global. The backward rule
    spreads the gradient uniformly over each pooled window.
    """
    _require_rank(x, 4, "adaptive_avg_pool input")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, 1):
        out = Tensor(x.data.mean(axis=3, keepdims=True))
        scale = w
    elif (out_h, out_w) == (1, w):
        out = Tensor(x.data.mean(axis=2, keepdims=True))
        scale = h
    elif (out_h, out_w) == (1, 1):
        out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
        scale = h * w
    else:
        raise ValueError(
            f"adaptive_avg_pool: output {out_h}x{out_w} not supported for input {x.shape}; "
            f"expected ({h},1), (1,{w}) or (1,1)"
        )

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad / scale)  # broadcasts back over the pooled window

        tape.record(rule)
    return out


def avg_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean downsample; spatial dims must be even."""
    _require_rank(x, 4, "avg_pool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2: spatial dims must be even, got {x.shape}")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            gx = np.broadcast_to(
                g[:, :, :, None, :, None] / 4, (n, c, h // 2, 2, w // 2, 2)
            ).reshape(n, c, h, w)
            _accumulate(x, gx)

        tape.record(rule)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, (n, c, h, w) -> rank-2 (n, c)."""
    _require_rank(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad[:, :, None, None] / (h * w))

        tape.record(rule)
    return out


def _interp_axis(n_in: int, n_out: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel source coordinates for 1-d linear interpolation.

    Returns clamped lower/upper source indices and the fractional weight of
    the upper index. Where both indices clamp to the same source cell the
    fraction is forced to 0 so replication is exact.
    """
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos)
    frac = pos - base
    i0 = np.clip(base.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, n_in - 1)
    frac = np.where(i0 == i1, 0.0, frac)
    return i0, i1, frac.astype(dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsample with half-pixel coordinate mapping.

    Requires out_h >= h and out_w >= w. A singleton source axis is replicated
    exactly along that axis.
    """
    _require_rank(x, 4, "bilinear_upsample input")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(
            f"bilinear_upsample: target {out_h}x{out_w} is smaller than source {h}x{w}"
        )
    y0, y1, ty = _interp_axis(h, out_h, x.dtype)
    x0, x1, tx = _interp_axis(w, out_w, x.dtype)
    wy0 = (1.0 - ty)[None, None, :, None]
    wy1 = ty[None, None, :, None]
    wx0 = (1.0 - tx)[None, None, None, :]
    wx1 = tx[None, None, None, :]

    rows = x.data[:, :, y0, :] * wy0 + x.data[:, :, y1, :] * wy1  # (n, c, out_h, w)
    out = Tensor(rows[:, :, :, x0] * wx0 + rows[:, :, :, x1] * wx1)

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            grows = np.zeros((n, c, out_h, w), dtype=x.dtype)
            cols_all = (slice(None), slice(None), slice(None))
            np.add.at(grows, (*cols_all, x0), g * wx0)
            np.add.at(grows, (*cols_all, x1), g * wx1)
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), y0, slice(None)), grows * wy0)
            np.add.at(gx, (slice(None), slice(None), y1, slice(None)), grows * wy1)
            _accumulate(x, gx)

        tape.record(rule)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops

def relu(x: Tensor) -> Tensor:
    """max(0, x); the gradient at exactly 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad * (x.data > 0))

        tape.record(rule)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic 1 / (1 + exp(-x)), computed branch-wise so it never overflows."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad * out.data * (1.0 - out.data))

        tape.record(rule)
    return out


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)
    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad)
            _accumulate(y, out.grad)

        tape.record(rule)
    return out


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    """Stack two rank-4 tensors along the channel axis."""
    _require_rank(x, 4, "concat_channels input")
    _require_rank(y, 4, "concat_channels input")
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {x.shape} vs {y.shape}")
    seam = x.shape[1]
    out = Tensor(np.concatenate([x.data, y.data], axis=1))

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            _accumulate(x, g[:, :seam])
            _accumulate(y, g[:, seam:])

        tape.record(rule)
    return out


def scale_channels(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply each channel map by a per-sample scalar; alpha is (n, c)."""
    _require_rank(x, 4, "scale_channels input")
    _require_rank(alpha, 2, "scale_channels weights")
    n, c = x.shape[:2]
    if alpha.shape != (n, c):
        raise ValueError(
            f"scale_channels: weights {alpha.shape} do not match input {x.shape}"
        )
    out = Tensor(x.data * alpha.data[:, :, None, None])

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * alpha.data[:, :, None, None])
            _accumulate(alpha, (g * x.data).sum(axis=(2, 3)))

        tape.record(rule)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias; x is (n, d_in), weight (d_out, d_in)."""
    _require_rank(x, 2, "linear input")
    _require_rank(weight, 2, "linear weight")
    _require_rank(bias, 1, "linear bias")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape[0] != weight.shape[0]:
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            g = out.grad
            if g is None:
                return
            _accumulate(x, g @ weight.data)
            _accumulate(weight, g.T @ x.data)
            _accumulate(bias, g.sum(axis=0))

        tape.record(rule)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale kept values by 1/(1-rate).

    With ``rate == 0`` this is the identity and draws nothing from ``rng``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * (1.0 / (1.0 - rate))
    out = Tensor(x.data * mask)

    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad * mask)

        tape.record(rule)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a rank-0 tensor."""
    out = Tensor(np.asarray(x.data.sum()))
    tape = _active_tape()
    if tape is not None:

        def rule() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad)

        tape.record(rule)
    return out


# ---------------------------------------------------------------------------
# parameter initializers

def kaiming_param(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
                  dtype=np.float32) -> Param:
    """Kaiming-uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return Param(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zero_param(shape: tuple[int, ...], dtype=np.float32) -> Param:
    return Param(np.zeros(shape, dtype=dtype))
