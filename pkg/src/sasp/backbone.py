"""Feature-map producers: a small trainable CNN and a precomputed-feature file.

The classifier consumes a (n, channels, h, w) feature map. At desk scale it
comes either from :class:`TinyBackbone` (a ladder of conv/relu/2x2-mean
stages trained end to end) or from a binary feature file that stands in for
a large pretrained encoder while keeping the exact same interface.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FeatureFileError
from .tensor import Param, Tensor, avg_pool2x2, conv2d, kaiming_param, relu, zero_param

FEATURE_MAGIC = b"SASPFEAT"
FEATURE_VERSION = 1

_DEFAULT_WIDTHS = (16, 32, 64)


@dataclass(frozen=True)
class BackboneConfig:
    """Where the feature map comes from and its exact shape.

    ``mode`` is "precomputed" (features are fed in directly) or "tiny-cnn"
    (features are extracted from 3-channel images of input_h x input_w).
    ``stage_widths`` fixes the tiny CNN ladder; None derives a default that
    starts at 16 and ends at ``out_channels``.
    """

    mode: str = "precomputed"
    out_channels: int = 2048
    out_h: int = 7
    out_w: int = 7
    input_h: int = 224
    input_w: int = 224
    stage_widths: tuple[int, ...] | None = None


def _halvings(size: int, target: int, axis: str) -> int:
    start = size
    steps = 0
    while size > target and size % 2 == 0:
        size //= 2
        steps += 1
    if size != target:
        raise ConfigError(
            f"input {axis}={start} cannot reach {target} by repeated halving"
        )
    return steps


def stage_plan(cfg: BackboneConfig) -> tuple[int, ...]:
    """Resolve the per-stage channel widths, or raise ConfigError."""
    if cfg.mode != "tiny-cnn":
        raise ConfigError(f"stage plan requested for mode {cfg.mode!r}")
    steps_h = _halvings(cfg.input_h, cfg.out_h, "height")
    steps_w = _halvings(cfg.input_w, cfg.out_w, "width")
    if steps_h != steps_w:
        raise ConfigError(
            f"height needs {steps_h} halvings but width needs {steps_w}; "
            "the stage ladder must shrink both equally"
        )
    if steps_h == 0:
        raise ConfigError("tiny-cnn needs at least one 2x downsampling stage")
    if cfg.stage_widths is not None:
        widths = tuple(cfg.stage_widths)
        if len(widths) != steps_h:
            raise ConfigError(
                f"{len(widths)} stage widths given but the resolution requires {steps_h} stages"
            )
        if widths[-1] != cfg.out_channels:
            raise ConfigError(
                f"last stage width {widths[-1]} must equal out_channels {cfg.out_channels}"
            )
        if min(widths) < 1:
            raise ConfigError(f"stage widths must be positive, got {widths}")
        return widths
    widths = list(_DEFAULT_WIDTHS)
    while len(widths) < steps_h - 1:
        widths.append(widths[-1] * 2)
    return tuple(widths[: steps_h - 1]) + (cfg.out_channels,)


class TinyBackbone:
    """Stack of (3x3 conv, relu, 2x2 mean-downsample) stages.

    Participates in the gradient tape, so the whole classifier can be
    trained end to end from images.
    """

    def __init__(self, cfg: BackboneConfig, *, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        widths = stage_plan(cfg)
        self.cfg = cfg
        self.widths = widths
        self.kernels: list[Param] = []
        self.biases: list[Param] = []
        in_c = 3
        for out_c in widths:
            shape = (out_c, in_c, 3, 3)
            if rng is None:
                self.kernels.append(zero_param(shape, dtype))
            else:
                self.kernels.append(kaiming_param(shape, in_c * 9, rng, dtype))
            self.biases.append(zero_param((out_c,), dtype))
            in_c = out_c

    def params(self) -> list[Param]:
        out: list[Param] = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def extract(self, x: Tensor) -> Tensor:
        """Images (n, 3, input_h, input_w) -> features (n, out_channels, out_h, out_w)."""
        expected = (3, self.cfg.input_h, self.cfg.input_w)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"backbone input {x.shape} does not match (n, {expected})")
        for k, b in zip(self.kernels, self.biases):
            x = avg_pool2x2(relu(conv2d(x, k, b, pad=(1, 1))))
        return x


# ---------------------------------------------------------------------------
# precomputed-feature files

@dataclass
class FeatureRecord:
    sample_id: str
    label: int
    features: np.ndarray  # (channels, h, w) float32


@dataclass
class FeatureSet:
    """In-memory contents of one feature file."""

    channels: int
    height: int
    width: int
    num_classes: int
    records: list[FeatureRecord] = field(default_factory=list)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All records as one (count, c, h, w) float32 array plus labels."""
        if not self.records:
            shape = (0, self.channels, self.height, self.width)
            return np.zeros(shape, dtype=np.float32), np.zeros(0, dtype=np.int64)
        feats = np.stack([r.features for r in self.records]).astype(np.float32, copy=False)
        labels = np.array([r.label for r in self.records], dtype=np.int64)
        return feats, labels


def save_features(path, fs: FeatureSet) -> None:
    """Write the little-endian binary feature format.

    Layout: magic "SASPFEAT", u32 version, u32 channels, u32 h, u32 w,
    u32 class count, u64 record count, then per record a u32-length UTF-8
    sample id, u32 label, and channels*h*w float32 values.
    """
    expected = (fs.channels, fs.height, fs.width)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIIIIQ", FEATURE_VERSION, fs.channels, fs.height,
                            fs.width, fs.num_classes, len(fs.records)))
        for rec in fs.records:
            if rec.features.shape != expected:
                raise ValueError(
                    f"record {rec.sample_id!r} has features {rec.features.shape}, expected {expected}"
                )
            if not 0 <= rec.label < fs.num_classes:
                raise ValueError(
                    f"record {rec.sample_id!r} label {rec.label} out of range for {fs.num_classes} classes"
                )
            ident = rec.sample_id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<I", rec.label))
            f.write(rec.features.astype("<f4", copy=False).tobytes())


def load_features(path) -> FeatureSet:
    """Read a feature file back; raises FeatureFileError with a byte offset."""
    with open(path, "rb") as f:
        data = f.read()

    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FeatureFileError(
                f"truncated {what} at byte {offset}: wanted {n} bytes, file has {len(data) - offset} left"
            )
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    magic = take(len(FEATURE_MAGIC), "magic")
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r} at byte 0, expected {FEATURE_MAGIC!r}")
    version, channels, height, width, num_classes, count = struct.unpack(
        "<IIIIIQ", take(28, "header")
    )
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported version {version} at byte 8")
    if min(channels, height, width) < 1 or num_classes < 1:
        raise FeatureFileError(
            f"invalid header dims c={channels} h={height} w={width} k={num_classes} at byte 12"
        )

    per_record = channels * height * width
    records: list[FeatureRecord] = []
    for i in range(count):
        id_offset = offset
        (id_len,) = struct.unpack("<I", take(4, f"record {i} id length"))
        if id_len > 1 << 20:
            raise FeatureFileError(f"implausible id length {id_len} at byte {id_offset}")
        ident = take(id_len, f"record {i} id").decode("utf-8")
        label_offset = offset
        (label,) = struct.unpack("<I", take(4, f"record {i} label"))
        if label >= num_classes:
            raise FeatureFileError(
                f"record {i} ({ident!r}) label {label} out of range for "
                f"{num_classes} classes at byte {label_offset}"
            )
        payload = take(per_record * 4, f"record {i} payload")
        feats = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width).copy()
        records.append(FeatureRecord(ident, int(label), feats))
    if offset != len(data):
        raise FeatureFileError(f"{len(data) - offset} trailing bytes at byte {offset}")
    return FeatureSet(channels, height, width, num_classes, records)
