"""Model assembly: backbone (optional) -> aggregator -> channel gate -> head."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, TinyBackbone, stage_plan
from .csw import CswParams, csw_forward
from .epa import EpaParams, epa_forward
from .errors import CheckpointError, ConfigError
from .head import HeadParams, head_forward
from .tensor import Param, Tensor

CHECKPOINT_MAGIC = b"SASPCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SaspConfig:
    """Architecture hyperparameters of the classification head."""

    channels: int = 2048
    feature_h: int = 7
    feature_w: int = 7
    classes: int = 200
    epa_reduction: int = 4
    csw_reduction: int = 16
    head_hidden1: int = 512
    head_hidden2: int = 256
    dropout: float = 0.5


class SaspModel:
    """Full classifier; feeds images or precomputed features to the head.

    With a tiny-cnn backbone config the forward input is an image batch;
    otherwise it is a feature batch of shape (n, channels, feature_h,
    feature_w). ``rng=None`` zero-initializes every parameter.
    """

    def __init__(self, cfg: SaspConfig, backbone_cfg: BackboneConfig | None = None, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.backbone_cfg = backbone_cfg
        self.backbone: TinyBackbone | None = None
        if backbone_cfg is not None and backbone_cfg.mode == "tiny-cnn":
            if (backbone_cfg.out_channels, backbone_cfg.out_h, backbone_cfg.out_w) != (
                cfg.channels, cfg.feature_h, cfg.feature_w
            ):
                raise ConfigError(
                    f"backbone output ({backbone_cfg.out_channels}, {backbone_cfg.out_h}, "
                    f"{backbone_cfg.out_w}) does not match the model "
                    f"({cfg.channels}, {cfg.feature_h}, {cfg.feature_w})"
                )
            self.backbone = TinyBackbone(backbone_cfg, rng=rng, dtype=dtype)
        self.epa = EpaParams(cfg.channels, cfg.epa_reduction, rng=rng, dtype=dtype)
        self.csw = CswParams(cfg.channels, cfg.csw_reduction, rng=rng, dtype=dtype)
        self.head = HeadParams(cfg.channels, cfg.classes, cfg.head_hidden1,
                               cfg.head_hidden2, cfg.dropout, rng=rng, dtype=dtype)

    def params(self) -> list[Param]:
        out: list[Param] = []
        if self.backbone is not None:
            out.extend(self.backbone.params())
        out.extend(self.epa.params())
        out.extend(self.csw.params())
        out.extend(self.head.params())
        return out

    def features(self, x: Tensor) -> Tensor:
        """Resolve the aggregator input from images or pass features through."""
        if self.backbone is not None:
            return self.backbone.extract(x)
        expected = (self.cfg.channels, self.cfg.feature_h, self.cfg.feature_w)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"feature input {x.shape} does not match (n, {expected})")
        return x

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        feat = self.features(x)
        aggregated = epa_forward(feat, self.epa)
        gated, _ = csw_forward(aggregated, self.csw)
        return head_forward(gated, self.head, training=training, rng=rng)

    def gates(self, x: Tensor) -> np.ndarray:
        """Channel gate values (n, channels) for diagnostics; no taping."""
        from .tensor import no_grad

        with no_grad():
            feat = self.features(x)
            aggregated = epa_forward(feat, self.epa)
            _, gate = csw_forward(aggregated, self.csw)
        return gate.data


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian): magic "SASPCKPT", u32 version, the SaspConfig block
# (u32 channels, feature_h, feature_w, classes, epa_reduction, csw_reduction,
# head_hidden1, head_hidden2; f32 dropout), a backbone block (u8 flag; for
# tiny-cnn u32 input_h, input_w, stage count, then the stage widths), and then
# every parameter in model.params() order as u32 rank, u32 dims, f32 data.

def save_checkpoint(path, model: SaspModel) -> None:
    cfg = model.cfg
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack(
            "<IIIIIIIIf",
            cfg.channels, cfg.feature_h, cfg.feature_w, cfg.classes,
            cfg.epa_reduction, cfg.csw_reduction, cfg.head_hidden1, cfg.head_hidden2,
            cfg.dropout,
        ))
        if model.backbone is not None:
            bc = model.backbone.cfg
            widths = model.backbone.widths
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<III", bc.input_h, bc.input_w, len(widths)))
            f.write(struct.pack(f"<{len(widths)}I", *widths))
        else:
            f.write(struct.pack("<B", 0))
        for p in model.params():
            dims = p.data.shape
            f.write(struct.pack("<I", len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            f.write(p.data.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> SaspModel:
    with open(path, "rb") as f:
        data = f.read()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointError(
                f"truncated {what} at byte {offset}: wanted {n} bytes, "
                f"file has {len(data) - offset} left"
            )
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    magic = take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version} at byte 8")
    fields = struct.unpack("<IIIIIIIIf", take(36, "model config"))
    cfg = SaspConfig(
        channels=fields[0], feature_h=fields[1], feature_w=fields[2], classes=fields[3],
        epa_reduction=fields[4], csw_reduction=fields[5],
        head_hidden1=fields[6], head_hidden2=fields[7], dropout=float(fields[8]),
    )
    (has_backbone,) = struct.unpack("<B", take(1, "backbone flag"))
    backbone_cfg = None
    if has_backbone:
        input_h, input_w, n_stages = struct.unpack("<III", take(12, "backbone config"))
        widths = struct.unpack(f"<{n_stages}I", take(4 * n_stages, "stage widths"))
        backbone_cfg = BackboneConfig(
            mode="tiny-cnn", out_channels=cfg.channels, out_h=cfg.feature_h,
            out_w=cfg.feature_w, input_h=input_h, input_w=input_w, stage_widths=widths,
        )
        stage_plan(backbone_cfg)  # re-validate the ladder before building

    model = SaspModel(cfg, backbone_cfg)  # zero-initialized, then overwritten
    for i, p in enumerate(model.params()):
        where = offset
        (rank,) = struct.unpack("<I", take(4, f"param {i} rank"))
        if rank < 1 or rank > 4:
            raise CheckpointError(f"param {i} has implausible rank {rank} at byte {where}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"param {i} dims"))
        if dims != p.data.shape:
            raise CheckpointError(
                f"param {i} shape {dims} does not match expected {p.data.shape} at byte {where}"
            )
        count = int(np.prod(dims))
        payload = take(count * 4, f"param {i} payload")
        p.data[...] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes at byte {offset}")
    return model
