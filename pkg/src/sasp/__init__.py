"""Strip-aware spatial perception classifier.

A self-contained implementation of a fine-grained classification head: a
five-branch strip-pooling aggregator (EPA) followed by a bottleneck channel
gate (CSW) and an MLP head, built on a minimal tape-based reverse-mode
gradient core, with a momentum trainer and a CLI harness.
"""
from .backbone import (
    BackboneConfig,
    FeatureRecord,
    FeatureSet,
    TinyBackbone,
    load_features,
    save_features,
)
from .csw import CswParams, csw_forward
from .data import (
    DatasetManifest,
    LoadedDataset,
    ManifestRecord,
    ingest_cub,
    load_feature_dataset,
    load_image_dataset,
    load_manifest,
    save_manifest,
    synth_dataset,
)
from .epa import EpaParams, epa_branch_responses, epa_forward
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    FeatureFileError,
    IngestError,
    ManifestError,
    NanLossError,
    SaspError,
    TapeError,
)
from .head import HeadParams, head_forward
from .model import SaspConfig, SaspModel, load_checkpoint, save_checkpoint
from .tensor import (
    Param,
    Tape,
    Tensor,
    adaptive_avg_pool,
    add,
    avg_pool2x2,
    bilinear_upsample,
    concat_channels,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    no_grad,
    relu,
    scale_channels,
    sigmoid,
    tensor_sum,
)
from .train import (
    TrainConfig,
    TrainLog,
    cross_entropy,
    derived_rng,
    evaluate,
    schedule,
    sgd_momentum_step,
    softmax,
    train,
    zero_grads,
)

__version__ = "0.1.0"
