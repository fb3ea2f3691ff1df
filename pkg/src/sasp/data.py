"""Dataset harness: manifests, synthetic feature fixtures, CUB-style ingest.

A manifest is the single source of truth for what gets trained on: ordered
records of (sample id, source, label, split). Sources are either integer
offsets into a feature file or image paths relative to a dataset root.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import FeatureRecord, FeatureSet, load_features, save_features
from .errors import DataError, IngestError, ManifestError

MANIFEST_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class ManifestRecord:
    sample_id: str
    source: str | int  # image path (relative to the dataset root) or feature index
    label: int
    split: str


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    records: list[ManifestRecord] = field(default_factory=list)

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ManifestError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ManifestError(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )
        seen: dict[str, str] = {}
        train_classes: set[int] = set()
        referenced: set[int] = set()
        for r in self.records:
            if not 0 <= r.label < self.num_classes:
                raise ManifestError(
                    f"record {r.sample_id!r} label {r.label} out of range for {self.num_classes} classes"
                )
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.sample_id!r} has unknown split {r.split!r}")
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample id {r.sample_id!r}")
            seen[r.sample_id] = r.split
            referenced.add(r.label)
            if r.split == "train":
                train_classes.add(r.label)
        missing = referenced - train_classes
        if missing:
            raise ManifestError(
                f"classes {sorted(missing)} appear only outside the train split"
            )


def save_manifest(path, manifest: DatasetManifest) -> None:
    manifest.validate()
    doc = {
        "version": MANIFEST_VERSION,
        "num_classes": manifest.num_classes,
        "class_names": manifest.class_names,
        "records": [
            {"sample_id": r.sample_id, "source": r.source, "label": r.label, "split": r.split}
            for r in manifest.records
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON: {e}") from e
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    try:
        manifest = DatasetManifest(
            num_classes=int(doc["num_classes"]),
            class_names=list(doc["class_names"]),
            records=[
                ManifestRecord(r["sample_id"], r["source"], int(r["label"]), r["split"])
                for r in doc["records"]
            ],
        )
    except (KeyError, TypeError) as e:
        raise ManifestError(f"{path}: malformed manifest: {e}") from e
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# synthetic feature fixture

def synth_dataset(num_classes: int, per_class: int, channels: int, height: int,
                  width: int, seed: int, features_path) -> DatasetManifest:
    """Write a linearly separable synthetic feature file and return its manifest.

    Each class gets a gaussian cloud around its own mean pattern; the class
    means are rescaled so that the closest pair sits at least 4 noise
    standard deviations apart (per-element RMS), which makes a
    nearest-centroid rule exact. Samples per class beyond the first
    ``per_class - max(1, per_class // 5)`` go to the test split; a single
    sample per class goes to train with a warning.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if min(channels, height, width) < 1:
        raise ValueError(f"feature dims must be positive, got ({channels},{height},{width})")

    rng = np.random.default_rng(seed)
    noise_std = 0.25
    dim = channels * height * width
    means = rng.normal(0.0, 1.0, size=(num_classes, channels, height, width))
    if num_classes > 1:
        flat = means.reshape(num_classes, dim)
        sq = (flat ** 2).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T)
        np.fill_diagonal(d2, np.inf)
        min_rms = np.sqrt(max(d2.min(), 0.0) / dim)
        target = 4.0 * noise_std
        if min_rms < target:
            means *= target / max(min_rms, 1e-12)

    if per_class == 1:
        warnings.warn(
            "per_class=1: every sample goes to the train split, no test split exists",
            stacklevel=2,
        )
        n_test = 0
    else:
        n_test = max(1, per_class // 5)

    records: list[FeatureRecord] = []
    manifest_records: list[ManifestRecord] = []
    index = 0
    for c in range(num_classes):
        for i in range(per_class):
            feats = (means[c] + rng.normal(0.0, noise_std, size=means[c].shape)).astype(np.float32)
            split = "test" if i >= per_class - n_test else "train"
            sample_id = f"synth-c{c:03d}-s{i:03d}"
            records.append(FeatureRecord(sample_id, c, feats))
            manifest_records.append(ManifestRecord(sample_id, index, c, split))
            index += 1

    save_features(features_path, FeatureSet(channels, height, width, num_classes, records))
    manifest = DatasetManifest(
        num_classes=num_classes,
        class_names=[f"class_{c:03d}" for c in range(num_classes)],
        records=manifest_records,
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# CUB-style directory ingest

def _read_index(root: Path, name: str, want_fields: int) -> list[tuple[int, list[str]]]:
    path = root / name
    if not path.is_file():
        raise IngestError(f"missing index file: {path}")
    rows: list[tuple[int, list[str]]] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < want_fields:
                raise IngestError(f"{path}:{lineno}: expected {want_fields} fields, got {len(parts)}")
            rows.append((lineno, parts))
    return rows


def ingest_cub(root) -> DatasetManifest:
    """Build a manifest from the standard CUB-200-2011 directory layout.

    Needs classes.txt, images.txt, image_class_labels.txt and
    train_test_split.txt under ``root``, plus the image files themselves
    under ``root/images``. Every inconsistency is reported with the file and
    line that caused it.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root is not a directory: {root}")

    class_rows = _read_index(root, "classes.txt", 2)
    class_names: dict[int, str] = {}
    for lineno, parts in class_rows:
        try:
            cid = int(parts[0])
        except ValueError:
            raise IngestError(f"{root / 'classes.txt'}:{lineno}: bad class id {parts[0]!r}") from None
        if cid in class_names:
            raise IngestError(f"{root / 'classes.txt'}:{lineno}: duplicate class id {cid}")
        class_names[cid] = parts[1]
    num_classes = len(class_names)
    if num_classes == 0:
        raise IngestError(f"{root / 'classes.txt'}: no classes listed")
    if sorted(class_names) != list(range(1, num_classes + 1)):
        raise IngestError(f"{root / 'classes.txt'}: class ids must be 1..{num_classes}")

    image_rows = _read_index(root, "images.txt", 2)
    paths: dict[int, str] = {}
    order: list[int] = []
    for lineno, parts in image_rows:
        try:
            iid = int(parts[0])
        except ValueError:
            raise IngestError(f"{root / 'images.txt'}:{lineno}: bad image id {parts[0]!r}") from None
        if iid in paths:
            raise IngestError(f"{root / 'images.txt'}:{lineno}: duplicate image id {iid}")
        rel = parts[1]
        if not (root / "images" / rel).is_file():
            raise IngestError(
                f"{root / 'images.txt'}:{lineno}: image path does not exist: images/{rel}"
            )
        paths[iid] = rel
        order.append(iid)

    labels: dict[int, int] = {}
    for lineno, parts in _read_index(root, "image_class_labels.txt", 2):
        try:
            iid, cid = int(parts[0]), int(parts[1])
        except ValueError:
            raise IngestError(
                f"{root / 'image_class_labels.txt'}:{lineno}: bad ids {parts[:2]}"
            ) from None
        if iid not in paths:
            raise IngestError(
                f"{root / 'image_class_labels.txt'}:{lineno}: unknown image id {iid}"
            )
        if not 1 <= cid <= num_classes:
            raise IngestError(
                f"{root / 'image_class_labels.txt'}:{lineno}: label {cid} out of range 1..{num_classes}"
            )
        labels[iid] = cid

    split: dict[int, str] = {}
    for lineno, parts in _read_index(root, "train_test_split.txt", 2):
        try:
            iid, flag = int(parts[0]), int(parts[1])
        except ValueError:
            raise IngestError(
                f"{root / 'train_test_split.txt'}:{lineno}: bad ids {parts[:2]}"
            ) from None
        if iid not in paths:
            raise IngestError(
                f"{root / 'train_test_split.txt'}:{lineno}: unknown image id {iid}"
            )
        if flag not in (0, 1):
            raise IngestError(
                f"{root / 'train_test_split.txt'}:{lineno}: split flag must be 0 or 1, got {flag}"
            )
        split[iid] = "train" if flag == 1 else "test"

    records = []
    for iid in order:
        if iid not in labels:
            raise IngestError(f"{root / 'image_class_labels.txt'}: no label for image id {iid}")
        if iid not in split:
            raise IngestError(f"{root / 'train_test_split.txt'}: no split for image id {iid}")
        records.append(ManifestRecord(
            sample_id=f"cub-{iid:06d}",
            source=f"images/{paths[iid]}",
            label=labels[iid] - 1,
            split=split[iid],
        ))

    manifest = DatasetManifest(
        num_classes=num_classes,
        class_names=[class_names[c] for c in range(1, num_classes + 1)],
        records=records,
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# PPM decoding and image preprocessing

def decode_ppm(path) -> np.ndarray:
    """Decode a P6 (binary) or P3 (ascii) PPM into a (h, w, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":  # comment runs to end of line
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        return data[start:pos]

    magic = token()
    if magic not in (b"P6", b"P3"):
        raise DataError(f"{path}: not a PPM file (magic {magic!r})")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise DataError(f"{path}: bad PPM header: {e}") from e
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")

    count = width * height * 3
    if magic == b"P6":
        pos += 1  # single whitespace after maxval
        raster = data[pos:pos + count]
        if len(raster) != count:
            raise DataError(f"{path}: truncated PPM raster ({len(raster)} of {count} bytes)")
        pixels = np.frombuffer(raster, dtype=np.uint8)
    else:
        values = data[pos:].split()
        if len(values) != count:
            raise DataError(f"{path}: expected {count} ascii samples, got {len(values)}")
        pixels = np.array([int(v) for v in values], dtype=np.int64)
        if pixels.min() < 0 or pixels.max() > 255:
            raise DataError(f"{path}: ascii sample out of range 0..255")
        pixels = pixels.astype(np.uint8)
    return pixels.reshape(height, width, 3)


def _resize_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos)
    frac = pos - base
    i0 = np.clip(base.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, n_in - 1)
    frac = np.where(i0 == i1, 0.0, frac)
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resize of a (h, w, c) float array, up or down."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, ty = _resize_weights(h, out_h)
    x0, x1, tx = _resize_weights(w, out_w)
    rows = img[y0] * (1.0 - ty)[:, None, None] + img[y1] * ty[:, None, None]
    return rows[:, x0] * (1.0 - tx)[None, :, None] + rows[:, x1] * tx[None, :, None]


def image_to_input(img: np.ndarray, out_h: int, out_w: int,
                   mean: tuple[float, float, float],
                   std: tuple[float, float, float]) -> np.ndarray:
    """uint8 (h, w, 3) -> normalized float32 (3, out_h, out_w)."""
    scaled = img.astype(np.float64) / 255.0
    resized = resize_bilinear(scaled, out_h, out_w)
    normed = (resized - np.asarray(mean)) / np.asarray(std)
    return normed.transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# in-memory dataset assembly

@dataclass
class LoadedDataset:
    """Train/test arrays ready for the training loop."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_ids: list[str]
    test_ids: list[str]
    num_classes: int
    kind: str  # "features" | "images"


def load_feature_dataset(features_path, manifest: DatasetManifest) -> LoadedDataset:
    """Materialize a feature-file-backed manifest into arrays."""
    fs = load_features(features_path)
    if fs.num_classes != manifest.num_classes:
        raise DataError(
            f"feature file has {fs.num_classes} classes but the manifest has {manifest.num_classes}"
        )
    by_split: dict[str, tuple[list[np.ndarray], list[int], list[str]]] = {
        s: ([], [], []) for s in SPLITS
    }
    for r in manifest.records:
        if not isinstance(r.source, int) or not 0 <= r.source < len(fs.records):
            raise DataError(
                f"record {r.sample_id!r} source {r.source!r} is not a valid feature index "
                f"(file holds {len(fs.records)} records)"
            )
        rec = fs.records[r.source]
        if rec.label != r.label:
            raise DataError(
                f"record {r.sample_id!r}: manifest label {r.label} disagrees with "
                f"feature-file label {rec.label}"
            )
        feats, lab, ids = by_split[r.split]
        feats.append(rec.features)
        lab.append(r.label)
        ids.append(r.sample_id)

    def pack(split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        feats, lab, ids = by_split[split]
        if not feats:
            shape = (0, fs.channels, fs.height, fs.width)
            return np.zeros(shape, dtype=np.float32), np.zeros(0, dtype=np.int64), []
        return np.stack(feats), np.asarray(lab, dtype=np.int64), ids

    train_x, train_y, train_ids = pack("train")
    test_x, test_y, test_ids = pack("test")
    return LoadedDataset(train_x, train_y, test_x, test_y, train_ids, test_ids,
                         manifest.num_classes, "features")


def load_image_dataset(root, manifest: DatasetManifest, input_h: int, input_w: int,
                       mean: tuple[float, float, float],
                       std: tuple[float, float, float]) -> LoadedDataset:
    """Decode, resize and normalize every image referenced by the manifest."""
    root = Path(root)
    by_split: dict[str, tuple[list[np.ndarray], list[int], list[str]]] = {
        s: ([], [], []) for s in SPLITS
    }
    for r in manifest.records:
        if not isinstance(r.source, str):
            raise DataError(f"record {r.sample_id!r} source {r.source!r} is not an image path")
        img = decode_ppm(root / r.source)
        arr = image_to_input(img, input_h, input_w, mean, std)
        feats, lab, ids = by_split[r.split]
        feats.append(arr)
        lab.append(r.label)
        ids.append(r.sample_id)

    def pack(split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        feats, lab, ids = by_split[split]
        if not feats:
            return (np.zeros((0, 3, input_h, input_w), dtype=np.float32),
                    np.zeros(0, dtype=np.int64), [])
        return np.stack(feats), np.asarray(lab, dtype=np.int64), ids

    train_x, train_y, train_ids = pack("train")
    test_x, test_y, test_ids = pack("test")
    return LoadedDataset(train_x, train_y, test_x, test_y, train_ids, test_ids,
                         manifest.num_classes, "images")
