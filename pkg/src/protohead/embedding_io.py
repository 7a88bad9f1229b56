"""Embedding dataset I/O.

Defines the on-disk formats that decouple the package from any particular
encoder, plus deterministic splitting and a synthetic generator used as a
desk-scale stand-in for language-model embeddings.

PEMB binary format
    magic bytes ``PEMB``, then four unsigned 32-bit little-endian fields
    ``[version=1, N, D, V]``, then ``N*V*D`` 32-bit little-endian IEEE-754
    floats in row-major order (record-major, view-major within a record).

Sidecar
    same basename with extension ``.jsonl``; line ``i`` is
    ``{"id": int, "label": int, "text": str-or-null}`` for record ``i``.

Manifest (synthetic data only)
    same basename with extension ``.manifest.json``; carries the generator
    seed, the class means, the planted polarity axis (two-view mode) and the
    full generator config, so invariants such as the class-mean separation
    bound stay checkable after the fact.

Payloads are stored as 32-bit floats for compactness but promoted to 64-bit
in memory; all downstream math is 64-bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from protohead.errors import ConfigError, DataValidationError, FormatError

PEMB_MAGIC = b"PEMB"
PEMB_VERSION = 1

# SeedSequence tags keeping independent random purposes on distinct streams.
_GEN_TAG = 0x67656E
_SPLIT_TAG = 0x73706C


@dataclass(frozen=True)
class EmbeddingRecord:
    """One dataset row: an id, 1 or 2 embedding views, a label, optional text."""

    id: int
    views: np.ndarray  # (num_views, dim) float64
    label: int
    text: str | None = None


class EmbeddingDataset:
    """Immutable collection of embedding records sharing dim and view count.

    ``views`` has shape (N, V, D) in float64; ``ids`` are strictly increasing;
    labels lie in ``[0, num_classes)``.  Arrays are frozen after validation so
    a loaded dataset is safe to share across threads.
    """

    def __init__(self, views: np.ndarray, labels: np.ndarray, num_classes: int,
                 ids: np.ndarray | None = None, texts: list[str | None] | None = None):
        views = np.ascontiguousarray(views, dtype=np.float64)
        if views.ndim != 3:
            raise DataValidationError(f"views must be (N, V, D), got shape {views.shape}")
        n, num_views, dim = views.shape
        if n < 1:
            raise DataValidationError("a dataset needs at least one record")
        if num_views not in (1, 2):
            raise DataValidationError(f"view count must be 1 or 2, got {num_views}")
        if not np.all(np.isfinite(views)):
            raise DataValidationError("embedding payload contains non-finite values")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DataValidationError(f"labels shape {labels.shape} does not match N={n}")
        if num_classes < 2:
            raise DataValidationError(f"num_classes must be >= 2, got {num_classes}")
        for i, label in enumerate(labels):
            if not 0 <= label < num_classes:
                raise DataValidationError(
                    f"label {label} out of range [0, {num_classes}) at row {i}")
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64)
            if ids.shape != (n,):
                raise DataValidationError(f"ids shape {ids.shape} does not match N={n}")
            if np.any(ids < 0):
                raise DataValidationError("record ids must be non-negative")
            if n > 1 and not np.all(np.diff(ids) > 0):
                raise DataValidationError("record ids must be strictly increasing")
        if texts is not None and len(texts) != n:
            raise DataValidationError(f"got {len(texts)} texts for {n} records")
        self.views = views
        self.labels = labels
        self.ids = ids
        self.texts = list(texts) if texts is not None else [None] * n
        self.num_classes = int(num_classes)
        for arr in (self.views, self.labels, self.ids):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.views.shape[0]

    @property
    def num_views(self) -> int:
        return self.views.shape[1]

    @property
    def dim(self) -> int:
        return self.views.shape[2]

    def view(self, index: int) -> np.ndarray:
        """All records' embeddings for one view, shape (N, D)."""
        return self.views[:, index, :]

    def record(self, position: int) -> EmbeddingRecord:
        return EmbeddingRecord(id=int(self.ids[position]), views=self.views[position],
                               label=int(self.labels[position]), text=self.texts[position])

    @property
    def records(self) -> list[EmbeddingRecord]:
        return [self.record(i) for i in range(len(self))]

    def position_of(self, record_id: int) -> int:
        """Position of a record id, or -1 when absent."""
        pos = int(np.searchsorted(self.ids, record_id))
        if pos < len(self) and self.ids[pos] == record_id:
            return pos
        return -1

    def subset(self, positions: np.ndarray) -> "EmbeddingDataset":
        """New dataset from the given positions, reordered to ascending id."""
        positions = np.sort(np.asarray(positions, dtype=np.int64))
        return EmbeddingDataset(
            views=self.views[positions],
            labels=self.labels[positions],
            num_classes=self.num_classes,
            ids=self.ids[positions],
            texts=[self.texts[int(p)] for p in positions],
        )

    def equals(self, other: "EmbeddingDataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.views.shape == other.views.shape
            and np.array_equal(self.views, other.views)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ids, other.ids)
            and self.texts == other.texts
        )


@dataclass(frozen=True)
class SplitSpec:
    """Fractions for a train/val/test partition plus the shuffle seed."""

    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        for name, value in zip(("train_fraction", "val_fraction", "test_fraction"), fractions):
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".jsonl")


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".manifest.json")


def write_pemb(dataset: EmbeddingDataset, path) -> None:
    """Write ``dataset`` to ``path`` in PEMB format plus its JSONL sidecar.

    Writes are deterministic: the same dataset always produces byte-identical
    files.
    """
    path = Path(path)
    n, num_views, dim = dataset.views.shape
    header = PEMB_MAGIC + struct.pack("<4I", PEMB_VERSION, n, dim, num_views)
    payload = np.ascontiguousarray(dataset.views, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            for i in range(n):
                row = {"id": int(dataset.ids[i]), "label": int(dataset.labels[i]),
                       "text": dataset.texts[i]}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def read_pemb(path, num_classes: int | None = None) -> EmbeddingDataset:
    """Read a PEMB file and its sidecar into a validated dataset.

    The binary header carries no class count, so ``num_classes`` defaults to
    ``max(label) + 1``; pass it explicitly to validate labels against a wider
    class set (datasets may leave classes uninhabited).
    """
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError(f"{path}: too short to hold a PEMB header")
    magic, rest = blob[:4], blob[4:20]
    if magic != PEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {PEMB_MAGIC!r}")
    version, n, dim, num_views = struct.unpack("<4I", rest)
    if version != PEMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if num_views not in (1, 2):
        raise FormatError(f"{path}: view count {num_views} not in {{1, 2}}")
    expected = n * num_views * dim * 4
    payload = blob[20:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    views = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, num_views, dim)

    side = sidecar_path(path)
    if not side.exists():
        raise DataValidationError(f"missing sidecar {side}")
    ids, labels, texts = [], [], []
    with open(side, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{side}:{line_no + 1}: invalid JSON ({exc})") from exc
            ids.append(int(row["id"]))
            labels.append(int(row["label"]))
            texts.append(row.get("text"))
    if len(ids) != n:
        raise DataValidationError(
            f"sidecar {side} has {len(ids)} rows but the PEMB header declares {n}")
    resolved_classes = num_classes if num_classes is not None else max(labels) + 1
    for i, label in enumerate(labels):
        if not 0 <= label < resolved_classes:
            raise DataValidationError(
                f"label {label} out of range [0, {resolved_classes}) at row {i}")
    return EmbeddingDataset(views=views, labels=np.asarray(labels), num_classes=resolved_classes,
                            ids=np.asarray(ids), texts=texts)


def split(dataset: EmbeddingDataset, spec: SplitSpec
          ) -> tuple[EmbeddingDataset, EmbeddingDataset, EmbeddingDataset]:
    """Disjoint train/val/test partition, a deterministic function of the seed.

    Sizes are ``floor(N * fraction)`` for val and test with the remainder
    assigned to train.  Records inside each part keep ascending-id order.
    """
    spec.validate()
    n = len(dataset)
    if n < 3:
        raise DataValidationError(f"need at least 3 records to split, got {n}")
    n_val = math.floor(n * spec.val_fraction)
    n_test = math.floor(n * spec.test_fraction)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataValidationError(
            f"split of {n} records leaves an empty part "
            f"(train={n_train}, val={n_val}, test={n_test})")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, _SPLIT_TAG))))
    perm = rng.permutation(n)
    return (
        dataset.subset(perm[:n_train]),
        dataset.subset(perm[n_train:n_train + n_val]),
        dataset.subset(perm[n_train + n_val:]),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic embedding generator.

    Class means sit on distinct coordinate axes (scaled by ``separation``)
    after a seeded random rotation, which guarantees the pairwise mean
    distance bound by construction.  In two-view mode every record carries a
    planted polarity sign on a dedicated rotated axis orthogonal to all class
    means; label-1 records flip the view-2 sign relative to view 1 with rate
    ``incongruity_rate`` so that cross-view disagreement predicts the label.
    """

    num_classes: int = 4
    dim: int = 16
    per_class: int = 500
    separation: float = 6.0
    noise: float = 1.0
    views: int = 1
    incongruity_rate: float = 0.0
    seed: int = 0
    polarity_gain: float = 1.0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.per_class < 2:
            raise ConfigError(f"per_class must be >= 2, got {self.per_class}")
        if not self.separation > 0.0:
            raise ConfigError(f"separation must be > 0, got {self.separation}")
        if not self.noise > 0.0:
            raise ConfigError(f"noise must be > 0, got {self.noise}")
        if self.views not in (1, 2):
            raise ConfigError(f"views must be 1 or 2, got {self.views}")
        if not 0.0 <= self.incongruity_rate <= 1.0:
            raise ConfigError(
                f"incongruity_rate must lie in [0, 1], got {self.incongruity_rate}")
        if not self.polarity_gain > 0.0:
            raise ConfigError(f"polarity_gain must be > 0, got {self.polarity_gain}")
        axes_needed = self.num_classes + (1 if self.views == 2 else 0)
        if self.dim < axes_needed:
            raise ConfigError(
                f"dim={self.dim} is too small to place {self.num_classes} orthogonal class "
                f"means{' plus a polarity axis' if self.views == 2 else ''}; "
                f"increase dim to at least {axes_needed}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "per_class": self.per_class,
            "separation": self.separation,
            "noise": self.noise,
            "views": self.views,
            "incongruity_rate": self.incongruity_rate,
            "seed": self.seed,
            "polarity_gain": self.polarity_gain,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        known = set(cls().to_dict())
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown synthetic config key {key!r}")
        config = cls(**data)
        config.validate()
        return config


def _seeded_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Deterministic Haar-ish orthogonal matrix (QR with sign fix)."""
    gaussian = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gaussian)
    return q * np.sign(np.diag(r))


def _synthetic_parts(config: SyntheticConfig):
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, _GEN_TAG))))
    rotation = _seeded_rotation(rng, config.dim)
    means = config.separation * rotation[:, :config.num_classes].T  # (C, D)
    axis = rotation[:, config.num_classes].copy() if config.views == 2 else None

    n_total = config.num_classes * config.per_class
    views = np.empty((n_total, config.views, config.dim))
    labels = np.empty(n_total, dtype=np.int64)
    texts: list[str | None] = [None] * n_total
    row = 0
    for c in range(config.num_classes):
        block = slice(row, row + config.per_class)
        view1 = means[c] + config.noise * rng.standard_normal((config.per_class, config.dim))
        if config.views == 2:
            view2 = means[c] + config.noise * rng.standard_normal((config.per_class, config.dim))
            signs = 2 * rng.integers(0, 2, size=config.per_class) - 1
            flip_draw = rng.random(config.per_class) < config.incongruity_rate
            flips = flip_draw & (c == 1)
            # Replace the axis component wholesale so the planted sign is exact
            # regardless of noise level.
            view1 -= np.outer(view1 @ axis, axis)
            view1 += np.outer(config.polarity_gain * signs, axis)
            signs2 = signs * np.where(flips, -1, 1)
            view2 -= np.outer(view2 @ axis, axis)
            view2 += np.outer(config.polarity_gain * signs2, axis)
            views[block, 0, :] = view1
            views[block, 1, :] = view2
            for j in range(config.per_class):
                tag = " flip" if flips[j] else ""
                texts[row + j] = f"synthetic y={c} #{row + j:05d} pol={int(signs[j]):+d}{tag}"
        else:
            views[block, 0, :] = view1
            for j in range(config.per_class):
                texts[row + j] = f"synthetic y={c} #{row + j:05d}"
        labels[block] = c
        row += config.per_class

    dataset = EmbeddingDataset(views=views, labels=labels, num_classes=config.num_classes,
                               texts=texts)
    return dataset, means, axis


def gen_synthetic(config: SyntheticConfig) -> EmbeddingDataset:
    """Generate a synthetic embedding dataset, deterministic per seed."""
    dataset, _, _ = _synthetic_parts(config)
    return dataset


def synthetic_manifest(config: SyntheticConfig) -> dict:
    """Manifest (seed, class means, polarity axis, config) for a generator run."""
    _, means, axis = _synthetic_parts(config)
    return {
        "seed": config.seed,
        "config": config.to_dict(),
        "means": [[float(v) for v in mean] for mean in means],
        "polarity_axis": [float(v) for v in axis] if axis is not None else None,
    }


def write_synthetic(config: SyntheticConfig, basename) -> dict:
    """Generate and persist a synthetic dataset: PEMB + sidecar + manifest.

    ``basename`` is the PEMB path; sidecar and manifest share its stem.
    Returns the manifest dict.
    """
    basename = Path(basename)
    dataset, means, axis = _synthetic_parts(config)
    write_pemb(dataset, basename)
    manifest = {
        "seed": config.seed,
        "config": config.to_dict(),
        "means": [[float(v) for v in mean] for mean in means],
        "polarity_axis": [float(v) for v in axis] if axis is not None else None,
    }
    with open(manifest_path(basename), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def polarity_signs(dataset: EmbeddingDataset, axis: np.ndarray) -> np.ndarray:
    """Sign of each record's view-2 component along a planted polarity axis.

    Returns an (N,) array of +/-1 (a zero component counts as +1).  Only
    meaningful for datasets generated with a known axis, e.g. from a synthetic
    manifest.
    """
    if dataset.num_views != 2:
        raise DataValidationError("polarity signs need a two-view dataset")
    axis = np.asarray(axis, dtype=np.float64)
    components = dataset.view(1) @ axis
    return np.where(components >= 0.0, 1, -1).astype(np.int64)
