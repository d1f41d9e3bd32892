"""Dataset loaders for IDX (MNIST-family) and CSV files."""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IngestError(ValueError):
    pass


class BadMagicError(IngestError):
    pass


class TruncatedError(IngestError):
    pass


class CountMismatchError(IngestError):
    pass


class RaggedRowError(IngestError):
    pass


class NonNumericError(IngestError):
    pass


class EmptyFileError(IngestError):
    pass


@dataclass
class RawDataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.features) == 0:
            raise IngestError("dataset %r has no examples" % self.name)
        if len(self.features) != len(self.labels):
            raise CountMismatchError("%d feature rows but %d labels" % (len(self.features), len(self.labels)))
        if np.any(self.labels < 0):
            raise IngestError("class ids must be non-negative")

    def __len__(self):
        return len(self.labels)


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(blob: bytes, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(blob) < 4:
        raise TruncatedError("%s file is shorter than its header" % what)
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise BadMagicError("%s file has magic 0x%08x, expected 0x%08x" % (what, got, magic))
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedError("%s file header is truncated" % what)
    dims = struct.unpack(">" + "I" * ndim, blob[4:header])
    payload = blob[header:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise TruncatedError("%s payload has %d bytes, header promises %d" % (what, len(payload), expected))
    return dims, payload[:expected]


def load_idx(images_path, labels_path, name: str = "") -> RawDataset:
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    (n_labels,), raw_labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    n_images = dims[0]
    if n_images != n_labels:
        raise CountMismatchError("%d images but %d labels" % (n_images, n_labels))
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(n_images, -1).astype(float) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(int)
    return RawDataset(features, labels, name or os.path.basename(str(images_path)))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">III", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, label_column: int, name: str = "") -> RawDataset:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise EmptyFileError("%s is empty" % path)
    if not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
        if not rows:
            raise EmptyFileError("%s has a header but no data" % path)
    width = len(rows[0])
    if not -width <= label_column < width:
        raise IngestError("label column %d out of range for %d columns" % (label_column, width))
    label_column %= width
    features, labels = [], []
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise RaggedRowError("row %d has %d cells, expected %d" % (lineno, len(row), width))
        try:
            values = [float(c) for c in row]
        except ValueError:
            raise NonNumericError("row %d has a non-numeric cell: %r" % (lineno, row)) from None
        label = values.pop(label_column)
        if label != int(label):
            raise NonNumericError("row %d label %r is not an integer" % (lineno, label))
        features.append(values)
        labels.append(int(label))
    return RawDataset(np.array(features), np.array(labels), name or os.path.basename(str(path)))


def write_csv(dataset: RawDataset, path, header: bool = True) -> None:
    """Write features then the label as the last column, using repr for full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(["f%d" % i for i in range(dataset.features.shape[1])] + ["y"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
