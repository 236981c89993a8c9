"""
MNIST ingestion from IDX files.

Reads the standard big-endian IDX containers (optionally gzipped), scales
pixels to [0, 1], one-hot encodes labels and yields shuffled minibatches.
No network access; the CLI fetches missing files through mnist_download.
"""

import gzip
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from psn_exceptions import DataFormatError, DomainError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10


class Split(Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


# Canonical file stems per split; a ".gz" suffix is also accepted
SPLIT_FILES = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

SPLIT_SIZES = {Split.TRAIN: 60000, Split.TEST: 10000}


@dataclass(frozen=True)
class Dataset:
    """Images (N x 784, in [0, 1]) and one-hot labels (N x 10)."""
    images: np.ndarray
    labels: np.ndarray
    split: Split

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, n: Optional[int]) -> 'Dataset':
        """First n samples (all of them when n is None or exceeds the size)."""
        if n is None or n >= len(self):
            return self
        if n < 0:
            raise DomainError(f"subset size must be non-negative, got {n}")
        return Dataset(self.images[:n], self.labels[:n], self.split)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.class_indices, minlength=self.labels.shape[1])


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"MNIST file not found: {path}")
    if path.suffix == ".gz":
        try:
            with gzip.open(path, "rb") as f:
                return f.read()
        except (EOFError, OSError) as e:
            raise DataFormatError(f"{path}: corrupt or truncated gzip stream ({e})")
    return path.read_bytes()


def _header(raw: bytes, path: Path, fields: int) -> Tuple[int, ...]:
    needed = 4 * (fields + 1)
    if len(raw) < needed:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)} (need {needed} bytes)")
    return tuple(int(v) for v in np.frombuffer(raw, dtype=">u4", count=fields + 1))


def _read_images(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    magic, count, rows, cols = _header(raw, path, 3)
    if magic != IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad image magic 0x{magic:08x} at offset 0")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise DataFormatError(f"{path}: truncated image data at offset {len(raw)}, expected {expected} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def _read_labels(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    magic, count = _header(raw, path, 1)
    if magic != LABEL_MAGIC:
        raise DataFormatError(f"{path}: bad label magic 0x{magic:08x} at offset 0")
    if len(raw) < 8 + count:
        raise DataFormatError(f"{path}: truncated label data at offset {len(raw)}, expected {8 + count} bytes")
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DataFormatError(f"{path}: label {labels[bad]} out of range at offset {8 + bad}")
    return labels


def one_hot(classes: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    encoded = np.zeros((classes.shape[0], num_classes))
    encoded[np.arange(classes.shape[0]), classes] = 1.0
    return encoded


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             split: Split = Split.TRAIN) -> Dataset:
    """
    Parse an image/label IDX pair into a Dataset, preserving file order.

    Raises:
        DataFormatError: Bad magic, truncated file or count mismatch
        FileNotFoundError: If either file is missing
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_images(images_path)
    labels = _read_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds "
            f"{labels.shape[0]} labels (count at offset 4)"
        )
    logger.debug(f"Loaded {images.shape[0]} samples from {images_path.name}")
    return Dataset(images=images, labels=one_hot(labels), split=split)


def resolve_split_files(data_dir: Union[str, Path], split: Split) -> Tuple[Path, Path]:
    """Locate the image and label files for a split, plain or gzipped."""
    data_dir = Path(data_dir)
    resolved = []
    for stem in SPLIT_FILES[split]:
        for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
            if candidate.exists():
                resolved.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")
    return resolved[0], resolved[1]


def load_mnist(data_dir: Union[str, Path], split: Split = Split.TRAIN) -> Dataset:
    images_path, labels_path = resolve_split_files(data_dir, split)
    dataset = load_idx(images_path, labels_path, split)
    if len(dataset) != SPLIT_SIZES[split]:
        logger.warning(f"{split.value} split has {len(dataset)} samples, full MNIST has {SPLIT_SIZES[split]}")
    return dataset


def batches(data: Dataset, batch_size: int,
            rng: np.random.Generator) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Yield (images, labels) minibatches over one shuffled epoch.

    The final short batch is kept; every sample appears exactly once.

    Raises:
        DomainError: On an empty dataset or batch_size < 1
    """
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    if len(data) == 0:
        raise DomainError("cannot batch an empty dataset")
    order = rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx]


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def read_manifest(manifest_path: Union[str, Path]) -> Dict[str, str]:
    """Parse `<sha256>  <filename>` lines; blank lines and # comments are skipped."""
    manifest_path = Path(manifest_path)
    entries = {}
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or len(parts[0]) != 64:
            raise DataFormatError(f"{manifest_path}: malformed manifest line {lineno}")
        entries[parts[1]] = parts[0].lower()
    return entries


def write_digests(data_dir: Union[str, Path], manifest_path: Union[str, Path]) -> Dict[str, str]:
    """Freeze the digests of every MNIST file present in data_dir into a manifest."""
    data_dir = Path(data_dir)
    digests = {}
    for stems in SPLIT_FILES.values():
        for stem in stems:
            for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
                if candidate.exists():
                    digests[candidate.name] = _sha256(candidate)
    if not digests:
        raise FileNotFoundError(f"no MNIST files in {data_dir}")
    lines = [f"{digest}  {name}" for name, digest in sorted(digests.items())]
    Path(manifest_path).write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(digests)} digests to {manifest_path}")
    return digests


def verify_digests(data_dir: Union[str, Path], manifest_path: Union[str, Path]) -> List[str]:
    """
    Check every file listed in the manifest against its SHA-256 digest.

    Returns:
        Names of the verified files

    Raises:
        DataFormatError: On a digest mismatch
        FileNotFoundError: If a listed file is missing
    """
    data_dir = Path(data_dir)
    verified = []
    for name, expected in read_manifest(manifest_path).items():
        path = data_dir / name
        if not path.exists():
            raise FileNotFoundError(f"{name} listed in manifest but missing from {data_dir}")
        actual = _sha256(path)
        if actual != expected:
            raise DataFormatError(f"{path}: SHA-256 {actual} does not match manifest {expected}")
        verified.append(name)
    logger.info(f"Verified {len(verified)} files against {manifest_path}")
    return verified

