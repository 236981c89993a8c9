"""Shared fixtures: repository root on sys.path, synthetic IDX files, real-data discovery."""

import gzip
import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from mnist_data import Split, resolve_split_files  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs the real MNIST files or long training")


def write_idx_images(path: Path, pixels: np.ndarray, magic: int = 0x00000803) -> Path:
    count, rows, cols = pixels.shape
    header = np.array([magic, count, rows, cols], dtype=">u4").tobytes()
    payload = header + pixels.astype(np.uint8).tobytes()
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
    return path


def write_idx_labels(path: Path, labels: np.ndarray, magic: int = 0x00000801) -> Path:
    header = np.array([magic, labels.shape[0]], dtype=">u4").tobytes()
    payload = header + labels.astype(np.uint8).tobytes()
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
    return path


@pytest.fixture
def mnist_dir(tmp_path):
    """Small MNIST-shaped dataset: gzipped train split (300), plain test split (100)."""
    rng = np.random.default_rng(1234)
    data_dir = tmp_path / "mnist"
    data_dir.mkdir()
    write_idx_images(data_dir / "train-images-idx3-ubyte.gz", rng.integers(0, 256, (300, 28, 28)))
    write_idx_labels(data_dir / "train-labels-idx1-ubyte.gz", rng.integers(0, 10, 300))
    write_idx_images(data_dir / "t10k-images-idx3-ubyte", rng.integers(0, 256, (100, 28, 28)))
    write_idx_labels(data_dir / "t10k-labels-idx1-ubyte", rng.integers(0, 10, 100))
    return data_dir


@pytest.fixture
def real_mnist_dir():
    """Directory named by PSN_DATA_DIR when it holds the full MNIST files."""
    data_dir = os.getenv("PSN_DATA_DIR")
    if not data_dir:
        pytest.skip("PSN_DATA_DIR not set")
    try:
        for split in Split:
            resolve_split_files(data_dir, split)
    except FileNotFoundError:
        pytest.skip(f"MNIST files not found in {data_dir}")
    return Path(data_dir)
