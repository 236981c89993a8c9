"""
Run directories for training experiments.

Resolves where MNIST is read from and where run outputs and logs go,
from explicit arguments, PSN_* environment variables or the working directory.
"""

import os
from pathlib import Path
from typing import Optional, Dict

from psn_exceptions import PathConfigurationError


class PathConfig:
    """Manages configurable paths for training runs."""

    def __init__(self,
                 base_dir: Optional[Path] = None,
                 data_dir: Optional[Path] = None,
                 out_dir: Optional[Path] = None,
                 log_dir: Optional[Path] = None):
        """
        Initialize path configuration.

        Args:
            base_dir: Base directory for all files (defaults to the working directory)
            data_dir: Directory holding the MNIST IDX files
            out_dir: Directory receiving experiment outputs
            log_dir: Directory for log files
        """
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()

        self.data_dir = Path(data_dir) if data_dir else self.base_dir / 'data'
        self.out_dir = Path(out_dir) if out_dir else self.base_dir / 'runs'
        self.log_dir = Path(log_dir) if log_dir else self.out_dir

        # Data directory is read-only input and is not created here
        self._ensure_directories()

    def _ensure_directories(self):
        """
        Ensure output and log directories exist.

        Raises:
            PathConfigurationError: If a directory cannot be created
        """
        for directory in [self.out_dir, self.log_dir]:
            try:
                directory.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise PathConfigurationError(f"Cannot create directory {directory}: {e}")
        if self.data_dir.exists() and not self.data_dir.is_dir():
            raise PathConfigurationError(f"Data path {self.data_dir} is not a directory")

    @property
    def log_file(self) -> Path:
        """Path to the main log file."""
        return self.log_dir / 'psn_training.log'

    @property
    def digest_manifest(self) -> Path:
        """Path to the SHA-256 digest manifest for the dataset files."""
        return self.data_dir / 'mnist_sha256.txt'

    def experiment_dir(self, name: str) -> Path:
        """Directory for a named experiment, created on demand."""
        path = self.out_dir / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @classmethod
    def create_for_testing(cls, temp_dir: Path) -> 'PathConfig':
        """
        Create a PathConfig instance for testing with temporary directories.

        Args:
            temp_dir: Temporary directory to use as base

        Returns:
            PathConfig: Configured for testing
        """
        return cls(
            base_dir=temp_dir,
            data_dir=temp_dir / 'data',
            out_dir=temp_dir / 'runs',
            log_dir=temp_dir / 'logs'
        )

    @classmethod
    def create_from_env(cls, data_dir: Optional[str] = None,
                        out_dir: Optional[str] = None) -> 'PathConfig':
        """
        Create PathConfig from environment variables, with explicit arguments winning.

        Environment variables:
        - PSN_BASE_DIR: Base directory
        - PSN_DATA_DIR: Dataset directory
        - PSN_OUT_DIR: Output directory
        - PSN_LOG_DIR: Log directory

        Returns:
            PathConfig: Configured from environment
        """
        base_dir = None
        if base_env := os.getenv('PSN_BASE_DIR'):
            base_dir = Path(base_env)

        data_path = data_dir or os.getenv('PSN_DATA_DIR')
        out_path = out_dir or os.getenv('PSN_OUT_DIR')

        log_path = None
        if log_env := os.getenv('PSN_LOG_DIR'):
            log_path = Path(log_env)

        return cls(
            base_dir=base_dir,
            data_dir=Path(data_path) if data_path else None,
            out_dir=Path(out_path) if out_path else None,
            log_dir=log_path
        )

    def to_dict(self) -> Dict[str, str]:
        """Convert path configuration to dictionary for serialization."""
        return {
            'base_dir': str(self.base_dir),
            'data_dir': str(self.data_dir),
            'out_dir': str(self.out_dir),
            'log_dir': str(self.log_dir)
        }
