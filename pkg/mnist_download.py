"""
MNIST download for the command-line front end.

The library modules never touch the network; only the CLI's download
subcommand imports this module.
"""

import logging
import time
from pathlib import Path
from typing import List, Optional, Union

import requests

from mnist_data import SPLIT_FILES
from psn_exceptions import DataFormatError

logger = logging.getLogger(__name__)

DEFAULT_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"

DOWNLOAD_TIMEOUT = 30
DOWNLOAD_RETRIES = 3


def download_mnist(data_dir: Union[str, Path], mirror: str = DEFAULT_MIRROR,
                   session: Optional[requests.Session] = None) -> List[Path]:
    """
    Fetch the four gzipped IDX files that are not already present.

    Retries transient request failures with a growing pause between attempts.

    Raises:
        DataFormatError: If a file cannot be fetched after all retries
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    session = session or requests.Session()
    base = mirror if mirror.endswith("/") else mirror + "/"
    fetched = []

    for stems in SPLIT_FILES.values():
        for stem in stems:
            target = data_dir / f"{stem}.gz"
            if target.exists() or (data_dir / stem).exists():
                logger.debug(f"{stem} already present, skipping")
                continue
            url = base + target.name
            for attempt in range(1, DOWNLOAD_RETRIES + 1):
                try:
                    response = session.get(url, timeout=DOWNLOAD_TIMEOUT)
                    response.raise_for_status()
                    target.write_bytes(response.content)
                    logger.info(f"Downloaded {url} ({len(response.content)} bytes)")
                    fetched.append(target)
                    break
                except requests.exceptions.RequestException as e:
                    logger.warning(f"Download of {url} failed (attempt {attempt}/{DOWNLOAD_RETRIES}): {e}")
                    if attempt == DOWNLOAD_RETRIES:
                        raise DataFormatError(f"could not download {url}: {e}")
                    time.sleep(float(attempt))
    return fetched
