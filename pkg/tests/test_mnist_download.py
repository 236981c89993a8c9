"""Tests for the CLI-side MNIST download helper."""

import subprocess
import sys
from pathlib import Path
from unittest.mock import MagicMock

import pytest
import requests

from mnist_download import DOWNLOAD_RETRIES, download_mnist
from psn_exceptions import DataFormatError

ROOT = Path(__file__).resolve().parent.parent


def test_fetches_missing_files(tmp_path):
    session = MagicMock()
    session.get.return_value.content = b"payload"
    fetched = download_mnist(tmp_path, mirror="https://mirror.example/mnist", session=session)
    assert len(fetched) == 4
    first_url = session.get.call_args_list[0].args[0]
    assert first_url == "https://mirror.example/mnist/train-images-idx3-ubyte.gz"
    assert (tmp_path / "t10k-labels-idx1-ubyte.gz").read_bytes() == b"payload"


def test_skips_present_files(mnist_dir):
    session = MagicMock()
    assert download_mnist(mnist_dir, session=session) == []
    session.get.assert_not_called()


def test_gives_up_after_retries(tmp_path, monkeypatch):
    monkeypatch.setattr("mnist_download.time.sleep", lambda seconds: None)
    session = MagicMock()
    session.get.side_effect = requests.exceptions.ConnectionError("offline")
    with pytest.raises(DataFormatError, match="could not download"):
        download_mnist(tmp_path, session=session)
    assert session.get.call_count == DOWNLOAD_RETRIES


def test_recovers_from_a_transient_failure(tmp_path, monkeypatch):
    monkeypatch.setattr("mnist_download.time.sleep", lambda seconds: None)
    ok = MagicMock(content=b"payload")
    session = MagicMock()
    session.get.side_effect = [requests.exceptions.Timeout("slow"), ok, ok, ok, ok]
    assert len(download_mnist(tmp_path, session=session)) == 4
    assert session.get.call_count == 5


def test_data_library_imports_no_http_client():
    # Fresh interpreter: other tests in this process already import requests
    code = ("import sys, mnist_data, network, estimators, experiment_runner; "
            "sys.exit(1 if 'requests' in sys.modules else 0)")
    result = subprocess.run([sys.executable, "-c", code], cwd=ROOT, capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
