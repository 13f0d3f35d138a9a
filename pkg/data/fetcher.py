"""Download of MNIST-format IDX files for the real-data smoke path."""

import gzip
import logging
from pathlib import Path
from typing import Dict, Optional

from utils.caching import atomic_write_bytes, content_hash
from utils.config import AppConfig
from utils.errors import DataError
from utils.helpers import safe_requests_get

logger = logging.getLogger(__name__)

STANDARD_FILES = {
    "train-images": "train-images-idx3-ubyte.gz",
    "train-labels": "train-labels-idx1-ubyte.gz",
    "test-images": "t10k-images-idx3-ubyte.gz",
    "test-labels": "t10k-labels-idx1-ubyte.gz",
}


class IdxFetcher:
    """Fetches IDX files over HTTP with retries; stores them decompressed."""

    def __init__(self, mirror: Optional[str] = None, timeout: int = 60, retries: int = 3):
        self.mirror = (mirror or AppConfig.IDX_MIRROR).rstrip("/")
        self.timeout = timeout
        self.retries = retries

    def fetch(self, url: str, dest) -> Path:
        dest = Path(dest)
        resp = safe_requests_get(url, timeout=self.timeout, retries=self.retries)
        if resp is None:
            raise DataError(f"download failed: {url}")
        payload = resp.content
        if payload[:2] == b"\x1f\x8b" and dest.suffix != ".gz":
            payload = gzip.decompress(payload)
        atomic_write_bytes(dest, payload)
        logger.info("fetched %s -> %s (%d bytes, %s)", url, dest, len(payload),
                    content_hash(payload)[:12])
        return dest

    def fetch_standard(self, dest_dir) -> Dict[str, Path]:
        """The four standard train/test image and label files into `dest_dir`."""
        dest_dir = Path(dest_dir)
        paths = {}
        for key, name in STANDARD_FILES.items():
            paths[key] = self.fetch(f"{self.mirror}/{name}", dest_dir / name[:-3])
        return paths
