"""Helper utility functions."""

import json
import logging
import re
import sys
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import requests
from requests.exceptions import RequestException, Timeout

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(level: str = "INFO") -> None:
    """Configure the root logger once with a single stream handler."""
    root = logging.getLogger()
    if root.handlers:
        root.setLevel(level.upper())
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
    root.addHandler(handler)
    root.setLevel(level.upper())


def progress_disabled() -> bool:
    return not sys.stderr.isatty()


def safe_requests_get(
    url: str,
    headers: dict = None,
    timeout: int = 30,
    retries: int = 3,
    backoff_factor: float = 1.0,
):
    """
    Robust HTTP GET with retries and exponential backoff.
    Backoff pattern: 1s → 2s → 4s
    """
    headers = headers or {'User-Agent': 'dpldm-desk/1.0'}

    for attempt in range(retries):
        try:
            resp = requests.get(url, headers=headers, timeout=timeout)

            # Retry on server-side errors
            if resp.status_code >= 500:
                raise RequestException(f"Server error: {resp.status_code}")

            resp.raise_for_status()
            return resp

        except (RequestException, Timeout) as e:
            if attempt == retries - 1:
                logger.warning("Request failed: %s", e)
                return None
            time.sleep(backoff_factor * (2 ** attempt))


def safe_filename(s: str, maxlen: int = 50) -> str:
    """Generate a safe filename from a string."""
    if not s:
        return "run"
    s = re.sub(r'[^\w\s-]', '', s)
    s = re.sub(r'\s+', '_', s).strip('_')
    return s[:maxlen] or "run"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; reproducible but not a cryptographic source."""
    return np.random.Generator(np.random.Philox(seed))


def rng_state_to_json(rng: np.random.Generator) -> Dict[str, Any]:
    def convert(value):
        if isinstance(value, np.ndarray):
            return {"__uint64__": [int(v) for v in value.ravel()], "shape": list(value.shape)}
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, np.integer):
            return int(value)
        return value

    return convert(rng.bit_generator.state)


def rng_from_json(state: Dict[str, Any]) -> np.random.Generator:
    def convert(value):
        if isinstance(value, dict) and "__uint64__" in value:
            return np.array(value["__uint64__"], dtype=np.uint64).reshape(value["shape"])
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    rng = make_rng(0)
    rng.bit_generator.state = convert(state)
    return rng


class MetricsWriter:
    """Append-only line-delimited JSON records (one record per line)."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Dict[str, Any]) -> None:
        if not self.path:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
