"""Artifact persistence: atomic writes, content hashes, lock files, checkpoint container."""

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from utils.errors import FormatError, StateError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DPLDMCKP"
CHECKPOINT_VERSION = 1

SECTION_AUTOENCODER = 1
SECTION_DIFFUSION = 2
SECTION_STATS = 3
SECTION_NAMES = {
    SECTION_AUTOENCODER: "autoencoder",
    SECTION_DIFFUSION: "diffusion",
    SECTION_STATS: "stats",
}

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def content_hash(payload: bytes) -> str:
    """Generate SHA256 hash for an artifact payload."""
    return hashlib.sha256(payload).hexdigest()


def atomic_write_bytes(path, payload: bytes) -> None:
    """
    Write through a temp file in the target directory and rename over the target,
    so a partial artifact is never observable.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(mode="wb", dir=path.parent, delete=False) as tmp:
        tmp.write(payload)
        tmp.flush()
        os.fsync(tmp.fileno())
        temp_name = tmp.name
    os.replace(temp_name, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class StageLock:
    """Exclusive per-output-directory lock; one stage process at a time."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise StateError(f"output directory is locked by another stage: {self.path}") from e
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            self.path.unlink()
        except FileNotFoundError:
            logger.warning("lock file vanished before release: %s", self.path)
        return False


@dataclass
class CheckpointSection:
    kind: int
    meta: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return SECTION_NAMES[self.kind]


def encode_checkpoint(sections: List[CheckpointSection]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(sections))]
    for section in sections:
        if section.kind not in SECTION_NAMES:
            raise FormatError(f"unknown section kind {section.kind}")
        meta = json.dumps(section.meta, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<BI", section.kind, len(meta)))
        parts.append(meta)
        parts.append(struct.pack("<I", len(section.tensors)))
        for name in sorted(section.tensors):
            array = np.asarray(section.tensors[name])
            dtype = array.dtype.newbyteorder("<")
            if dtype not in _DTYPE_CODES:
                raise FormatError(f"tensor {name} has unsupported dtype {array.dtype}")
            encoded_name = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded_name)))
            parts.append(encoded_name)
            parts.append(struct.pack("<BB", _DTYPE_CODES[dtype], array.ndim))
            parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
            parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise FormatError("checkpoint truncated")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes) -> List[CheckpointSection]:
    reader = _Reader(payload)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint container (bad magic)")
    version, count = reader.unpack("<HH")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = []
    for _ in range(count):
        kind, meta_len = reader.unpack("<BI")
        if kind not in SECTION_NAMES:
            raise FormatError(f"unknown section kind {kind}")
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
        (n_tensors,) = reader.unpack("<I")
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            code, ndim = reader.unpack("<BB")
            if code not in _CODE_DTYPES:
                raise FormatError(f"tensor {name} has unknown dtype code {code}")
            shape = reader.unpack(f"<{ndim}I") if ndim else ()
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
        sections.append(CheckpointSection(kind=kind, meta=meta, tensors=tensors))
    if reader.offset != len(payload):
        raise FormatError("trailing bytes after last checkpoint section")
    return sections


def save_checkpoint(path, sections: List[CheckpointSection]) -> str:
    """Store sections atomically; returns the content hash of the written bytes."""
    payload = encode_checkpoint(sections)
    atomic_write_bytes(path, payload)
    digest = content_hash(payload)
    logger.info("wrote checkpoint %s (%d bytes, %s)", path, len(payload), digest[:12])
    return digest


def load_checkpoint(path) -> List[CheckpointSection]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def find_section(sections: List[CheckpointSection], kind: int) -> Optional[CheckpointSection]:
    for section in sections:
        if section.kind == kind:
            return section
    return None


def file_hash(path) -> str:
    return content_hash(Path(path).read_bytes())


__all__ = [
    'CheckpointSection',
    'StageLock',
    'atomic_write_bytes',
    'atomic_write_text',
    'content_hash',
    'decode_checkpoint',
    'encode_checkpoint',
    'file_hash',
    'find_section',
    'load_checkpoint',
    'save_checkpoint',
    'SECTION_AUTOENCODER',
    'SECTION_DIFFUSION',
    'SECTION_STATS',
]
