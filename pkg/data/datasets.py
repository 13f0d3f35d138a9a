"""
Dataset archives: 8-bit NHWC pixels plus one u16 class id per image, behind a
fixed binary header. Ingests image directories (Pillow) and MNIST-format IDX files.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from utils.caching import atomic_write_bytes, content_hash
from utils.config import AppConfig
from utils.errors import DataError, FormatError

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = b"DPLDMDS1"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<HIHHBH")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm", ".ppm", ".tif", ".tiff"}

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class DatasetArchive:
    pixels: np.ndarray  # (N, H, W, ch) uint8
    labels: np.ndarray  # (N,) uint16, UNLABELED for none
    num_classes: int = 0

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.pixels.ndim != 4:
            raise FormatError(f"pixels must be (N, H, W, ch), got {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise FormatError(f"{self.labels.shape[0]} labels for {self.pixels.shape[0]} images")

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[3])

    @property
    def labeled(self) -> bool:
        return bool(len(self)) and not (self.labels == AppConfig.UNLABELED).any()

    def images(self) -> np.ndarray:
        """Float (N, ch, H, W) pixels in [-1, 1]."""
        return self.pixels.transpose(0, 3, 1, 2).astype(np.float64) / 127.5 - 1.0

    def label_array(self) -> np.ndarray:
        return self.labels.astype(np.int64)

    def class_counts(self) -> dict:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def check_divisible(self, f: int) -> None:
        if self.height % f or self.width % f:
            raise DataError(f"image extents {self.height}x{self.width} not divisible by f={f}")

    def encode(self) -> bytes:
        n, h, w, ch = self.pixels.shape
        header = ARCHIVE_MAGIC + _HEADER.pack(ARCHIVE_VERSION, n, h, w, ch, self.num_classes)
        return header + self.pixels.tobytes() + self.labels.astype("<u2").tobytes()

    @classmethod
    def decode(cls, payload: bytes) -> "DatasetArchive":
        if payload[:len(ARCHIVE_MAGIC)] != ARCHIVE_MAGIC:
            raise FormatError("not a dataset archive (bad magic)")
        offset = len(ARCHIVE_MAGIC)
        if len(payload) < offset + _HEADER.size:
            raise FormatError("dataset archive header truncated")
        version, n, h, w, ch, classes = _HEADER.unpack_from(payload, offset)
        if version != ARCHIVE_VERSION:
            raise FormatError(f"unsupported archive version {version}")
        offset += _HEADER.size
        pixel_bytes = n * h * w * ch
        if len(payload) - offset != pixel_bytes + 2 * n:
            raise FormatError(f"archive payload is {len(payload) - offset} bytes, "
                              f"header promises {pixel_bytes + 2 * n}")
        pixels = np.frombuffer(payload, dtype=np.uint8, count=pixel_bytes, offset=offset)
        labels = np.frombuffer(payload, dtype="<u2", count=n, offset=offset + pixel_bytes)
        return cls(pixels=pixels.reshape(n, h, w, ch).copy(), labels=labels.copy(), num_classes=classes)

    def save(self, path) -> str:
        payload = self.encode()
        atomic_write_bytes(path, payload)
        digest = content_hash(payload)
        logger.info("wrote archive %s: N=%d %dx%dx%d classes=%d (%s)", path, len(self),
                    self.height, self.width, self.channels, self.num_classes, digest[:12])
        return digest

    @classmethod
    def load(cls, path) -> "DatasetArchive":
        path = Path(path)
        if not path.exists():
            raise DataError(f"dataset archive not found: {path}")
        return cls.decode(path.read_bytes())

    def subset(self, indices) -> "DatasetArchive":
        return DatasetArchive(self.pixels[indices], self.labels[indices], self.num_classes)


def _image_files(directory: Path) -> List[Tuple[Path, Optional[str]]]:
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir())
    if subdirs:
        files = [(f, d.name) for d in subdirs for f in sorted(d.iterdir())
                 if f.suffix.lower() in IMAGE_SUFFIXES]
    else:
        files = [(f, None) for f in sorted(directory.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda item: item[0].relative_to(directory).as_posix())


def ingest_directory(directory) -> DatasetArchive:
    """
    Images in lexicographic order of their relative path. Class subdirectories
    (sorted by name) become class ids; a flat directory is unlabeled.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = _image_files(directory)
    if not files:
        raise DataError(f"no images found in {directory}")
    class_names = sorted({c for _, c in files if c is not None})
    class_ids = {name: i for i, name in enumerate(class_names)}

    arrays, labels = [], []
    for path, cls_name in files:
        with Image.open(path) as img:
            mode = "L" if img.mode in ("1", "L", "P", "I", "I;16", "LA") else "RGB"
            arr = np.asarray(img.convert(mode), dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arrays and arr.shape != arrays[0].shape:
            raise DataError(f"{path.name} is {arr.shape}, expected {arrays[0].shape} like the first image")
        arrays.append(arr)
        labels.append(class_ids[cls_name] if cls_name is not None else AppConfig.UNLABELED)
    logger.info("ingested %d images from %s (%d classes)", len(arrays), directory, len(class_names))
    return DatasetArchive(np.stack(arrays), np.array(labels), num_classes=len(class_names))


def _open_maybe_gzip(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian, u8 payload); images give (N, rows, cols), labels (N,)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"IDX file not found: {path}")
    data = _open_maybe_gzip(path)
    if len(data) < 8:
        raise FormatError(f"{path.name}: IDX header truncated")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES:
        n, rows, cols = struct.unpack(">III", data[4:16])
        shape, offset = (n, rows, cols), 16
    elif magic == IDX_LABELS:
        (n,) = struct.unpack(">I", data[4:8])
        shape, offset = (n,), 8
    else:
        raise FormatError(f"{path.name}: unsupported IDX magic 0x{magic:08x}")
    count = int(np.prod(shape))
    if len(data) - offset != count:
        raise FormatError(f"{path.name}: payload has {len(data) - offset} bytes, header promises {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(shape).copy()


def pad_images(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (N, h, w) images symmetrically to (N, size, size)."""
    n, h, w = images.shape
    if h > size or w > size:
        raise DataError(f"cannot pad {h}x{w} images down to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, size, size), dtype=images.dtype)
    out[:, top:top + h, left:left + w] = images
    return out


def ingest_idx(images_path, labels_path=None, pad_to: int = 32,
               limit: Optional[int] = None) -> DatasetArchive:
    images = read_idx(images_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path} does not hold images")
    if pad_to:
        images = pad_images(images, pad_to)
    if labels_path:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path} does not hold labels")
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        num_classes = int(labels.max()) + 1 if labels.size else 0
    else:
        labels = np.full(images.shape[0], AppConfig.UNLABELED)
        num_classes = 0
    if limit:
        images, labels = images[:limit], labels[:limit]
    return DatasetArchive(images[:, :, :, None], labels, num_classes=num_classes)


def ingest(source, idx_labels=None, pad_to: int = 32, limit: Optional[int] = None) -> DatasetArchive:
    """Directory of images, an existing archive, or an IDX image file."""
    source = Path(source)
    if source.is_dir():
        return ingest_directory(source)
    if not source.exists():
        raise DataError(f"ingest source not found: {source}")
    head = source.read_bytes()[:len(ARCHIVE_MAGIC)]
    if head == ARCHIVE_MAGIC:
        return DatasetArchive.load(source)
    return ingest_idx(source, idx_labels, pad_to=pad_to, limit=limit)
