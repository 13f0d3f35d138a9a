"""Dataset archives, ingestion and the built-in synthetic benchmark."""

from .datasets import DatasetArchive, ingest, ingest_directory, ingest_idx, read_idx
from .fetcher import IdxFetcher
from .synthetic_shapes import generate_shapes

__all__ = [
    'DatasetArchive',
    'IdxFetcher',
    'generate_shapes',
    'ingest',
    'ingest_directory',
    'ingest_idx',
    'read_idx',
]
