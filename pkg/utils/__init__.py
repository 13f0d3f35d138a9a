"""Utility modules for the DP latent diffusion toolkit."""

from .config import AppConfig, RunConfig, get_setting, load_run_config, parse_run_config
from .caching import (
    CheckpointSection,
    StageLock,
    atomic_write_bytes,
    content_hash,
    load_checkpoint,
    save_checkpoint,
)
from .helpers import (
    MetricsWriter,
    make_rng,
    safe_requests_get,
    safe_filename,
    setup_logging,
)

__all__ = [
    'AppConfig',
    'RunConfig',
    'get_setting',
    'load_run_config',
    'parse_run_config',
    'CheckpointSection',
    'StageLock',
    'atomic_write_bytes',
    'content_hash',
    'load_checkpoint',
    'save_checkpoint',
    'MetricsWriter',
    'make_rng',
    'safe_requests_get',
    'safe_filename',
    'setup_logging',
]
