"""Configuration settings for the DP latent diffusion toolkit."""

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from utils.errors import ConfigError

CONFIG_VERSION = 1


def get_setting(name: str, default: str = "") -> str:
    """
    Read a DPLDM_<NAME> override from the environment (populated from .env by app.py).
    """
    return os.getenv(f"DPLDM_{name.upper()}", default)


class AppConfig:
    APP_TITLE = "DP-LDM Desk"
    VERSION = "1.0"

    OUTPUT_DIR = get_setting("OUTPUT_DIR", "runs/desk")
    WORKERS = int(get_setting("WORKERS", "1") or 1)
    LOG_LEVEL = get_setting("LOG_LEVEL", "INFO")
    RESEARCH_MODE = get_setting("RESEARCH_MODE", "1") not in ("0", "false", "no")
    IDX_MIRROR = get_setting("IDX_MIRROR", "https://ossci-datasets.s3.amazonaws.com/mnist")

    # Diffusion defaults
    TIMESTEPS = 1000
    BETA_START = 1e-4
    BETA_END = 0.02

    # Accounting
    RDP_FRACTIONAL_ORDERS = (1.25, 1.5, 1.75)
    RDP_MAX_ORDER = 256
    CALIBRATION_RTOL = 1e-4
    BUDGET_MISMATCH_RTOL = 0.01

    # Evaluation
    PSD_FLOOR = 1e-8
    FEATURE_DIM = 32

    UNLABELED = 0xFFFF

    COLORS = {
        'primary': '#1E3A5F',
        'secondary': '#2C5282',
        'success': '#38A169',
        'warning': '#D69E2E',
        'danger': '#E53E3E',
        'text_light': '#718096'
    }


def _tuple_of_ints(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e


@dataclass(frozen=True)
class DataSettings:
    public: str = "data/public.dpds"
    private: str = "data/private.dpds"
    private_test: str = ""


@dataclass(frozen=True)
class AutoencoderSettings:
    f: int = 2
    latent_channels: int = 3
    base_channels: int = 16
    channel_mult: Tuple[int, ...] = ()
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class DiffusionSettings:
    timesteps: int = 200
    beta_start: float = AppConfig.BETA_START
    beta_end: float = AppConfig.BETA_END
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    heads: int = 1
    conditional: bool = True
    cond_dim: int = 16
    null_class: bool = False
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class DPSettings:
    batch_size: int = 256
    clip_norm: float = 1.0
    noise_multiplier: Optional[float] = None
    target_epsilon: Optional[float] = 10.0
    delta: float = 1e-5
    learning_rate: float = 0.05
    epochs: int = 0
    iterations: int = 0
    physical_batch_size: int = 64
    seed: int = 0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class FinetuneSettings:
    trainable: str = "all-attn+cond"
    lora_rank: int = 0
    lora_scale: float = 1.0
    lora_targets: Tuple[str, ...] = ("to_q", "to_k", "to_v")


@dataclass(frozen=True)
class EvalSettings:
    num_samples: int = 256
    feature_dim: int = AppConfig.FEATURE_DIM
    feature_seed: int = 1234
    dpfid_epsilon: float = 1.0
    dpfid_delta: float = 1e-5
    neighboring: str = "add_remove"
    classifier_epochs: int = 30
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    output_dir: str = AppConfig.OUTPUT_DIR
    workers: int = AppConfig.WORKERS
    dtype: str = "float64"
    data: DataSettings = field(default_factory=DataSettings)
    autoencoder: AutoencoderSettings = field(default_factory=AutoencoderSettings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    dp: DPSettings = field(default_factory=DPSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    text: str = ""

    @property
    def config_hash(self) -> str:
        return config_hash(self.text)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


_SECTIONS = {
    "data": DataSettings,
    "autoencoder": AutoencoderSettings,
    "diffusion": DiffusionSettings,
    "dp": DPSettings,
    "finetune": FinetuneSettings,
    "eval": EvalSettings,
}


def canonical_text(parser: configparser.ConfigParser) -> str:
    """Sorted, whitespace-normalized rendering used for hashing and echoing."""
    lines = []
    for section in sorted(parser.sections()):
        lines.append(f"[{section}]")
        for key in sorted(parser[section]):
            lines.append(f"{key} = {parser[section][key].strip()}")
    return "\n".join(lines) + "\n"


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coerce(cls_name: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            if raw.lower() in ("", "none"):
                return None
            return float(raw)
        if isinstance(default, tuple):
            if default and isinstance(default[0], str):
                return tuple(v.strip() for v in raw.split(",") if v.strip())
            return _tuple_of_ints(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"[{cls_name}] {key}: cannot parse {raw!r}") from e


def _build(cls, section_name: str, items) -> object:
    defaults = cls()
    known = {f for f in cls.__dataclass_fields__}
    values = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"unknown key [{section_name}] {key}")
        values[key] = _coerce(section_name, key, raw, getattr(defaults, key))
    return cls(**values)


def parse_run_config(text: str) -> RunConfig:
    """Parse sectioned key = value text into a validated RunConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e

    if not parser.has_section("run") or "version" not in parser["run"]:
        raise ConfigError("config needs a [run] section with a version key")
    unknown = set(parser.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    run = parser["run"]
    version = _coerce("run", "version", run["version"], 0)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    for key in run:
        if key not in ("version", "output_dir", "workers", "dtype"):
            raise ConfigError(f"unknown key [run] {key}")

    sections = {
        name: _build(cls, name, parser.items(name)) if parser.has_section(name) else cls()
        for name, cls in _SECTIONS.items()
    }
    config = RunConfig(
        version=version,
        output_dir=run.get("output_dir", AppConfig.OUTPUT_DIR).strip(),
        workers=_coerce("run", "workers", run.get("workers", str(AppConfig.WORKERS)), 0),
        dtype=run.get("dtype", "float64").strip(),
        text=canonical_text(parser),
        **sections,
    )
    validate_run_config(config)
    return config


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(encoding="utf-8"))


def validate_run_config(config: RunConfig) -> None:
    if config.dtype not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {config.dtype}")
    if config.workers < 1:
        raise ConfigError("workers must be >= 1")

    ae = config.autoencoder
    if ae.f < 2 or ae.f & (ae.f - 1):
        raise ConfigError(f"autoencoder f must be a power of two >= 2, got {ae.f}")

    dm = config.diffusion
    if dm.timesteps < 1:
        raise ConfigError("diffusion timesteps must be >= 1")
    if not 0 < dm.beta_start <= dm.beta_end < 1:
        raise ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1")

    dp = config.dp
    if dp.clip_norm <= 0:
        raise ConfigError("dp clip_norm must be > 0")
    if dp.noise_multiplier is None and dp.target_epsilon is None:
        raise ConfigError("dp needs noise_multiplier or target_epsilon")
    if dp.noise_multiplier is not None and dp.noise_multiplier < 0:
        raise ConfigError("dp noise_multiplier must be >= 0")
    if not 0 < dp.delta < 1:
        raise ConfigError("dp delta must lie in (0, 1)")
    if dp.epochs <= 0 and dp.iterations <= 0:
        raise ConfigError("dp needs epochs or iterations")

    if config.eval.neighboring not in ("add_remove", "replace"):
        raise ConfigError("eval neighboring must be add_remove or replace")
