"""
The five-stage workflow over one output directory:

    train-ae -> pretrain-dm -> finetune-dp -> sample -> eval

Every stage reads its prerequisites from the output directory, writes its
artifacts atomically, echoes the config hash into them and appends metrics to
metrics.jsonl. Only one stage runs per directory at a time.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from core.accountant import PrivacyLedger, calibrate_sigma, compute_epsilon
from core.autoencoder import (
    Autoencoder,
    AutoencoderConfig,
    decode_latents,
    encode_dataset,
    reconstruction_error,
    train_autoencoder,
)
from core.classifier import train_eval_classifier
from core.diffusion import LatentDiffusion, ddpm_sample, make_schedule, pretrain
from core.dp_optimizer import DPConfig, dp_sgd_run, steps_for_epochs
from core.fid import FeatureExtractor, FeatureStats, dp_fid, fid, select_public
from core.lora import attach_lora
from core.tensor import set_default_dtype
from core.unet import UNetConfig, UNetLite, select_trainable
from data.datasets import DatasetArchive
from utils.caching import (
    SECTION_AUTOENCODER,
    SECTION_DIFFUSION,
    SECTION_STATS,
    CheckpointSection,
    StageLock,
    atomic_write_text,
    file_hash,
    find_section,
    load_checkpoint,
    save_checkpoint,
)
from utils.config import AppConfig, RunConfig
from utils.errors import BudgetRefusal, ConfigError, ContractError, DataError, FormatError, StateError
from utils.helpers import MetricsWriter, make_rng, rng_from_json, rng_state_to_json

logger = logging.getLogger(__name__)

STAGES = ("train-ae", "pretrain-dm", "finetune-dp", "sample", "eval")

AUTOENCODER_FILE = "autoencoder.ckpt"
PRETRAINED_FILE = "pretrained.ckpt"
FINETUNED_FILE = "finetuned.ckpt"
RESUME_FILE = "finetune.resume.ckpt"
SAMPLES_FILE = "samples.dpds"
STATS_FILE = "stats.ckpt"
EVAL_FILE = "eval.json"
METRICS_FILE = "metrics.jsonl"


def to_pixels(images: np.ndarray) -> np.ndarray:
    """(N, ch, H, W) in [-1, 1] -> (N, H, W, ch) uint8."""
    scaled = np.rint((np.clip(images, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8).transpose(0, 2, 3, 1)


class StagePipeline:
    """Runs stages of one RunConfig against its output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = config.output_path
        self.out.mkdir(parents=True, exist_ok=True)
        self.metrics = MetricsWriter(self.out / METRICS_FILE)
        set_default_dtype(np.float32 if config.dtype == "float32" else np.float64)
        if AppConfig.RESEARCH_MODE:
            logger.debug("research mode: noise comes from a seeded counter-based generator")
        else:
            logger.warning("research mode is off, but noise still comes from a seeded generator; "
                           "do not treat outputs as a deployment-grade DP release")

    # -- shared plumbing ---------------------------------------------------

    def _meta(self, **extra) -> dict:
        meta = {"config_hash": self.config.config_hash, "config_text": self.config.text}
        meta.update(extra)
        return meta

    def _path(self, name: str) -> Path:
        return self.out / name

    def _require(self, name: str) -> Path:
        path = self._path(name)
        if not path.exists():
            raise StateError(f"missing prerequisite {path}; run the earlier stage first")
        return path

    def load_archive(self, which: str) -> DatasetArchive:
        path = getattr(self.config.data, which)
        if not path:
            raise ConfigError(f"[data] {which} is not set")
        archive = DatasetArchive.load(path)
        if len(archive) == 0:
            raise DataError(f"{which} dataset {path} is empty")
        archive.check_divisible(self.config.autoencoder.f)
        return archive

    def autoencoder_config(self, channels: int) -> AutoencoderConfig:
        ae = self.config.autoencoder
        return AutoencoderConfig(f=ae.f, image_channels=channels, latent_channels=ae.latent_channels,
                                 base_channels=ae.base_channels, channel_mult=ae.channel_mult,
                                 seed=ae.seed)

    def unet_config(self, latent_size: int, num_classes: int) -> UNetConfig:
        dm = self.config.diffusion
        return UNetConfig(latent_channels=self.config.autoencoder.latent_channels,
                          latent_size=latent_size, base_channels=dm.base_channels,
                          channel_mult=dm.channel_mult, num_res_blocks=dm.num_res_blocks,
                          heads=dm.heads, conditional=dm.conditional,
                          num_classes=max(num_classes, 1), cond_dim=dm.cond_dim,
                          null_class=dm.null_class, seed=dm.seed)

    def load_autoencoder(self) -> Tuple[Autoencoder, str]:
        path = self._require(AUTOENCODER_FILE)
        section = find_section(load_checkpoint(path), SECTION_AUTOENCODER)
        if section is None:
            raise FormatError(f"{path} has no autoencoder section")
        model = Autoencoder(AutoencoderConfig.from_meta(section.meta["model"]))
        model.store.load_state(section.tensors)
        return model, file_hash(path)

    def _diffusion_section(self, model: LatentDiffusion, **extra) -> CheckpointSection:
        meta = self._meta(model=model.unet.config.to_meta(), schedule=model.schedule.to_meta(),
                          lora=model.lora, **extra)
        return CheckpointSection(kind=SECTION_DIFFUSION, meta=meta, tensors=model.store.state_dict())

    def load_diffusion(self, name: str) -> Tuple[LatentDiffusion, dict]:
        path = self._require(name)
        section = find_section(load_checkpoint(path), SECTION_DIFFUSION)
        if section is None:
            raise FormatError(f"{path} has no diffusion section")
        meta = section.meta
        schedule = meta["schedule"]
        model = LatentDiffusion(UNetLite(UNetConfig.from_meta(meta["model"])),
                                make_schedule(schedule["T"], schedule["beta_start"], schedule["beta_end"]))
        if meta.get("lora"):
            lora = meta["lora"]
            attach_lora(model, lora["targets"], lora["rank"], lora["scale"], lora["seed"])
        model.store.load_state(section.tensors)
        model.pretrained_from = meta.get("pretrained_from") or file_hash(path)
        return model, meta

    def encode(self, autoencoder: Autoencoder, archive: DatasetArchive) -> np.ndarray:
        return encode_dataset(autoencoder, archive.images())

    # -- stages --------------------------------------------------------------

    def train_autoencoder(self) -> dict:
        ae = self.config.autoencoder
        public = self.load_archive("public")
        model, history = train_autoencoder(public.images(), self.autoencoder_config(public.channels),
                                           epochs=ae.epochs, batch_size=ae.batch_size,
                                           lr=ae.learning_rate, momentum=ae.momentum,
                                           metrics=self.metrics)
        error = reconstruction_error(model, public.images())
        section = CheckpointSection(
            kind=SECTION_AUTOENCODER,
            meta=self._meta(model=model.config.to_meta(), history=history, reconstruction_mse=error),
            tensors=model.store.state_dict(),
        )
        digest = save_checkpoint(self._path(AUTOENCODER_FILE), [section])
        self.metrics.write({"stage": "train-ae", "reconstruction_mse": error, "checkpoint": digest})
        return {"checkpoint": digest, "reconstruction_mse": error, "history": history}

    def pretrain(self) -> dict:
        dm = self.config.diffusion
        autoencoder, ae_hash = self.load_autoencoder()
        public = self.load_archive("public")
        private = self.load_archive("private")
        latents = self.encode(autoencoder, public)
        model = LatentDiffusion(
            UNetLite(self.unet_config(latents.shape[2], max(public.num_classes, private.num_classes))),
            make_schedule(dm.timesteps, dm.beta_start, dm.beta_end),
        )
        labels = public.label_array() if dm.conditional else None
        history = pretrain(model, latents, labels, epochs=dm.epochs, batch_size=dm.batch_size,
                           lr=dm.learning_rate, momentum=dm.momentum, seed=dm.seed,
                           metrics=self.metrics)
        digest = save_checkpoint(self._path(PRETRAINED_FILE),
                                 [self._diffusion_section(model, autoencoder_hash=ae_hash, history=history)])
        return {"checkpoint": digest, "history": history, "parameters": model.store.count()}

    def dp_settings(self, n: int) -> Tuple[DPConfig, Optional[float]]:
        """DPConfig for a private set of size n; sigma calibrated when not given."""
        dp = self.config.dp
        steps = dp.iterations or steps_for_epochs(dp.epochs, n, dp.batch_size)
        q = dp.batch_size / n
        if not 0 < q <= 1:
            raise ConfigError(f"dp batch_size {dp.batch_size} exceeds the private set size {n}")
        sigma = dp.noise_multiplier
        if sigma is None:
            sigma = calibrate_sigma(q, steps, dp.delta, dp.target_epsilon)
            logger.info("calibrated sigma=%.5f for epsilon=%s (q=%.5f, P=%d)", sigma,
                        dp.target_epsilon, q, steps)
        config = DPConfig(batch_size=dp.batch_size, clip_norm=dp.clip_norm, noise_multiplier=sigma,
                          learning_rate=dp.learning_rate, steps=steps, seed=dp.seed,
                          physical_batch_size=dp.physical_batch_size, delta=dp.delta)
        return config, dp.target_epsilon

    def _prepare_finetune(self) -> Tuple[LatentDiffusion, dict]:
        model, meta = self.load_diffusion(PRETRAINED_FILE)
        model.pretrained_from = file_hash(self._path(PRETRAINED_FILE))
        ft = self.config.finetune
        if ft.lora_rank:
            attach_lora(model, ft.lora_targets, ft.lora_rank, ft.lora_scale, seed=self.config.dp.seed)
        return model, meta

    def finetune(self, resume: bool = False) -> dict:
        autoencoder, ae_hash = self.load_autoencoder()
        private = self.load_archive("private")
        latents = self.encode(autoencoder, private)
        labels = private.label_array()
        config, target = self.dp_settings(latents.shape[0])
        model, _ = self._prepare_finetune()
        ft = self.config.finetune
        spec = "lora" if ft.lora_rank else ft.trainable
        selection = select_trainable(model, spec)

        start_step, rng, ledger = 0, None, None
        resume_path = self._path(RESUME_FILE)
        if resume and resume_path.exists():
            section = find_section(load_checkpoint(resume_path), SECTION_DIFFUSION)
            if section.meta.get("config_hash") != self.config.config_hash:
                raise StateError("resume checkpoint was written under a different config")
            model.store.load_state(section.tensors)
            rng = rng_from_json(section.meta["rng_state"])
            ledger = PrivacyLedger.from_meta(section.meta["ledger"])
            start_step = ledger.steps
            logger.info("resuming DP fine-tuning at step %d/%d", start_step, config.steps)

        def checkpoint(step, run_rng, run_ledger):
            save_checkpoint(resume_path, [self._diffusion_section(
                model, pretrained_from=model.pretrained_from, autoencoder_hash=ae_hash,
                ledger=run_ledger.to_meta(), rng_state=rng_state_to_json(run_rng), step=step)])

        result = dp_sgd_run(model, latents, labels, config, trainable=None,
                            workers=self.config.workers, metrics=self.metrics,
                            start_step=start_step, rng=rng, ledger=ledger,
                            checkpoint_every=self.config.dp.checkpoint_every,
                            on_checkpoint=checkpoint)

        epsilon = result.ledger.epsilon()
        stamped, reason = self.budget_verdict(epsilon, target)
        ledger_meta = result.ledger.to_meta()
        digest = save_checkpoint(self._path(FINETUNED_FILE), [self._diffusion_section(
            model, pretrained_from=model.pretrained_from, autoencoder_hash=ae_hash,
            ledger=ledger_meta, dp_stamped=stamped, selection={
                "spec": selection.spec, "trainable": selection.trainable,
                "total": selection.total, "fraction": selection.fraction,
            })])
        if resume_path.exists():
            resume_path.unlink()
        summary = {"checkpoint": digest, "epsilon": epsilon, "delta": config.delta,
                   "sigma": config.noise_multiplier, "q": result.ledger.q, "steps": result.ledger.steps,
                   "trainable_fraction": selection.fraction, "dp_stamped": stamped}
        self.metrics.write(dict(summary, stage="finetune-dp-summary"))
        if not stamped:
            raise BudgetRefusal(reason)
        return summary

    @staticmethod
    def budget_verdict(epsilon: float, target: Optional[float]) -> Tuple[bool, str]:
        if math.isinf(epsilon):
            return False, "run used no noise; epsilon is unbounded"
        if target is None:
            return True, ""
        mismatch = abs(epsilon - target) / target
        if mismatch > AppConfig.BUDGET_MISMATCH_RTOL:
            return False, (f"accountant epsilon {epsilon:.4f} differs from the configured target "
                           f"{target} by {100 * mismatch:.2f}%; checkpoint not stamped as DP")
        return True, ""

    def sample(self, count: Optional[int] = None, labels: Optional[Sequence[int]] = None,
               which: str = "finetuned") -> dict:
        name = FINETUNED_FILE if which == "finetuned" else PRETRAINED_FILE
        model, _ = self.load_diffusion(name)
        autoencoder, _ = self.load_autoencoder()
        count = count or self.config.eval.num_samples
        if labels is not None and not model.conditional:
            raise ConfigError("labels were requested from an unconditional model")
        if model.conditional:
            k = model.unet.config.num_classes
            y = np.asarray(labels, dtype=np.int64) if labels is not None else np.arange(count) % k
            if y.shape[0] != count:
                y = np.resize(y, count)
        else:
            y = None
        try:
            latents = ddpm_sample(model, count, y, make_rng(self.config.eval.seed), progress=True)
        except ContractError as e:
            raise ConfigError(str(e)) from e
        images = decode_latents(autoencoder, latents)
        archive = DatasetArchive(
            to_pixels(images),
            y if y is not None else np.full(count, AppConfig.UNLABELED),
            num_classes=model.unet.config.num_classes if model.conditional else 0,
        )
        digest = archive.save(self._path(SAMPLES_FILE))
        self.metrics.write({"stage": "sample", "count": count, "model": which, "archive": digest})
        return {"archive": digest, "count": count, "model": which}

    # -- evaluation ------------------------------------------------------------

    def extractor(self, channels: int) -> FeatureExtractor:
        ev = self.config.eval
        return FeatureExtractor(channels, dim=ev.feature_dim, seed=ev.feature_seed)

    def stats_for(self, path: str, archive: DatasetArchive) -> FeatureStats:
        """Feature statistics of an archive, cached by archive content hash."""
        key = f"{file_hash(path)}:{self.config.eval.feature_dim}:{self.config.eval.feature_seed}"
        cache = self._path(STATS_FILE)
        sections = load_checkpoint(cache) if cache.exists() else []
        for section in sections:
            if section.kind == SECTION_STATS and section.meta.get("name") == key:
                return FeatureStats.from_section(section)
        features = self.extractor(archive.channels)(archive.images(), workers=self.config.workers)
        stats = FeatureStats.from_features(features)
        save_checkpoint(cache, sections + [stats.to_section(key)])
        return stats

    def _test_archive(self) -> Tuple[str, DatasetArchive]:
        which = "private_test" if self.config.data.private_test else "private"
        return getattr(self.config.data, which), self.load_archive(which)

    def _record_eval(self, key: str, value) -> None:
        path = self._path(EVAL_FILE)
        results = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
        results[key] = value
        results["config_hash"] = self.config.config_hash
        atomic_write_text(path, json.dumps(results, indent=2, sort_keys=True))
        self.metrics.write({"stage": "eval", key: value})

    def eval_fid(self) -> float:
        samples_path = self._require(SAMPLES_FILE)
        samples = DatasetArchive.load(samples_path)
        test_path, test = self._test_archive()
        value = fid(self.stats_for(test_path, test), self.stats_for(str(samples_path), samples))
        logger.info("FID(samples, %s) = %.6f", test_path, value)
        self._record_eval("fid", value)
        return value

    def eval_dpfid(self, candidates: Sequence[str] = (), mean_only: bool = False,
                   zero_noise: bool = False) -> dict:
        ev = self.config.eval
        private = self.load_archive("private")
        private_stats = self.stats_for(self.config.data.private, private)
        rng = make_rng(ev.seed)
        paths = list(candidates) or [self.config.data.public]
        if len(paths) > 1:
            stats = {p: self.stats_for(p, DatasetArchive.load(p)) for p in paths}
            chosen = select_public(stats, private_stats, ev.dpfid_epsilon, ev.dpfid_delta, rng,
                                   ev.neighboring, mean_only=mean_only)
            result = {"best": chosen.best, "scores": chosen.scores,
                      "epsilon": chosen.epsilon, "delta": chosen.delta}
        else:
            public_stats = self.stats_for(paths[0], DatasetArchive.load(paths[0]))
            eps, delta = ev.dpfid_epsilon, ev.dpfid_delta
            if mean_only:
                res = dp_fid(private_stats, public_stats, eps, delta, 0.0, 0.0, rng, ev.neighboring,
                             mean_only=True, zero_noise=zero_noise)
            else:
                res = dp_fid(private_stats, public_stats, eps / 2, delta / 2, eps / 2, delta / 2, rng,
                             ev.neighboring, zero_noise=zero_noise)
            result = {"candidate": paths[0], "dp_fid": res.value, "epsilon": res.epsilon,
                      "delta": res.delta, "mean_only": mean_only}
        self._record_eval("dp_fid", result)
        return result

    def eval_classifier(self) -> float:
        samples = DatasetArchive.load(self._require(SAMPLES_FILE))
        if not samples.labeled:
            raise DataError("classifier evaluation needs labeled samples from a conditional model")
        _, test = self._test_archive()
        accuracy = train_eval_classifier(samples.images(), samples.label_array(), test.images(),
                                         test.label_array(), epochs=self.config.eval.classifier_epochs,
                                         seed=self.config.eval.seed)
        self._record_eval("classifier_accuracy", accuracy)
        return accuracy

    # -- dispatch ----------------------------------------------------------------

    def run(self, stage: str, **kwargs):
        handlers = {
            "train-ae": self.train_autoencoder,
            "pretrain-dm": self.pretrain,
            "finetune-dp": self.finetune,
            "sample": self.sample,
            "eval-fid": self.eval_fid,
            "eval-dpfid": self.eval_dpfid,
            "eval-classifier": self.eval_classifier,
        }
        if stage not in handlers:
            raise ConfigError(f"unknown stage {stage!r}")
        with StageLock(self.out):
            logger.info("stage %s in %s (config %s)", stage, self.out, self.config.config_hash[:12])
            return handlers[stage](**kwargs)


def run_stage(config: RunConfig, stage: str, **kwargs):
    return StagePipeline(config).run(stage, **kwargs)


def verify_stamp(path) -> Dict[str, object]:
    """Recompute epsilon from a fine-tuned checkpoint's ledger and compare with the stamp."""
    section = find_section(load_checkpoint(path), SECTION_DIFFUSION)
    if section is None or "ledger" not in section.meta:
        raise FormatError(f"{path} carries no privacy ledger")
    ledger = section.meta["ledger"]
    recomputed = compute_epsilon(ledger["q"], ledger["sigma"], ledger["steps"], ledger["delta"],
                                 ledger.get("conversion", "improved"))
    stamped = ledger.get("epsilon")
    matches = stamped is not None and math.isclose(recomputed, stamped, rel_tol=1e-12, abs_tol=0.0)
    return {"stamped": bool(section.meta.get("dp_stamped")), "epsilon": stamped,
            "recomputed": recomputed, "matches": matches}
