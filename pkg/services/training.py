#!/usr/bin/env python3
"""
invmark Trainer
Losses, the three-stage curriculum, the optimizer loop and validation-driven attack reweighting

Each training item runs encode → shift → one sampled attack → decode. The discriminator
alternates with the codec on clean watermarked audio. Validation every V steps measures
per-attack BER on a fixed held-out set, reweights the attack sampler and keeps the best
checkpoint of the current stage under ``<out>/best``; ``<out>/last`` always holds a
resumable snapshot.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from config import InvMarkConfig
from errors import ConfigError, TrainingDivergedError, ValidationError
from models.checkpoint import CheckpointStore
from models.database import DatabaseManager
from models.metrics import TrainingMetric, TrainingRun
from services.attacks import (
    ATTACK_KINDS, RN_SNR_RANGE_DB, AttackSimulator, AttackWeights, attack_tensor,
    default_spec, derive_seed, max_shift_samples, parse_kind, shift,
)
from services.audio_io import (
    EUL_SAMPLES, SegmentDataset, StepBatchSampler, iter_windows, load_manifest,
)
from services.evalsuite import NO_ATTACK_COLUMN
from services.inn_codec import BIT_THRESHOLD, ModelCheckpoint, build_checkpoint
from services.quality import ber, snr
from services.run_logger import log_run, log_stage_change, log_validation, process_rss_mb


logger = logging.getLogger("invmark.services.training")

PROBABILITY_CLAMP = 1e-6
# Seed-stream slots for per-step draws that are not attack items
_MESSAGE_STREAM = 1 << 20
_SHIFT_STREAM = (1 << 20) + 1
_LATENT_STREAM = (1 << 20) + 2


# ==========================================
# Losses
# ==========================================

def _as_float_tensor(value) -> torch.Tensor:
    if torch.is_tensor(value):
        return value if value.is_floating_point() else value.double()
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def message_loss(m, soft) -> torch.Tensor:
    """Mean squared error between target bits and soft decoder outputs"""
    soft = _as_float_tensor(soft)
    m = _as_float_tensor(m).to(device=soft.device, dtype=soft.dtype)
    if m.shape != soft.shape:
        raise ValidationError(f"Message shape {tuple(m.shape)} differs from decoded shape {tuple(soft.shape)}")
    return F.mse_loss(soft, m)


def perceptual_loss(x, x_wm) -> torch.Tensor:
    """Mean squared sample error between host and watermarked audio"""
    x_wm = _as_float_tensor(x_wm)
    x = _as_float_tensor(x).to(device=x_wm.device, dtype=x_wm.dtype)
    if x.shape != x_wm.shape:
        raise ValidationError(f"Host shape {tuple(x.shape)} differs from watermarked shape {tuple(x_wm.shape)}")
    return F.mse_loss(x_wm, x)


def adversarial_losses(d_host, d_wm) -> Tuple[torch.Tensor, torch.Tensor]:
    """(L_d, L_g): BCE with host=0 / watermarked=1, generator pushes d(x') toward 0"""
    d_host = _as_float_tensor(d_host).clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    d_wm = _as_float_tensor(d_wm).clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    loss_d = (-torch.log(1.0 - d_host)).mean() + (-torch.log(d_wm)).mean()
    loss_g = (-torch.log(1.0 - d_wm)).mean()
    return loss_d, loss_g


def total_loss(l_a, l_m, l_g, w: "LossWeights"):
    return w.lambda_a * l_a + l_m + w.lambda_g * l_g


# ==========================================
# Configuration
# ==========================================

@dataclass(frozen=True)
class LossWeights:
    lambda_a: float
    lambda_g: float
    learning_rate: float

    def __post_init__(self):
        if min(self.lambda_a, self.lambda_g, self.learning_rate) <= 0:
            raise ConfigError(f"Loss weights and learning rate must be positive: {self}")


@dataclass(frozen=True)
class CurriculumStage:
    stage_id: int
    steps: int
    loss_weights: LossWeights
    attacks_enabled: bool

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ConfigError(f"Curriculum stage id must be 1, 2 or 3, got {self.stage_id}")
        if self.steps < 0:
            raise ConfigError(f"Stage {self.stage_id} has a negative step count")
        if self.stage_id == 1 and self.attacks_enabled:
            raise ConfigError("Stage 1 trains without attacks")


REFERENCE_STAGES: Tuple[CurriculumStage, ...] = (
    CurriculumStage(1, 3500, LossWeights(100.0, 1e-4, 1e-4), False),
    CurriculumStage(2, 8000, LossWeights(100.0, 1e-4, 1e-4), True),
    CurriculumStage(3, 57850, LossWeights(1e4, 10.0, 1e-5), True),
)


def stages_from_config(cfg: InvMarkConfig) -> Tuple[CurriculumStage, ...]:
    stages = []
    for ref in REFERENCE_STAGES:
        prefix = f"STAGE{ref.stage_id}_"
        weights = LossWeights(
            lambda_a=cfg.get_float(prefix + "LAMBDA_A", ref.loss_weights.lambda_a),
            lambda_g=cfg.get_float(prefix + "LAMBDA_G", ref.loss_weights.lambda_g),
            learning_rate=cfg.get_float(prefix + "LR", ref.loss_weights.learning_rate),
        )
        stages.append(CurriculumStage(ref.stage_id, cfg.get_int(prefix + "STEPS", ref.steps), weights,
                                      ref.attacks_enabled))
    return tuple(stages)


def stage_at(stages: Tuple[CurriculumStage, ...], step: int) -> CurriculumStage:
    """Stage owning the 0-based optimizer step"""
    boundary = 0
    for stage in stages:
        boundary += stage.steps
        if step < boundary:
            return stage
    return stages[-1]


@dataclass
class TrainingConfig:
    train_manifest: Path
    output_dir: Path
    valid_manifest: Optional[Path] = None
    stages: Tuple[CurriculumStage, ...] = REFERENCE_STAGES
    n_blocks: int = 8
    message_bits: int = 32
    hidden_channels: int = 32
    channel_mode: str = "magnitude_phase"
    batch_size: int = 4
    seed: int = 0
    validation_every: int = 500
    validation_segments: int = 32
    attacks: Tuple[str, ...] = tuple(kind.value for kind in ATTACK_KINDS)
    no_attack_share: float = 0.10
    shift_enabled: bool = True
    shift_headroom: float = 0.10
    init_checkpoint: Optional[str] = None
    device: str = "cpu"
    num_workers: int = 0
    log_every: int = 50
    raw_config: Dict[str, str] = field(default_factory=dict)
    fingerprint: str = ""

    @property
    def total_steps(self) -> int:
        return sum(stage.steps for stage in self.stages)

    @classmethod
    def from_config(cls, cfg: InvMarkConfig) -> "TrainingConfig":
        manifest = cfg.get_path("TRAIN_MANIFEST")
        if manifest is None:
            raise ConfigError("Missing required configuration key 'TRAIN_MANIFEST'")
        attacks = tuple(parse_kind(name).value for name in cfg.get_list(
            "ATTACKS", [kind.value for kind in ATTACK_KINDS]))
        config = cls(
            train_manifest=manifest,
            output_dir=cfg.get_path("OUTPUT_DIR", "runs/latest"),
            valid_manifest=cfg.get_path("VALID_MANIFEST"),
            stages=stages_from_config(cfg),
            n_blocks=cfg.get_int("N_BLOCKS", 8),
            message_bits=cfg.get_int("MESSAGE_BITS", 32),
            hidden_channels=cfg.get_int("HIDDEN_CHANNELS", 32),
            channel_mode=cfg.get("CHANNEL_MODE", "magnitude_phase"),
            batch_size=cfg.get_int("BATCH_SIZE", 4),
            seed=cfg.get_int("SEED", 0),
            validation_every=cfg.get_int("VALIDATION_EVERY", 500),
            validation_segments=cfg.get_int("VALIDATION_SEGMENTS", 32),
            attacks=attacks,
            no_attack_share=cfg.get_float("NO_ATTACK_SHARE", 0.10),
            shift_enabled=cfg.get_bool("SHIFT_ENABLED", True),
            shift_headroom=cfg.get_float("SHIFT_HEADROOM", 0.10),
            init_checkpoint=cfg.get("INIT_CHECKPOINT") or None,
            device=cfg.get("DEVICE", "cpu"),
            num_workers=cfg.get_int("NUM_WORKERS", 0),
            log_every=cfg.get_int("LOG_EVERY", 50),
            raw_config=cfg.get_all_config(),
            fingerprint=cfg.fingerprint(),
        )
        config.validate()
        return config

    def validate(self):
        if not Path(self.train_manifest).exists():
            raise ConfigError(f"Training manifest not found: {self.train_manifest}")
        if self.valid_manifest is not None and not Path(self.valid_manifest).exists():
            raise ConfigError(f"Validation manifest not found: {self.valid_manifest}")
        if self.batch_size < 1:
            raise ConfigError("BATCH_SIZE must be at least 1")
        if self.validation_every < 1 or self.validation_segments < 1:
            raise ConfigError("VALIDATION_EVERY and VALIDATION_SEGMENTS must be positive")
        if not 0.0 <= self.no_attack_share < 1.0:
            raise ConfigError("NO_ATTACK_SHARE must be within [0, 1)")
        if self.shift_headroom < 0.10 and self.shift_enabled:
            raise ConfigError("SHIFT_HEADROOM must cover the 10% shift range")
        if [stage.stage_id for stage in self.stages] != [1, 2, 3]:
            raise ConfigError("Curriculum stages must run 1 → 2 → 3")
        if self.total_steps < 1:
            raise ConfigError("Curriculum has no training steps")


# ==========================================
# Trainer
# ==========================================

class Trainer:
    """Single-writer training loop over a step-indexed batch stream"""

    def __init__(self, config: TrainingConfig, store: Optional[CheckpointStore] = None,
                 db_manager: Optional[DatabaseManager] = None):
        self.config = config
        self.store = store or CheckpointStore()
        self.output_dir = Path(config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.db = db_manager or DatabaseManager(self.output_dir / "invmark.db")
        self.runs = TrainingRun(self.db)
        self.metrics = TrainingMetric(self.db)

        self.simulator = AttackSimulator(config.attacks, config.no_attack_share, config.seed)
        self.run_id = f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.step = 0
        self.best_score: Optional[float] = None
        self.best_step: Optional[int] = None
        self.resumed_stage: Optional[int] = None
        self.ck: Optional[ModelCheckpoint] = None
        self.codec_optimizer: Optional[torch.optim.Optimizer] = None
        self.disc_optimizer: Optional[torch.optim.Optimizer] = None
        self._validation_set: Optional[Tuple[torch.Tensor, torch.Tensor]] = None

    @property
    def last_dir(self) -> Path:
        return self.output_dir / "last"

    @property
    def best_dir(self) -> Path:
        return self.output_dir / "best"

    # ---- setup ------------------------------------------------------------

    def _build_model(self):
        cfg = self.config
        if cfg.init_checkpoint:
            self.ck = self.store.load(cfg.init_checkpoint, cfg.device, message_bits=cfg.message_bits)
            self.ck.manifest = dict(self.ck.manifest, stage=0, step=0)
            log_run("Trainer", f"Initialised from {cfg.init_checkpoint} (K={cfg.message_bits})",
                    icon="🧩", run_id=self.run_id)
        else:
            self.ck = build_checkpoint(cfg.n_blocks, cfg.message_bits, cfg.hidden_channels,
                                       cfg.channel_mode, seed=cfg.seed)
            self.ck.codec.to(cfg.device)
            self.ck.discriminator.to(cfg.device)

        lr = cfg.stages[0].loss_weights.learning_rate
        self.codec_optimizer = torch.optim.Adam(self.ck.codec.parameters(), lr=lr)
        self.disc_optimizer = torch.optim.Adam(self.ck.discriminator.parameters(), lr=lr)

    def _resume(self) -> bool:
        found, directory = self.store.exists(self.last_dir)
        if not found:
            return False

        self.ck = self.store.load(directory, self.config.device)
        manifest = self.ck.manifest
        self.step = int(manifest.get("step", 0))
        self.run_id = manifest.get("run_id", self.run_id)
        self.best_score = manifest.get("best_score")
        self.best_step = manifest.get("best_step")
        self.resumed_stage = manifest.get("stage")
        self.codec_optimizer = torch.optim.Adam(self.ck.codec.parameters())
        self.disc_optimizer = torch.optim.Adam(self.ck.discriminator.parameters())
        states = self.store.load_optimizer_states(directory)
        if states:
            self.codec_optimizer.load_state_dict(states["codec"])
            self.disc_optimizer.load_state_dict(states["discriminator"])

        weights = manifest.get("attack_weights") or {}
        if set(weights) == {kind.value for kind in self.simulator.kinds}:
            self.simulator.set_weights(AttackWeights.from_dict(weights))
        elif weights:
            logger.warning("⚠️  Stored attack weights cover %s; enabled attacks changed, restarting from uniform",
                           sorted(weights))
        log_run("Trainer", f"Resumed from {directory}", icon="⏯️", run_id=self.run_id, step=self.step)
        return True

    def _set_learning_rate(self, lr: float):
        for optimizer in (self.codec_optimizer, self.disc_optimizer):
            for group in optimizer.param_groups:
                group["lr"] = lr

    def _datasets(self) -> Tuple[SegmentDataset, List]:
        cfg = self.config
        entries = load_manifest(cfg.train_manifest)
        train_entries = [entry for entry in entries if entry.split == "train"]
        if cfg.valid_manifest is not None:
            valid_entries = load_manifest(cfg.valid_manifest)
        else:
            valid_entries = [entry for entry in entries if entry.split == "valid"]

        dataset = SegmentDataset(train_entries, EUL_SAMPLES, cfg.shift_headroom)
        if len(dataset) == 0:
            raise ConfigError(f"No non-silent training windows in {cfg.train_manifest}")
        if not valid_entries:
            raise ConfigError("No validation audio: add 'valid' rows to the manifest or set VALID_MANIFEST")
        return dataset, valid_entries

    def _prepare_validation(self, valid_entries):
        windows = [w.samples for _, w in iter_windows(valid_entries, EUL_SAMPLES, self.config.validation_segments)]
        if not windows:
            raise ConfigError("Validation audio has no non-silent 1-second windows")
        rng = np.random.default_rng([self.config.seed, 1])
        messages = rng.integers(0, 2, size=(len(windows), self.config.message_bits))
        self._validation_set = (
            torch.from_numpy(np.stack(windows)),
            torch.from_numpy(messages.astype(np.float32)),
        )
        logger.info("🧪 Validation set: %d segments", len(windows))

    # ---- one optimizer step ----------------------------------------------

    def _shift_batch(self, host: torch.Tensor, watermarked: torch.Tensor, following: torch.Tensor,
                     step: int) -> torch.Tensor:
        if not self.config.shift_enabled:
            return watermarked
        rng = np.random.default_rng(derive_seed(self.config.seed, step, _SHIFT_STREAM))
        amounts = rng.integers(0, max_shift_samples() + 1, size=host.shape[0])
        return torch.stack([
            shift(watermarked[i], following[i], int(amounts[i])) for i in range(host.shape[0])
        ])

    def train_step(self, batch: torch.Tensor, step: int, stage: CurriculumStage) -> Dict[str, float]:
        codec, disc = self.ck.codec, self.ck.discriminator
        dtype = codec.contract.weight.dtype
        batch = batch.to(device=self.ck.device, dtype=dtype)
        host, following = batch[:, :EUL_SAMPLES], batch[:, EUL_SAMPLES:]

        generator = torch.Generator().manual_seed(derive_seed(self.config.seed, step, _MESSAGE_STREAM))
        message = torch.randint(0, 2, (host.shape[0], codec.message_bits), generator=generator)
        message = message.to(device=self.ck.device, dtype=dtype)

        codec.train()
        disc.train()
        watermarked = codec.encode(host, message)
        received = self._shift_batch(host, watermarked, following, step)
        applied: List[str] = []
        if stage.attacks_enabled:
            received, applied = self.simulator.attack_batch(received, step)

        latent = torch.Generator().manual_seed(derive_seed(self.config.seed, step, _LATENT_STREAM))
        soft = codec.decode(received, generator=latent)

        d_host = disc(host)
        l_m = message_loss(message, soft)
        l_a = perceptual_loss(host, watermarked)
        _, l_g = adversarial_losses(d_host.detach(), disc(watermarked))
        loss = total_loss(l_a, l_m, l_g, stage.loss_weights)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"Loss became non-finite at step {step} (stage {stage.stage_id})",
                str(self.last_dir) if self.last_dir.exists() else None,
            )

        self.codec_optimizer.zero_grad()
        loss.backward()
        self.codec_optimizer.step()

        d_wm = disc(watermarked.detach())
        l_d, _ = adversarial_losses(d_host, d_wm)
        self.disc_optimizer.zero_grad()
        l_d.backward()
        self.disc_optimizer.step()

        return {
            "total": float(loss.detach()),
            "message": float(l_m.detach()),
            "audio": float(l_a.detach()),
            "generator": float(l_g.detach()),
            "discriminator": float(l_d.detach()),
            "attacks": applied,
        }

    # ---- validation -------------------------------------------------------

    def validate(self) -> Tuple[Dict[str, float], float]:
        """Per-attack BER (plus the no-attack column) and mean SNR on the held-out set"""
        hosts, messages = self._validation_set
        codec = self.ck.codec
        dtype = codec.contract.weight.dtype
        codec.eval()
        columns = [NO_ATTACK_COLUMN] + [kind.value for kind in self.simulator.kinds]
        errors = {column: [] for column in columns}
        snrs = []

        with torch.no_grad():
            for start in range(0, hosts.shape[0], self.config.batch_size):
                host = hosts[start:start + self.config.batch_size].to(self.ck.device, dtype)
                message = messages[start:start + self.config.batch_size].to(self.ck.device, dtype)
                watermarked = codec.encode(host, message, clamp=True)
                snrs.extend(snr(h, w) for h, w in zip(host.cpu().numpy(), watermarked.cpu().numpy()))
                for column in columns:
                    if column == NO_ATTACK_COLUMN:
                        received = watermarked
                    else:
                        received = attack_tensor(watermarked, default_spec(column, start), rng_seed=start)
                    soft = codec.decode(received, z_seed=0).cpu().numpy()
                    errors[column].append(ber(message.cpu().numpy(), soft >= BIT_THRESHOLD))

        per_attack = {column: float(np.mean(values)) for column, values in errors.items()}
        finite = [value for value in snrs if math.isfinite(value)]
        mean_snr = float(np.mean(finite)) if finite else math.inf
        return per_attack, mean_snr

    # ---- persistence ------------------------------------------------------

    def _manifest_update(self, stage: CurriculumStage) -> Dict:
        cfg = self.config
        return {
            "stage": stage.stage_id,
            "step": self.step,
            "seed": cfg.seed,
            "run_id": self.run_id,
            "attack_weights": self.simulator.weights.as_dict(),
            "best_score": self.best_score,
            "best_step": self.best_step,
            "shift_enabled": cfg.shift_enabled,
            "rn_snr_range_db": list(RN_SNR_RANGE_DB),
            "config": cfg.raw_config,
            "config_fingerprint": cfg.fingerprint,
        }

    def _optimizer_states(self) -> Dict:
        return {"codec": self.codec_optimizer.state_dict(), "discriminator": self.disc_optimizer.state_dict()}

    # ---- main loop --------------------------------------------------------

    def run(self, resume: bool = False) -> ModelCheckpoint:
        cfg = self.config
        dataset, valid_entries = self._datasets()
        self._prepare_validation(valid_entries)

        if not (resume and self._resume()):
            self._build_model()
        self.runs.create(self.run_id, cfg.fingerprint, str(self.output_dir))
        self.runs.update(self.run_id, {"status": "running"})

        sampler = StepBatchSampler(len(dataset), cfg.batch_size, cfg.seed, start_step=self.step)
        loader = DataLoader(dataset, batch_sampler=sampler, num_workers=cfg.num_workers)
        stage = stage_at(cfg.stages, self.step)
        self._set_learning_rate(stage.loss_weights.learning_rate)
        if self.resumed_stage is not None and self.resumed_stage != stage.stage_id:
            # last/ was written at the final step of the previous stage
            log_stage_change("Trainer", self.resumed_stage, stage.stage_id, run_id=self.run_id, step=self.step)
            self.best_score, self.best_step = None, None
        else:
            log_stage_change("Trainer", None, stage.stage_id, run_id=self.run_id, step=self.step)
        log_run("Trainer", f"Training {cfg.total_steps} steps, batch {cfg.batch_size}, K={self.ck.message_bits}, "
                f"attacks {','.join(kind.value for kind in self.simulator.kinds)}",
                icon="🚀", run_id=self.run_id, step=self.step)

        started = time.monotonic()
        batches = iter(loader)
        try:
            while self.step < cfg.total_steps:
                current = stage_at(cfg.stages, self.step)
                if current.stage_id != stage.stage_id:
                    log_stage_change("Trainer", stage.stage_id, current.stage_id, run_id=self.run_id, step=self.step)
                    stage = current
                    self._set_learning_rate(stage.loss_weights.learning_rate)
                    # best-by-validation is tracked within the stage being trained
                    self.best_score, self.best_step = None, None
                    self.runs.update(self.run_id, {"current_stage": stage.stage_id})

                losses = self.train_step(next(batches), self.step, stage)
                self.step += 1

                if self.step % cfg.log_every == 0:
                    rate = self.step / max(time.monotonic() - started, 1e-9)
                    log_run("Trainer", f"loss={losses['total']:.5f} L_m={losses['message']:.4f} "
                            f"L_a={losses['audio']:.2e} L_g={losses['generator']:.3f} "
                            f"L_d={losses['discriminator']:.3f} ({rate:.2f} steps/s)",
                            icon="📉", run_id=self.run_id, step=self.step)
                    self.metrics.add(self.run_id, self.step, stage.stage_id, "train", losses=losses,
                                     rss_mb=process_rss_mb())

                if self.step % cfg.validation_every == 0 or self.step == cfg.total_steps:
                    self._validation_boundary(stage)
        except TrainingDivergedError as e:
            self.runs.update(self.run_id, {"status": "diverged", "error_message": str(e)})
            logger.error("❌ %s (last good checkpoint: %s)", e, e.last_good_checkpoint)
            raise
        except KeyboardInterrupt:
            self.runs.update(self.run_id, {"status": "interrupted", "current_step": self.step})
            raise

        self.runs.update(self.run_id, {"status": "completed", "current_step": self.step})
        log_run("Trainer", f"Training complete after {self.step} steps", icon="🏁", run_id=self.run_id, step=self.step)
        found, best = self.store.exists(self.best_dir)
        return self.store.load(best if found else self.last_dir, cfg.device)

    def _validation_boundary(self, stage: CurriculumStage):
        per_attack, mean_snr = self.validate()
        attack_ber = {kind.value: per_attack[kind.value] for kind in self.simulator.kinds}
        self.simulator.reweight(attack_ber)
        score = float(np.mean(list(per_attack.values())))
        improved = self.best_score is None or score < self.best_score

        log_validation("Trainer", per_attack, mean_snr, run_id=self.run_id, step=self.step, improved=improved)
        self.metrics.add(self.run_id, self.step, stage.stage_id, "valid", snr_db=mean_snr if math.isfinite(mean_snr) else None,
                         ber=per_attack, attack_weights=self.simulator.weights.as_dict(), rss_mb=process_rss_mb())

        if improved:
            self.best_score, self.best_step = score, self.step
            self.ck.manifest = dict(self.ck.manifest, **self._manifest_update(stage))
            self.store.save(self.ck, self.best_dir)
        self.ck.manifest = dict(self.ck.manifest, **self._manifest_update(stage))
        self.store.save(self.ck, self.last_dir, self._optimizer_states())
        self.runs.update(self.run_id, {
            "current_step": self.step,
            "current_stage": stage.stage_id,
            "best_step": self.best_step,
            "best_score": self.best_score,
        })


def train(config: TrainingConfig, resume: bool = False) -> ModelCheckpoint:
    """Run the configured curriculum and return the best checkpoint"""
    return Trainer(config).run(resume=resume)
