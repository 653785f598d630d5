#!/usr/bin/env python3
"""
invmark Checkpoint Store
Checkpoint directories: manifest.json + params.npz (+ optimizer.pt for resumable runs)

Schema v1:
- manifest.json: schema_version, app_version, architecture, stage/step, seeds, attack weights, config
- params.npz: named arrays "codec.<param>" and "discriminator.<param>"
- optimizer.pt: optional optimizer state dicts (training resume only)
"""

import json
import logging
import os
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from config import APP_VERSION, checkpoint_cache_dir
from errors import AudioIOError, ConfigError
from services.inn_codec import Discriminator, InvertibleCodec, ModelCheckpoint
from services.spectral import SpectralGeometry


MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.npz"
OPTIMIZER_FILE = "optimizer.pt"

logger = logging.getLogger("invmark.models.checkpoint")


class CheckpointStore:
    """Read/write checkpoint directories"""

    def resolve(self, path) -> Path:
        """Accept a directory path or a bare name under INVMARK_CHECKPOINT_DIR"""
        candidate = Path(path).expanduser()
        if (candidate / MANIFEST_FILE).exists():
            return candidate
        # save() was interrupted between moving the old copy aside and installing the new one
        previous = candidate.with_name(candidate.name + ".old")
        if (previous / MANIFEST_FILE).exists():
            logger.warning("⚠️  Checkpoint %s is missing; using the previous copy %s", candidate, previous)
            return previous
        cached = checkpoint_cache_dir() / str(path)
        if (cached / MANIFEST_FILE).exists():
            return cached
        raise AudioIOError(f"Checkpoint not found: {path}")

    def save(self, ck: ModelCheckpoint, directory, optimizer_states: Optional[Dict] = None) -> Path:
        directory = Path(directory)
        tmp_dir = directory.with_name(directory.name + ".tmp")
        old_dir = directory.with_name(directory.name + ".old")
        manifest = dict(ck.manifest)
        manifest.update(ck.codec.architecture())
        manifest["schema_version"] = MANIFEST_SCHEMA_VERSION
        manifest["app_version"] = APP_VERSION
        manifest["saved_at"] = datetime.now(timezone.utc).isoformat()

        arrays = {}
        for name, tensor in ck.codec.state_dict().items():
            arrays[f"codec.{name}"] = tensor.detach().cpu().numpy()
        for name, tensor in ck.discriminator.state_dict().items():
            arrays[f"discriminator.{name}"] = tensor.detach().cpu().numpy()

        try:
            if tmp_dir.exists():
                shutil.rmtree(tmp_dir)
            tmp_dir.mkdir(parents=True)
            np.savez(tmp_dir / PARAMS_FILE, **arrays)
            with open(tmp_dir / MANIFEST_FILE, "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)
            if optimizer_states is not None:
                torch.save(optimizer_states, tmp_dir / OPTIMIZER_FILE)
            if directory.exists():
                if old_dir.exists():
                    shutil.rmtree(old_dir)
                os.replace(directory, old_dir)
            os.replace(tmp_dir, directory)
            if old_dir.exists():
                shutil.rmtree(old_dir)
        except OSError as e:
            raise AudioIOError(f"Cannot write checkpoint {directory}: {e}") from e

        ck.manifest = manifest
        logger.info("💾 Saved checkpoint %s (stage=%s, step=%s)", directory, manifest.get("stage"), manifest.get("step"))
        return directory

    def read_manifest(self, path) -> Dict:
        directory = self.resolve(path)
        try:
            with open(directory / MANIFEST_FILE, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise AudioIOError(f"Cannot read checkpoint manifest in {directory}: {e}") from e
        version = manifest.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ConfigError(f"Checkpoint schema v{version} is not supported (expected v{MANIFEST_SCHEMA_VERSION})")
        return manifest

    def load(self, path, device: str = "cpu", message_bits: Optional[int] = None) -> ModelCheckpoint:
        """Rebuild a checkpoint; message_bits different from the stored K loads only compatible params"""
        directory = self.resolve(path)
        manifest = self.read_manifest(directory)
        geometry = SpectralGeometry(**manifest.get("geometry", {}))
        stored_bits = int(manifest["message_bits"])
        codec = InvertibleCodec(
            n_blocks=int(manifest["n_blocks"]),
            message_bits=int(message_bits or stored_bits),
            hidden_channels=int(manifest.get("hidden_channels", 32)),
            geometry=geometry,
            channel_mode=manifest.get("channel_mode", "magnitude_phase"),
        )
        discriminator = Discriminator()

        try:
            with np.load(directory / PARAMS_FILE) as params:
                arrays = {name: params[name] for name in params.files}
        except (OSError, ValueError) as e:
            raise AudioIOError(f"Cannot read checkpoint parameters in {directory}: {e}") from e

        skipped = self._load_into(codec, "codec.", arrays, strict=message_bits in (None, stored_bits))
        self._load_into(discriminator, "discriminator.", arrays, strict=True)
        if skipped:
            logger.info("🧩 Re-initialised %d parameters for K=%d (base K=%d): %s",
                        len(skipped), codec.message_bits, stored_bits, ", ".join(skipped))
            manifest = dict(manifest, message_bits=codec.message_bits, base_checkpoint=str(directory))

        ck = ModelCheckpoint(codec.to(device), discriminator.to(device), manifest)
        return ck

    def load_optimizer_states(self, path) -> Optional[Dict]:
        directory = self.resolve(path)
        optimizer_path = directory / OPTIMIZER_FILE
        if not optimizer_path.exists():
            return None
        return torch.load(optimizer_path, map_location="cpu")

    def exists(self, path) -> Tuple[bool, Optional[Path]]:
        try:
            return True, self.resolve(path)
        except AudioIOError:
            return False, None

    @staticmethod
    def _load_into(module: torch.nn.Module, prefix: str, arrays: Dict[str, np.ndarray], strict: bool) -> list:
        state = module.state_dict()
        skipped = []
        for name, current in state.items():
            key = prefix + name
            if key not in arrays:
                raise ConfigError(f"Checkpoint is missing parameter {key}")
            value = torch.from_numpy(np.array(arrays[key]))
            if tuple(value.shape) != tuple(current.shape):
                if strict:
                    raise ConfigError(f"Parameter {key} has shape {tuple(value.shape)}, expected {tuple(current.shape)}")
                skipped.append(name)
                continue
            state[name] = value.to(current.dtype)
        module.load_state_dict(state)
        return skipped
