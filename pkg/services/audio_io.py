#!/usr/bin/env python3
"""
invmark Audio IO
Load, validate, resample, chunk and persist audio; corpus manifests and training datasets
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
import torch
from scipy.signal import resample_poly
from torch.utils.data import Dataset, Sampler

from errors import AudioIOError, ValidationError


logger = logging.getLogger("invmark.services.audio_io")

SAMPLE_RATE = 16000
EUL_SAMPLES = 16000
SILENCE_RMS_THRESHOLD = 1e-4
MANIFEST_SPLITS = ("train", "valid", "test")


@dataclass
class Waveform:
    """Mono audio at a known sample rate, samples nominally in [-1, 1]"""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / float(self.sample_rate)

    def slice(self, start: int, stop: int) -> "Waveform":
        return Waveform(self.samples[start:stop].copy(), self.sample_rate)


@dataclass
class SegmentBatch:
    """Fixed-length windows cut from one waveform"""

    items: List[Waveform]
    eul_samples: int = EUL_SAMPLES
    starts: Tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def as_array(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([item.samples for item in self.items])


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str = "train"
    corpus: str = "default"


def rms(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(samples ** 2)))


def is_silent(samples: np.ndarray, threshold: float = SILENCE_RMS_THRESHOLD) -> bool:
    return rms(samples) < threshold


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Polyphase windowed-sinc rate conversion"""
    if orig_rate == target_rate:
        return np.asarray(samples, dtype=np.float32)
    ratio = Fraction(int(target_rate), int(orig_rate)).limit_denominator(1000)
    converted = resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator)
    return converted.astype(np.float32)


def ingest(path, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file as mono float audio at target_rate"""
    try:
        data, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except (RuntimeError, OSError, sf.LibsndfileError) as e:
        raise AudioIOError(f"Cannot read audio file {path}: {e}") from e

    if data.shape[0] == 0:
        raise ValidationError(f"Audio file {path} contains no samples")

    mono = data.mean(axis=1)
    if not np.all(np.isfinite(mono)):
        raise ValidationError(f"Audio file {path} contains non-finite samples")

    mono = resample(mono, int(rate), int(target_rate))
    peak = float(np.max(np.abs(mono))) if mono.size else 0.0
    if peak > 1.0:
        # float WAVs may exceed full scale; integer PCM never does
        mono = mono / peak
    logger.debug("🎧 Ingested %s (%d Hz → %d Hz, %d samples)", path, rate, target_rate, mono.shape[0])
    return Waveform(mono, int(target_rate))


def write(w: Waveform, path) -> None:
    """Write 16-bit PCM WAV, clamping samples to [-1, 1]"""
    if len(w) == 0:
        raise ValidationError("Cannot write an empty waveform")
    if w.sample_rate != SAMPLE_RATE:
        raise ValidationError(f"Expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
    samples = np.clip(w.samples, -1.0, 1.0)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), samples, w.sample_rate, subtype="PCM_16", format="WAV")
    except (RuntimeError, OSError, sf.LibsndfileError) as e:
        raise AudioIOError(f"Cannot write audio file {path}: {e}") from e


def chunk_for_training(w: Waveform, eul_samples: int = EUL_SAMPLES, shift_headroom: float = 0.10,
                       silence_rms_threshold: float = SILENCE_RMS_THRESHOLD) -> SegmentBatch:
    """Cut non-overlapping windows of eul_samples*(1+shift_headroom), dropping silent ones"""
    if not 0.0 <= shift_headroom <= 0.5:
        raise ValidationError(f"shift_headroom must be within [0, 0.5], got {shift_headroom}")
    window = int(round(eul_samples * (1.0 + shift_headroom)))
    items: List[Waveform] = []
    starts: List[int] = []
    for start in range(0, len(w) - window + 1, window):
        piece = w.samples[start:start + window]
        if is_silent(piece, silence_rms_threshold):
            continue
        items.append(Waveform(piece.copy(), w.sample_rate))
        starts.append(start)
    return SegmentBatch(items=items, eul_samples=eul_samples, starts=tuple(starts))


def load_manifest(path, splits: Optional[Sequence[str]] = None) -> List[ManifestEntry]:
    """Parse `path[<TAB>split[<TAB>corpus]]` lines"""
    manifest_path = Path(path)
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise AudioIOError(f"Cannot read manifest {manifest_path}: {e}") from e

    entries: List[ManifestEntry] = []
    for line_num, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [field.strip() for field in line.split("\t")]
        audio_path = Path(fields[0]).expanduser()
        if not audio_path.is_absolute():
            audio_path = manifest_path.parent / audio_path
        split = fields[1] if len(fields) > 1 and fields[1] else "train"
        if split not in MANIFEST_SPLITS:
            raise ValidationError(f"{manifest_path}:{line_num}: unknown split {split!r}")
        corpus = fields[2] if len(fields) > 2 and fields[2] else "default"
        entries.append(ManifestEntry(audio_path, split, corpus))

    if splits is not None:
        entries = [entry for entry in entries if entry.split in splits]
    return entries


@functools.lru_cache(maxsize=64)
def _cached_ingest(path: str, target_rate: int) -> Waveform:
    return ingest(path, target_rate)


def iter_windows(entries: Sequence[ManifestEntry], window_samples: int, limit: Optional[int] = None,
                 silence_rms_threshold: float = SILENCE_RMS_THRESHOLD) -> Iterator[Tuple[ManifestEntry, Waveform]]:
    """Yield non-silent, non-overlapping windows from manifest entries in order"""
    produced = 0
    for entry in entries:
        w = _cached_ingest(str(entry.path), SAMPLE_RATE)
        for start in range(0, len(w) - window_samples + 1, window_samples):
            piece = w.samples[start:start + window_samples]
            if is_silent(piece, silence_rms_threshold):
                continue
            yield entry, Waveform(piece.copy(), SAMPLE_RATE)
            produced += 1
            if limit is not None and produced >= limit:
                return


class SegmentDataset(Dataset):
    """Training windows (EUL + shift headroom) indexed across a corpus"""

    def __init__(self, entries: Sequence[ManifestEntry], eul_samples: int = EUL_SAMPLES,
                 shift_headroom: float = 0.10, silence_rms_threshold: float = SILENCE_RMS_THRESHOLD):
        self.entries = list(entries)
        self.eul_samples = eul_samples
        self.shift_headroom = shift_headroom
        self.silence_rms_threshold = silence_rms_threshold
        self.window_samples = int(round(eul_samples * (1.0 + shift_headroom)))
        self.index: List[Tuple[int, int]] = []

        for entry_idx, entry in enumerate(self.entries):
            batch = chunk_for_training(_cached_ingest(str(entry.path), SAMPLE_RATE), eul_samples,
                                       shift_headroom, silence_rms_threshold)
            self.index.extend((entry_idx, start) for start in batch.starts)

        logger.info("📚 Indexed %d training windows from %d files", len(self.index), len(self.entries))

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, idx: int) -> torch.Tensor:
        entry_idx, start = self.index[idx]
        w = _cached_ingest(str(self.entries[entry_idx].path), SAMPLE_RATE)
        return torch.from_numpy(w.samples[start:start + self.window_samples].copy())


class StepBatchSampler(Sampler):
    """Infinite batch sampler whose batch for step s depends only on (seed, s)"""

    def __init__(self, n_items: int, batch_size: int, seed: int, start_step: int = 0):
        if n_items <= 0:
            raise ValidationError("Cannot sample batches from an empty dataset")
        self.n_items = n_items
        self.batch_size = batch_size
        self.seed = seed
        self.start_step = start_step
        self._cached_epoch: Optional[int] = None
        self._cached_perm: Optional[np.ndarray] = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._cached_epoch:
            self._cached_perm = np.random.default_rng([self.seed, epoch]).permutation(self.n_items)
            self._cached_epoch = epoch
        return self._cached_perm

    def batch_for_step(self, step: int) -> List[int]:
        indices = []
        position = step * self.batch_size
        while len(indices) < self.batch_size:
            epoch, offset = divmod(position, self.n_items)
            indices.append(int(self._permutation(epoch)[offset]))
            position += 1
        return indices

    def __iter__(self):
        step = self.start_step
        while True:
            yield self.batch_for_step(step)
            step += 1

    def __len__(self) -> int:
        # Infinite stream; DataLoader only needs a positive length hint
        return 2 ** 31 - 1
