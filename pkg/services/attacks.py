#!/usr/bin/env python3
"""
invmark Attack Simulator
Ten signal attacks, the shift module and the BER-weighted attack sampler.

Attacks work on (B, L) float tensors. With ``differentiable=True`` the attacks that have no
useful gradient (SS, MF, QTZ, LC) pass gradients straight through, and LP uses an FIR
convolution instead of the offline Butterworth filter.
"""

from __future__ import annotations

import functools
import logging
import os
import shutil
import subprocess
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchaudio
from scipy import signal as sps

from errors import CapabilityError, ConfigError, ValidationError
from services.audio_io import EUL_SAMPLES, SAMPLE_RATE, Waveform


logger = logging.getLogger("invmark.services.attacks")


class AttackKind(str, Enum):
    RN = "RN"
    SS = "SS"
    LP = "LP"
    MF = "MF"
    RS = "RS"
    AS = "AS"
    LC = "LC"
    QTZ = "QTZ"
    EA = "EA"
    TS = "TS"
    NO_ATTACK = "NONE"


# Column order used by every report
ATTACK_KINDS: Tuple[AttackKind, ...] = (
    AttackKind.RN, AttackKind.SS, AttackKind.LP, AttackKind.MF, AttackKind.RS,
    AttackKind.AS, AttackKind.LC, AttackKind.QTZ, AttackKind.EA, AttackKind.TS,
)

RN_SNR_RANGE_DB = (30.0, 39.0)
SS_FRACTION = 0.001
LP_CUTOFF_HZ = 5000.0
LP_FIR_TAPS = 101
LP_BUTTER_ORDER = 3  # doubled by forward-backward filtering
MF_KERNEL = 3
RS_FACTORS = (2.0, 0.5)
AS_GAIN = 0.9
LC_BITRATE = "64k"
QTZ_LEVELS = 2 ** 9
EA_GAIN = 0.3
EA_DELAY_SAMPLES = 1600
TS_FACTORS = (1.1, 0.9)
WEIGHT_FLOOR = 0.01
MAX_SHIFT_FRACTION = 0.10

_STRAIGHT_THROUGH = {AttackKind.SS, AttackKind.MF, AttackKind.QTZ, AttackKind.LC}


def parse_kind(name) -> AttackKind:
    if isinstance(name, AttackKind):
        return name
    try:
        return AttackKind(str(name).strip().upper())
    except ValueError as e:
        raise ConfigError(f"Unknown attack kind {name!r}") from e


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    params: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"kind": self.kind.value, "params": dict(self.params)}


@dataclass
class AttackWeights:
    """Categorical sampling weights over a set of attack kinds"""

    kinds: Tuple[AttackKind, ...]
    weights: np.ndarray

    def __post_init__(self):
        self.kinds = tuple(parse_kind(kind) for kind in self.kinds)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.kinds),) or not self.kinds:
            raise ValidationError("AttackWeights needs one weight per kind")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValidationError(f"Attack weights must be nonnegative and sum to 1, got {self.weights}")

    @classmethod
    def uniform(cls, kinds: Sequence = ATTACK_KINDS) -> "AttackWeights":
        kinds = tuple(kinds)
        return cls(kinds, np.full(len(kinds), 1.0 / len(kinds)))

    def as_dict(self) -> Dict[str, float]:
        return {kind.value: float(w) for kind, w in zip(self.kinds, self.weights)}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "AttackWeights":
        return cls(tuple(data.keys()), np.array(list(data.values())))


def derive_seed(global_seed: int, step: int, item_index: int) -> int:
    """Per-item attack seed from (global_seed, step, item_index)"""
    return int(np.random.SeedSequence([int(global_seed), int(step), int(item_index)]).generate_state(1)[0])


def lossy_codec_available() -> Tuple[bool, Optional[str]]:
    """(available, ffmpeg path) for the MP3 round trip"""
    binary = os.environ.get("INVMARK_FFMPEG", "ffmpeg")
    path = shutil.which(binary)
    return (path is not None), path


# ---------------------------------------------------------------------------
# Individual attacks on (B, L) tensors
# ---------------------------------------------------------------------------

def _random_noise(x: torch.Tensor, snr_db: float, generator: torch.Generator) -> torch.Tensor:
    noise = torch.rand(x.shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0
    noise = noise.to(device=x.device, dtype=x.dtype)
    signal_energy = x.detach().pow(2).sum(dim=-1, keepdim=True)
    noise_energy = noise.pow(2).sum(dim=-1, keepdim=True).clamp_min(1e-20)
    scale = torch.sqrt(signal_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
    return x + noise * scale


def _sample_suppression(x: torch.Tensor, fraction: float, generator: torch.Generator) -> torch.Tensor:
    count = int(round(fraction * x.shape[-1]))
    mask = torch.ones_like(x)
    for row in range(x.shape[0]):
        idx = torch.randperm(x.shape[-1], generator=generator)[:count].to(x.device)
        mask[row, idx] = 0.0
    return x * mask


@functools.lru_cache(maxsize=8)
def _lowpass_fir(cutoff_hz: float, taps: int) -> np.ndarray:
    return sps.firwin(taps, cutoff_hz, fs=SAMPLE_RATE)


@functools.lru_cache(maxsize=8)
def _lowpass_sos(cutoff_hz: float, order: int) -> np.ndarray:
    return sps.butter(order, cutoff_hz, btype="low", fs=SAMPLE_RATE, output="sos")


def _low_pass(x: torch.Tensor, cutoff_hz: float, differentiable: bool) -> torch.Tensor:
    if differentiable:
        kernel = torch.as_tensor(_lowpass_fir(cutoff_hz, LP_FIR_TAPS), dtype=x.dtype, device=x.device)
        pad = kernel.numel() // 2
        padded = F.pad(x.unsqueeze(1), (pad, pad), mode="reflect")
        # symmetric taps: correlation == convolution, zero phase after centering
        return F.conv1d(padded, kernel.view(1, 1, -1)).squeeze(1)
    filtered = sps.sosfiltfilt(_lowpass_sos(cutoff_hz, LP_BUTTER_ORDER), x.detach().cpu().numpy().astype(np.float64), axis=-1)
    return torch.as_tensor(filtered.copy(), dtype=x.dtype, device=x.device)


def _median_filter(x: torch.Tensor, kernel: int) -> torch.Tensor:
    pad = kernel // 2
    padded = F.pad(x.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
    return padded.unfold(-1, kernel, 1).median(dim=-1).values


def _resample_round_trip(x: torch.Tensor, factor: float) -> torch.Tensor:
    pad = 256
    padded = F.pad(x.unsqueeze(1), (pad, pad), mode="replicate").squeeze(1)
    middle_rate = int(round(SAMPLE_RATE * factor))
    down = torchaudio.functional.resample(padded, SAMPLE_RATE, middle_rate)
    back = torchaudio.functional.resample(down, middle_rate, SAMPLE_RATE)
    return _fit_length(back[..., pad:], x.shape[-1])


def _quantize(x: torch.Tensor, levels: int) -> torch.Tensor:
    steps = levels - 1
    return torch.round((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * steps) / steps * 2.0 - 1.0


def _echo(x: torch.Tensor, gain: float, delay: int) -> torch.Tensor:
    delayed = F.pad(x, (delay, 0))[..., : x.shape[-1]]
    return x + gain * delayed


def _time_stretch(x: torch.Tensor, factor: float) -> torch.Tensor:
    new_length = max(2, int(round(x.shape[-1] / factor)))
    return F.interpolate(x.unsqueeze(1), size=new_length, mode="linear", align_corners=True).squeeze(1)


def _fit_length(x: torch.Tensor, length: int) -> torch.Tensor:
    if x.shape[-1] >= length:
        return x[..., :length]
    return F.pad(x, (0, length - x.shape[-1]))


def mp3_round_trip(samples: np.ndarray, bitrate: str = LC_BITRATE) -> np.ndarray:
    """Encode to MP3 and decode back through ffmpeg; output re-aligned to the input length"""
    available, ffmpeg = lossy_codec_available()
    if not available:
        raise CapabilityError("MP3 round trip needs ffmpeg on PATH (or INVMARK_FFMPEG)")

    pcm = (np.clip(samples, -1.0, 1.0) * 32767.0).round().astype("<i2").tobytes()
    raw_args = ["-f", "s16le", "-ar", str(SAMPLE_RATE), "-ac", "1"]
    try:
        encoded = subprocess.run(
            [ffmpeg, "-loglevel", "error", *raw_args, "-i", "pipe:0", "-b:a", bitrate, "-f", "mp3", "pipe:1"],
            input=pcm, capture_output=True, check=True,
        ).stdout
        decoded = subprocess.run(
            [ffmpeg, "-loglevel", "error", "-f", "mp3", "-i", "pipe:0", *raw_args, "pipe:1"],
            input=encoded, capture_output=True, check=True,
        ).stdout
    except (OSError, subprocess.CalledProcessError) as e:
        stderr = getattr(e, "stderr", b"") or b""
        raise CapabilityError(f"ffmpeg MP3 round trip failed: {stderr.decode(errors='replace').strip() or e}") from e

    out = np.frombuffer(decoded, dtype="<i2").astype(np.float32) / 32768.0
    if out.shape[0] >= samples.shape[0]:
        return out[: samples.shape[0]]
    return np.pad(out, (0, samples.shape[0] - out.shape[0]))


def _lossy_compression(x: torch.Tensor, bitrate: str) -> torch.Tensor:
    rows = [mp3_round_trip(row, bitrate) for row in x.detach().cpu().numpy()]
    return torch.as_tensor(np.stack(rows), dtype=x.dtype, device=x.device)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def attack_tensor(x: torch.Tensor, spec: AttackSpec, rng_seed: int = 0,
                  keep_length: bool = True, differentiable: bool = False) -> torch.Tensor:
    """Apply one attack to a (B, L) or (L,) tensor"""
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    kind = parse_kind(spec.kind)
    params = spec.params
    generator = torch.Generator().manual_seed(int(params.get("mask_seed", rng_seed)) % (2 ** 63))

    if kind == AttackKind.NO_ATTACK:
        out = x
    elif kind == AttackKind.RN:
        out = _random_noise(x, float(params.get("snr_db", sum(RN_SNR_RANGE_DB) / 2)), generator)
    elif kind == AttackKind.SS:
        out = _sample_suppression(x, float(params.get("fraction", SS_FRACTION)), generator)
    elif kind == AttackKind.LP:
        out = _low_pass(x, float(params.get("cutoff_hz", LP_CUTOFF_HZ)), differentiable)
    elif kind == AttackKind.MF:
        out = _median_filter(x, int(params.get("kernel", MF_KERNEL)))
    elif kind == AttackKind.RS:
        out = _resample_round_trip(x, float(params.get("factor", RS_FACTORS[0])))
    elif kind == AttackKind.AS:
        out = x * float(params.get("gain", AS_GAIN))
    elif kind == AttackKind.LC:
        out = _lossy_compression(x, str(params.get("bitrate", LC_BITRATE)))
    elif kind == AttackKind.QTZ:
        out = _quantize(x, int(params.get("levels", QTZ_LEVELS)))
    elif kind == AttackKind.EA:
        out = _echo(x, float(params.get("gain", EA_GAIN)), int(params.get("delay", EA_DELAY_SAMPLES)))
    elif kind == AttackKind.TS:
        out = _time_stretch(x, float(params.get("factor", TS_FACTORS[0])))
        if keep_length:
            out = _fit_length(out, x.shape[-1])
    else:
        raise ConfigError(f"Unsupported attack kind {kind}")

    if differentiable and kind in _STRAIGHT_THROUGH:
        out = x + (out - x).detach()
    return out.squeeze(0) if squeeze else out


def apply_attack(w, spec: AttackSpec, rng_seed: int = 0, keep_length: bool = True):
    """Attack a Waveform / numpy array / tensor; returns the same kind of object"""
    if isinstance(w, Waveform):
        tensor = torch.from_numpy(w.samples.copy())
    elif isinstance(w, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(w, dtype=np.float32))
    else:
        tensor = w
    if not torch.all(torch.isfinite(tensor)):
        raise ValidationError("Cannot attack non-finite audio")

    attacked = attack_tensor(tensor, spec, rng_seed, keep_length)
    if isinstance(w, Waveform):
        return Waveform(attacked.numpy(), w.sample_rate)
    if isinstance(w, np.ndarray):
        return attacked.numpy()
    return attacked


def shift(watermarked, following, s_samples: int, max_shift: Optional[int] = None):
    """Drop the first s samples of the segment and append s samples of following audio"""
    length = watermarked.shape[-1]
    max_shift = int(round(length * MAX_SHIFT_FRACTION)) if max_shift is None else max_shift
    if not 0 <= s_samples <= max_shift:
        raise ValidationError(f"Shift must be within [0, {max_shift}] samples, got {s_samples}")
    if following.shape[-1] < s_samples:
        raise ValidationError(f"Need {s_samples} following samples, got {following.shape[-1]}")
    if s_samples == 0:
        return watermarked
    if torch.is_tensor(watermarked):
        return torch.cat([watermarked[..., s_samples:], following[..., :s_samples]], dim=-1)
    return np.concatenate([watermarked[..., s_samples:], following[..., :s_samples]], axis=-1)


def sample_attack(weights: AttackWeights, rng_seed: int, no_attack_share: float = 0.0) -> AttackSpec:
    """Draw one attack kind and its random parameters"""
    rng = np.random.default_rng(int(rng_seed))
    if no_attack_share > 0.0 and rng.random() < no_attack_share:
        return AttackSpec(AttackKind.NO_ATTACK)

    kind = weights.kinds[int(rng.choice(len(weights.kinds), p=weights.weights))]
    params: Dict = {}
    if kind == AttackKind.RN:
        params["snr_db"] = float(rng.uniform(*RN_SNR_RANGE_DB))
    elif kind == AttackKind.SS:
        params["mask_seed"] = int(rng.integers(0, 2 ** 31 - 1))
    elif kind == AttackKind.RS:
        params["factor"] = float(rng.choice(RS_FACTORS))
    elif kind == AttackKind.TS:
        params["factor"] = float(rng.choice(TS_FACTORS))
    return AttackSpec(kind, params)


def update_weights(validation_ber: Sequence[float], kinds: Sequence = ATTACK_KINDS,
                   floor: float = WEIGHT_FLOOR) -> AttackWeights:
    """w_i = max(ber_i, floor) / sum_j max(ber_j, floor)"""
    ber = np.asarray(validation_ber, dtype=np.float64)
    if ber.shape != (len(kinds),):
        raise ValidationError(f"Expected {len(kinds)} BER values, got {ber.shape}")
    if not np.all(np.isfinite(ber)) or np.any(ber < 0.0) or np.any(ber > 1.0):
        raise ValidationError(f"BER values must lie in [0, 1], got {ber}")
    floored = np.maximum(ber, floor)
    return AttackWeights(tuple(kinds), floored / floored.sum())


def default_spec(kind, seed: int = 0) -> AttackSpec:
    """Evaluation attack for a column: fixed parameters where the attack has a choice"""
    kind = parse_kind(kind)
    if kind == AttackKind.RN:
        rng = np.random.default_rng(seed)
        return AttackSpec(kind, {"snr_db": float(rng.uniform(*RN_SNR_RANGE_DB))})
    if kind in (AttackKind.RS, AttackKind.TS):
        choices = RS_FACTORS if kind == AttackKind.RS else TS_FACTORS
        return AttackSpec(kind, {"factor": float(choices[seed % 2])})
    return AttackSpec(kind)


class AttackSimulator:
    """Item-wise weighted attack sampling for training batches"""

    def __init__(self, kinds: Sequence = ATTACK_KINDS, no_attack_share: float = 0.10, global_seed: int = 0):
        kinds = [parse_kind(kind) for kind in kinds]
        if AttackKind.LC in kinds:
            available, _ = lossy_codec_available()
            if not available:
                logger.warning("⚠️  ffmpeg not found: lossy compression (LC) excluded from training attacks")
                kinds = [kind for kind in kinds if kind != AttackKind.LC]
        if not kinds:
            raise ConfigError("No attack kinds enabled")
        self.weights = AttackWeights.uniform(kinds)
        self.no_attack_share = no_attack_share
        self.global_seed = global_seed

    @property
    def kinds(self) -> Tuple[AttackKind, ...]:
        return self.weights.kinds

    def set_weights(self, weights: AttackWeights):
        self.weights = weights

    def reweight(self, per_attack_ber: Dict[str, float]) -> AttackWeights:
        self.weights = update_weights([per_attack_ber[kind.value] for kind in self.kinds], self.kinds)
        return self.weights

    def attack_batch(self, batch: torch.Tensor, step: int) -> Tuple[torch.Tensor, List[str]]:
        """One sampled attack per item, gradients straight through where needed"""
        weights = self.weights
        outputs, applied = [], []
        for item in range(batch.shape[0]):
            seed = derive_seed(self.global_seed, step, item)
            spec = sample_attack(weights, seed, self.no_attack_share)
            outputs.append(attack_tensor(batch[item:item + 1], spec, seed, keep_length=True, differentiable=True))
            applied.append(spec.kind.value)
        return torch.cat(outputs, dim=0), applied


def max_shift_samples(eul_samples: int = EUL_SAMPLES) -> int:
    return int(round(eul_samples * MAX_SHIFT_FRACTION))
