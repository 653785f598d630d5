#!/usr/bin/env python3
"""
invmark Watermarker
Deployment API: pattern/payload messages, utterance-level encoding and brute-force detection

Utterances are tiled as [1 EUL watermark][10% EUL gap] repeating; a segment is placed only
when it fits completely. Detection slides a 1-EUL window in 5% EUL steps, decodes every
window with the same latent draw and keeps the window whose pattern bits match best.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import InvMarkConfig
from errors import ConfigError, NoEncodableSegmentError, ValidationError
from services.audio_io import EUL_SAMPLES, SILENCE_RMS_THRESHOLD, Waveform, is_silent
from services.inn_codec import BIT_THRESHOLD, ModelCheckpoint, decode_batch, encode_batch, encode_segment
from services.quality import snr


logger = logging.getLogger("invmark.services.watermarker")

DEFAULT_PATTERN = "1011001110"
AGGREGATE_MODES = ("best", "majority")


# ==========================================
# Bit helpers
# ==========================================

def as_bits(values: Sequence[int]) -> np.ndarray:
    bits = np.asarray(values, dtype=np.int64).reshape(-1)
    if bits.size and not np.all((bits == 0) | (bits == 1)):
        raise ValidationError("Bit vectors may only contain 0 and 1")
    return bits.astype(np.uint8)


def bits_from_string(text: str) -> np.ndarray:
    text = text.strip()
    if text and set(text) - {"0", "1"}:
        raise ValidationError(f"Not a bit string: {text!r}")
    return np.array([int(char) for char in text], dtype=np.uint8)


def bits_to_string(bits: Sequence[int]) -> str:
    return "".join(str(int(bit)) for bit in bits)


def bits_from_hex(text: str, n_bits: int) -> np.ndarray:
    """Big-endian bits of a hex payload, left-padded to n_bits"""
    cleaned = text.strip().lower().removeprefix("0x")
    try:
        value = int(cleaned, 16) if cleaned else 0
    except ValueError as e:
        raise ValidationError(f"Payload {text!r} is not hexadecimal") from e
    if value >= 1 << n_bits:
        raise ValidationError(f"Payload 0x{cleaned} does not fit in {n_bits} bits")
    return np.array([(value >> (n_bits - 1 - i)) & 1 for i in range(n_bits)], dtype=np.uint8)


def bits_to_hex(bits: Sequence[int]) -> str:
    bits = as_bits(bits)
    if bits.size == 0:
        return ""
    value = int(bits_to_string(bits), 2)
    return f"{value:0{math.ceil(bits.size / 4)}x}"


# ==========================================
# Domain types
# ==========================================

@dataclass
class WatermarkPayload:
    """Pattern bits (fixed per deployment) followed by payload bits"""

    pattern_bits: np.ndarray
    payload_bits: np.ndarray

    def __post_init__(self):
        self.pattern_bits = as_bits(self.pattern_bits)
        self.payload_bits = as_bits(self.payload_bits)

    @property
    def message_bits(self) -> int:
        return int(self.pattern_bits.size + self.payload_bits.size)


def compose_message(p: WatermarkPayload) -> np.ndarray:
    return np.concatenate([p.pattern_bits, p.payload_bits]).astype(np.uint8)


def split_message(m: Sequence[int], pattern_length: int) -> WatermarkPayload:
    m = as_bits(m)
    if not 0 <= pattern_length <= m.size:
        raise ValidationError(f"Pattern length {pattern_length} outside [0, {m.size}]")
    return WatermarkPayload(m[:pattern_length], m[pattern_length:])


@dataclass
class DetectionResult:
    offset_samples: int
    decoded_bits: np.ndarray
    pattern_score: float
    accepted: bool
    pattern_length: int
    per_window: List[Dict] = field(default_factory=list)
    aggregate_payload: Optional[np.ndarray] = None

    @property
    def payload_bits(self) -> np.ndarray:
        return self.decoded_bits[self.pattern_length:]

    def to_dict(self) -> Dict:
        aggregate = self.aggregate_payload
        return {
            "offset_samples": int(self.offset_samples),
            "offset_seconds": round(self.offset_samples / EUL_SAMPLES, 4),
            "pattern_score": float(self.pattern_score),
            "accepted": bool(self.accepted),
            "bits": bits_to_string(self.decoded_bits),
            "payload_bits": bits_to_string(self.payload_bits),
            "payload_hex": bits_to_hex(self.payload_bits),
            "aggregate_payload": None if aggregate is None else bits_to_string(aggregate),
            "offsets": [row["offset"] for row in self.per_window],
            "scores": [row["score"] for row in self.per_window],
            "per_window": self.per_window,
        }


@dataclass(frozen=True)
class WatermarkerSettings:
    pattern: str = DEFAULT_PATTERN
    tau: float = 0.9
    step_fraction: float = 0.05
    max_repeats: int = 3
    snr_high_db: float = 38.0
    snr_low_db: float = 25.0
    gap_fraction: float = 0.10
    silence_rms_threshold: float = SILENCE_RMS_THRESHOLD
    aggregate: str = "best"
    z_seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"Acceptance threshold must be within [0, 1], got {self.tau}")
        if not 0.0 < self.step_fraction <= 1.0:
            raise ConfigError(f"BFD step fraction must be within (0, 1], got {self.step_fraction}")
        if self.aggregate not in AGGREGATE_MODES:
            raise ConfigError(f"Unknown aggregation mode {self.aggregate!r}")
        if self.max_repeats < 0 or self.gap_fraction < 0.0:
            raise ConfigError("max_repeats and gap_fraction must be nonnegative")
        bits_from_string(self.pattern)

    @property
    def pattern_bits(self) -> np.ndarray:
        return bits_from_string(self.pattern)

    @property
    def gap_samples(self) -> int:
        return int(round(self.gap_fraction * EUL_SAMPLES))

    @property
    def step_samples(self) -> int:
        return max(1, int(round(self.step_fraction * EUL_SAMPLES)))

    @classmethod
    def from_config(cls, cfg: InvMarkConfig) -> "WatermarkerSettings":
        defaults = cls()
        return cls(
            pattern=cfg.get("PATTERN_BITS", defaults.pattern),
            tau=cfg.get_float("ACCEPT_THRESHOLD", defaults.tau),
            step_fraction=cfg.get_float("BFD_STEP_FRACTION", defaults.step_fraction),
            max_repeats=cfg.get_int("MAX_REPEATS", defaults.max_repeats),
            snr_high_db=cfg.get_float("SNR_HIGH_DB", defaults.snr_high_db),
            snr_low_db=cfg.get_float("SNR_LOW_DB", defaults.snr_low_db),
            gap_fraction=cfg.get_float("GAP_FRACTION", defaults.gap_fraction),
            silence_rms_threshold=cfg.get_float("SILENCE_RMS_THRESHOLD", defaults.silence_rms_threshold),
            aggregate=cfg.get("AGGREGATE", defaults.aggregate),
            z_seed=cfg.get_int("Z_SEED", defaults.z_seed),
            batch_size=cfg.get_int("DECODE_BATCH_SIZE", defaults.batch_size),
        )


def tile_starts(length: int, gap_samples: int, eul_samples: int = EUL_SAMPLES) -> List[int]:
    """Segment start offsets; the last segment must fit completely"""
    if length < eul_samples:
        return []
    return list(range(0, length - eul_samples + 1, eul_samples + gap_samples))


# ==========================================
# Watermarker
# ==========================================

class Watermarker:
    """Utterance-level encode and detect over a frozen checkpoint"""

    def __init__(self, ck: ModelCheckpoint, settings: Optional[WatermarkerSettings] = None):
        self.ck = ck.eval()
        self.settings = settings or WatermarkerSettings()
        if self.settings.pattern_bits.size > ck.message_bits:
            raise ConfigError(
                f"Pattern of {self.settings.pattern_bits.size} bits exceeds K={ck.message_bits}"
            )

    @property
    def pattern_length(self) -> int:
        return int(self.settings.pattern_bits.size)

    @property
    def payload_length(self) -> int:
        return self.ck.message_bits - self.pattern_length

    def payload(self, payload_bits: Sequence[int]) -> WatermarkPayload:
        payload = WatermarkPayload(self.settings.pattern_bits, payload_bits)
        if payload.message_bits != self.ck.message_bits:
            raise ConfigError(
                f"Payload of {payload.payload_bits.size} bits does not fit K={self.ck.message_bits} "
                f"with a {self.pattern_length}-bit pattern"
            )
        return payload

    def _repeat_encode(self, host_segment: np.ndarray, watermarked: np.ndarray, message: np.ndarray) -> Tuple[np.ndarray, float, int]:
        settings = self.settings
        current_snr = snr(host_segment, watermarked)
        repeats = 0
        while current_snr > settings.snr_high_db and repeats < settings.max_repeats:
            candidate = encode_segment(watermarked, message, self.ck)
            candidate_snr = snr(host_segment, candidate)
            if candidate_snr >= current_snr:
                break
            watermarked, current_snr = candidate, candidate_snr
            repeats += 1
        return watermarked, current_snr, repeats

    def encode_utterance(self, host: Waveform, payload: WatermarkPayload) -> Tuple[Waveform, Dict]:
        settings = self.settings
        if len(host) < EUL_SAMPLES:
            raise ValidationError(f"Host has {len(host)} samples; at least {EUL_SAMPLES} (1 EUL) required")
        message = compose_message(payload)
        if message.size != self.ck.message_bits:
            raise ConfigError(f"Message has {message.size} bits, checkpoint expects K={self.ck.message_bits}")

        output = host.samples.copy()
        rows: List[Dict] = []
        candidates: List[int] = []
        for index, start in enumerate(tile_starts(len(host), settings.gap_samples)):
            segment = host.samples[start:start + EUL_SAMPLES]
            row = {"index": index, "offset": start, "snr_db": None, "repeats": 0, "skipped": False, "reason": None}
            if is_silent(segment, settings.silence_rms_threshold):
                row.update(skipped=True, reason="silent")
            else:
                candidates.append(index)
            rows.append(row)

        if candidates:
            hosts = np.stack([host.samples[rows[i]["offset"]:rows[i]["offset"] + EUL_SAMPLES] for i in candidates])
            first_pass = encode_batch(hosts, np.tile(message, (len(candidates), 1)), self.ck)
            for host_segment, watermarked, index in zip(hosts, first_pass, candidates):
                watermarked, quality, repeats = self._repeat_encode(host_segment, watermarked, message)
                row = rows[index]
                row.update(snr_db=None if math.isinf(quality) else round(quality, 3), repeats=repeats)
                if quality < settings.snr_low_db:
                    row.update(skipped=True, reason="low_snr")
                    continue
                output[row["offset"]:row["offset"] + EUL_SAMPLES] = watermarked

        encoded = sum(1 for row in rows if not row["skipped"])
        report = {
            "segments": rows,
            "segments_total": len(rows),
            "segments_encoded": encoded,
            "segments_skipped": len(rows) - encoded,
            "message_bits": bits_to_string(message),
            "utterance_snr_db": None,
        }
        if encoded == 0:
            raise NoEncodableSegmentError("No encodable segment: every segment is silent or below the SNR floor", report)

        utterance_snr = snr(host.samples, output)
        report["utterance_snr_db"] = None if math.isinf(utterance_snr) else round(utterance_snr, 3)
        logger.info("🔏 Encoded %d/%d segments (utterance SNR %s dB)", encoded, len(rows), report["utterance_snr_db"])
        return Waveform(output, host.sample_rate), report

    def _score(self, bits: np.ndarray, pattern: np.ndarray) -> np.ndarray:
        if pattern.size == 0:
            return np.ones(bits.shape[0])
        return np.mean(bits[:, :pattern.size] == pattern[None, :], axis=1)

    def decode_windows(self, audio: Waveform, offsets: Sequence[int]) -> np.ndarray:
        """Hard bits (W, K) for 1-EUL windows at the given offsets"""
        results = []
        for start in range(0, len(offsets), self.settings.batch_size):
            chunk = offsets[start:start + self.settings.batch_size]
            windows = np.stack([audio.samples[o:o + EUL_SAMPLES] for o in chunk])
            soft = decode_batch(windows, self.ck, z_seed=self.settings.z_seed)
            results.append((soft >= BIT_THRESHOLD).astype(np.uint8))
        return np.concatenate(results, axis=0)

    def decode_at(self, audio: Waveform, offset: int, pattern: Optional[Sequence[int]] = None) -> DetectionResult:
        """Decode the single window starting at offset (used by oracle/sync locators)"""
        pattern = self.settings.pattern_bits if pattern is None else as_bits(pattern)
        if offset < 0 or offset + EUL_SAMPLES > len(audio):
            raise ValidationError(f"Window at {offset} does not fit in {len(audio)} samples")
        bits = self.decode_windows(audio, [offset])
        score = float(self._score(bits, pattern)[0])
        return DetectionResult(offset, bits[0], score, score >= self.settings.tau, int(pattern.size),
                               per_window=[{"offset": int(offset), "score": score}])

    def bfd_decode(self, audio: Waveform, pattern: Optional[Sequence[int]] = None,
                   step_fraction: Optional[float] = None) -> DetectionResult:
        """Brute-force detection: best pattern match over every step-aligned window"""
        settings = self.settings
        pattern = settings.pattern_bits if pattern is None else as_bits(pattern)
        if len(audio) < EUL_SAMPLES:
            raise ValidationError(f"Audio has {len(audio)} samples; at least {EUL_SAMPLES} (1 EUL) required")
        step = settings.step_samples if step_fraction is None else max(1, int(round(step_fraction * EUL_SAMPLES)))

        offsets = list(range(0, len(audio) - EUL_SAMPLES + 1, step))
        bits = self.decode_windows(audio, offsets)
        scores = self._score(bits, pattern)
        best = int(np.argmax(scores))  # first maximum, i.e. lowest offset on ties
        accepted = bool(scores[best] >= settings.tau)
        per_window = [{"offset": int(o), "score": float(s)} for o, s in zip(offsets, scores)]

        aggregate = None
        if settings.aggregate == "majority":
            mask = scores >= settings.tau
            if np.any(mask):
                weights = scores[mask]
                votes = weights @ bits[mask][:, pattern.size:].astype(np.float64) / weights.sum()
                aggregate = (votes >= 0.5).astype(np.uint8)

        logger.debug("🔎 BFD over %d windows: best offset %d score %.2f accepted=%s",
                     len(offsets), offsets[best], scores[best], accepted)
        return DetectionResult(offsets[best], bits[best], float(scores[best]), accepted, int(pattern.size),
                               per_window=per_window, aggregate_payload=aggregate)


def encode_utterance(host: Waveform, payload: WatermarkPayload, ck: ModelCheckpoint,
                     settings: Optional[WatermarkerSettings] = None) -> Tuple[Waveform, Dict]:
    return Watermarker(ck, settings).encode_utterance(host, payload)


def bfd_decode(audio: Waveform, pattern: Sequence[int], ck: ModelCheckpoint, step_fraction: float = 0.05,
               settings: Optional[WatermarkerSettings] = None) -> DetectionResult:
    return Watermarker(ck, settings).bfd_decode(audio, pattern, step_fraction)
