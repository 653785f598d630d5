#!/usr/bin/env python3
"""
invmark Evaluation Suite
Segment, utterance, locating and shift-sweep protocols with table/JSON/CSV reports

Every protocol applies attacks one at a time to the watermarked audio and reports BER in
percent per column. MEAN is the arithmetic mean over the No Attack column and every
available attack column.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from config import APP_VERSION, InvMarkConfig
from errors import AudioIOError, CapabilityError, ConfigError, NoEncodableSegmentError
from services.attacks import (
    ATTACK_KINDS, AttackKind, attack_tensor, default_spec, lossy_codec_available, parse_kind, shift,
)
from services.audio_io import EUL_SAMPLES, SAMPLE_RATE, ManifestEntry, Waveform, ingest, iter_windows
from services.inn_codec import BIT_THRESHOLD, ModelCheckpoint, decode_batch, encode_batch, encode_segment
from services.quality import ber, pesq, snr
from services.run_logger import log_run
from services.synccode import SAMPLES_PER_BIT, barker_bits, embed_synccode, sync_template, synccode_locate
from services.watermarker import Watermarker, WatermarkerSettings, WatermarkPayload


logger = logging.getLogger("invmark.services.evalsuite")

NO_ATTACK_COLUMN = "No Attack"
PROTOCOLS = ("segment", "utterance", "locating", "shift")
LOCATORS = ("oracle", "synccode", "bfd")
DEFAULT_SHIFT_OFFSETS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35)
MEAN_CONVENTION = "arithmetic mean over No Attack and every available attack column"

__all__ = [
    "ber", "snr", "pesq", "EvalConfig", "EvalReport", "NO_ATTACK_COLUMN", "report_fingerprint",
    "run_segment_eval", "run_utterance_eval", "run_locating_eval", "run_shift_sweep", "measure_speed",
    "run_protocols",
]


@dataclass(frozen=True)
class EvalConfig:
    test_manifest: Optional[Path] = None
    output_dir: Path = Path("reports")
    seed: int = 0
    segments: int = 200
    utterances: int = 50
    controls: int = 50
    locating_samples: int = 200
    shift_samples: int = 100
    attacks: Sequence[str] = tuple(kind.value for kind in ATTACK_KINDS)
    protocols: Sequence[str] = ("segment", "utterance", "locating")
    locators: Sequence[str] = LOCATORS
    clip: bool = True
    clip_max_seconds: float = 1.0
    locating_host_seconds: float = 3.0
    shift_offsets: Sequence[float] = DEFAULT_SHIFT_OFFSETS
    batch_size: int = 16
    raw_config: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: InvMarkConfig) -> "EvalConfig":
        protocols = tuple(cfg.get_list("PROTOCOLS", ["segment", "utterance", "locating"]))
        unknown = set(protocols) - set(PROTOCOLS)
        if unknown:
            raise ConfigError(f"Unknown evaluation protocol(s): {sorted(unknown)}")
        locators = tuple(cfg.get_list("LOCATORS", list(LOCATORS)))
        if set(locators) - set(LOCATORS):
            raise ConfigError(f"Unknown locator(s): {sorted(set(locators) - set(LOCATORS))}")
        defaults = cls()
        return cls(
            test_manifest=cfg.get_path("TEST_MANIFEST"),
            output_dir=cfg.get_path("OUTPUT_DIR", "reports"),
            seed=cfg.get_int("SEED", defaults.seed),
            segments=cfg.get_int("EVAL_SEGMENTS", defaults.segments),
            utterances=cfg.get_int("EVAL_UTTERANCES", defaults.utterances),
            controls=cfg.get_int("EVAL_CONTROLS", defaults.controls),
            locating_samples=cfg.get_int("LOCATING_SAMPLES", defaults.locating_samples),
            shift_samples=cfg.get_int("SHIFT_SAMPLES", defaults.shift_samples),
            attacks=tuple(parse_kind(name).value for name in cfg.get_list("ATTACKS", list(defaults.attacks))),
            protocols=protocols,
            locators=locators,
            clip=cfg.get_bool("CLIP", defaults.clip),
            clip_max_seconds=cfg.get_float("CLIP_MAX_SECONDS", defaults.clip_max_seconds),
            locating_host_seconds=cfg.get_float("LOCATING_HOST_SECONDS", defaults.locating_host_seconds),
            shift_offsets=tuple(float(v) for v in cfg.get_list("SHIFT_OFFSETS", [str(v) for v in DEFAULT_SHIFT_OFFSETS])),
            batch_size=cfg.get_int("BATCH_SIZE", defaults.batch_size),
            raw_config=cfg.get_all_config(),
        )


def report_fingerprint(manifest: Dict, eval_config: Dict) -> str:
    """Hash of (checkpoint manifest, eval config)"""
    stable_manifest = {key: value for key, value in manifest.items() if key != "saved_at"}
    payload = json.dumps({"checkpoint": stable_manifest, "eval": eval_config}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ==========================================
# Report
# ==========================================

@dataclass
class EvalReport:
    protocol: str
    columns: List[str]
    ber: Dict[str, Optional[float]]
    snr_db: Optional[float] = None
    pesq: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)
    fingerprint: str = ""
    extra: Dict = field(default_factory=dict)

    @property
    def mean_ber(self) -> Optional[float]:
        values = [self.ber[column] for column in self.columns if self.ber.get(column) is not None]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["mean_ber"] = self.mean_ber
        data["ber_percent"] = {
            column: None if value is None else round(100.0 * value, 4) for column, value in self.ber.items()
        }
        data["mean_ber_percent"] = None if self.mean_ber is None else round(100.0 * self.mean_ber, 4)
        data["mean_convention"] = MEAN_CONVENTION
        data["pesq"] = self.pesq if self.pesq is not None else "unavailable"
        data["app_version"] = APP_VERSION
        if self.snr_db is not None and math.isinf(self.snr_db):
            data["snr_db"] = "inf"
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def _cells(self) -> List[str]:
        def fmt(value):
            return "n/a" if value is None else f"{100.0 * value:.2f}"

        snr_cell = "n/a" if self.snr_db is None else f"{self.snr_db:.2f}"
        pesq_cell = "n/a" if self.pesq is None else f"{self.pesq:.2f}"
        return [self.protocol, snr_cell, pesq_cell, fmt(self.mean_ber)] + [fmt(self.ber.get(c)) for c in self.columns]

    def header(self) -> List[str]:
        return ["Protocol", "SNR", "PESQ", "MEAN"] + list(self.columns)

    def to_table(self) -> str:
        """Aligned text table, BER in percent"""
        header, cells = self.header(), self._cells()
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        line = " | ".join(h.rjust(w) for h, w in zip(header, widths))
        rule = "-+-".join("-" * w for w in widths)
        row = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([line, rule, row])

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(self.header())
        writer.writerow(self._cells())
        return buffer.getvalue()

    def save(self, directory) -> Path:
        directory = Path(directory)
        stem = directory / f"{self.protocol}_{self.fingerprint or 'report'}"
        try:
            directory.mkdir(parents=True, exist_ok=True)
            stem.with_suffix(".json").write_text(self.to_json() + "\n", encoding="utf-8")
            stem.with_suffix(".txt").write_text(self.to_table() + "\n", encoding="utf-8")
            stem.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")
        except OSError as e:
            raise AudioIOError(f"Cannot write report {stem}: {e}") from e
        return stem.with_suffix(".json")


# ==========================================
# Helpers
# ==========================================

def _attack_columns(attacks: Sequence[str]) -> List[str]:
    return [NO_ATTACK_COLUMN] + [parse_kind(name).value for name in attacks]


def _lc_usable(columns: Sequence[str]) -> bool:
    if AttackKind.LC.value not in columns:
        return False
    available, _ = lossy_codec_available()
    if not available:
        logger.warning("⚠️  ffmpeg not found: LC column reported as unavailable")
    return available


def _corrupt(samples: np.ndarray, column: str, seed: int, keep_length: bool = True) -> np.ndarray:
    """Apply one report column's attack to a (B, L) or (L,) array"""
    if column == NO_ATTACK_COLUMN:
        return samples
    tensor = torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))
    return attack_tensor(tensor, default_spec(column, seed), rng_seed=seed, keep_length=keep_length).numpy()


def _finite_mean(values: Sequence[float]) -> Optional[float]:
    finite = [v for v in values if v is not None and math.isfinite(v)]
    if finite:
        return float(np.mean(finite))
    return math.inf if values else None


def _mean_or_none(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _finalize(protocol: str, columns: List[str], errors: Dict[str, List[float]], lc_ok: bool,
              ck: ModelCheckpoint, config: EvalConfig, **kwargs) -> EvalReport:
    ber_by_column = {}
    for column in columns:
        if column == AttackKind.LC.value and not lc_ok:
            ber_by_column[column] = None
        else:
            ber_by_column[column] = _mean_or_none(errors.get(column, []))
    fingerprint = report_fingerprint(ck.manifest, dict(config.raw_config, protocol=protocol))
    report = EvalReport(protocol, columns, ber_by_column, fingerprint=fingerprint, **kwargs)
    log_run("EvalSuite", f"{protocol}: MEAN BER={100 * (report.mean_ber or 0):.2f}% over {report.counts}",
            icon="📊")
    return report


# ==========================================
# Protocols
# ==========================================

def run_segment_eval(testset: Sequence[ManifestEntry], ck: ModelCheckpoint,
                     attacks: Optional[Sequence[str]] = None, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Encode 1-EUL test segments, attack each independently, decode with true alignment"""
    columns = _attack_columns(attacks if attacks is not None else config.attacks)
    lc_ok = _lc_usable(columns)
    rng = np.random.default_rng(config.seed)
    errors: Dict[str, List[float]] = defaultdict(list)
    corpus_errors: Dict[str, Dict[str, List[float]]] = defaultdict(lambda: defaultdict(list))
    snrs: List[float] = []
    pesqs: List[float] = []

    windows = list(iter_windows(testset, EUL_SAMPLES, config.segments))
    if not windows:
        raise ConfigError("Test set has no non-silent 1-second segments")

    for start in range(0, len(windows), config.batch_size):
        chunk = windows[start:start + config.batch_size]
        hosts = np.stack([w.samples for _, w in chunk])
        messages = rng.integers(0, 2, size=(len(chunk), ck.message_bits))
        watermarked = encode_batch(hosts, messages, ck)
        for host, wm in zip(hosts, watermarked):
            snrs.append(snr(host, wm))
            score = pesq(host, wm)
            if score is not None:
                pesqs.append(score)

        for column in columns:
            if column == AttackKind.LC.value and not lc_ok:
                continue
            received = _corrupt(watermarked, column, config.seed + start)
            bits = decode_batch(received, ck) >= BIT_THRESHOLD
            for (entry, _), m, b in zip(chunk, messages, bits):
                value = ber(m, b)
                errors[column].append(value)
                corpus_errors[entry.corpus][column].append(value)

    per_corpus = {
        corpus: {column: round(100.0 * float(np.mean(values)), 4) for column, values in by_column.items()}
        for corpus, by_column in corpus_errors.items()
    }
    return _finalize("segment", columns, errors, lc_ok, ck, config,
                     snr_db=_finite_mean(snrs), pesq=_mean_or_none(pesqs),
                     counts={"segments": len(windows)}, extra={"per_corpus_ber_percent": per_corpus})


def _payload_watermarker(ck: ModelCheckpoint, settings: Optional[WatermarkerSettings]) -> Watermarker:
    watermarker = Watermarker(ck, settings)
    if watermarker.payload_length == 0:
        raise ConfigError(
            f"Pattern of {watermarker.pattern_length} bits fills K={ck.message_bits}; payload BER needs payload bits"
        )
    return watermarker


def run_utterance_eval(testset: Sequence[ManifestEntry], ck: ModelCheckpoint, clip: bool = True,
                       config: EvalConfig = EvalConfig(),
                       settings: Optional[WatermarkerSettings] = None) -> EvalReport:
    """encode_utterance → optional front clip → one attack on the whole utterance → BFD → payload BER"""
    watermarker = _payload_watermarker(ck, settings)
    columns = _attack_columns(config.attacks)
    lc_ok = _lc_usable(columns)
    rng = np.random.default_rng(config.seed)
    errors: Dict[str, List[float]] = defaultdict(list)
    accepted: Dict[str, List[bool]] = defaultdict(list)
    snrs: List[float] = []
    controls: List[np.ndarray] = []
    skipped = 0

    for index, entry in enumerate(testset[:config.utterances]):
        host = ingest(entry.path)
        if len(host) < EUL_SAMPLES:
            skipped += 1
            continue
        payload_bits = rng.integers(0, 2, size=watermarker.payload_length)
        try:
            watermarked, report = watermarker.encode_utterance(host, watermarker.payload(payload_bits))
        except NoEncodableSegmentError:
            skipped += 1
            continue
        if report["utterance_snr_db"] is not None:
            snrs.append(report["utterance_snr_db"])

        cut = int(rng.uniform(0.0, config.clip_max_seconds) * SAMPLE_RATE) if clip else 0
        audio = watermarked.samples[cut:]
        if audio.shape[0] < EUL_SAMPLES:
            skipped += 1
            continue
        if len(controls) < config.controls:
            controls.append(host.samples[cut:])

        for column in columns:
            if column == AttackKind.LC.value and not lc_ok:
                continue
            # stretched audio is decoded as-is
            received = _corrupt(audio, column, config.seed + index, keep_length=False)
            if received.shape[0] < EUL_SAMPLES:
                continue
            result = watermarker.bfd_decode(Waveform(received))
            payload = result.aggregate_payload if result.aggregate_payload is not None else result.payload_bits
            errors[column].append(ber(payload_bits, payload))
            accepted[column].append(result.accepted)

    false_positives = [watermarker.bfd_decode(Waveform(samples)).accepted for samples in controls]
    extra = {
        "clip": clip,
        "acceptance_rate": {column: float(np.mean(flags)) for column, flags in accepted.items()},
        "false_positive_rate": float(np.mean(false_positives)) if false_positives else None,
        "tau": watermarker.settings.tau,
    }
    utterances = len(errors.get(NO_ATTACK_COLUMN, []))
    return _finalize("utterance_clip" if clip else "utterance", columns, errors, lc_ok, ck, config,
                     snr_db=_mean_or_none(snrs),
                     counts={"utterances": utterances, "skipped": skipped, "controls": len(false_positives)},
                     extra=extra)


def run_locating_eval(testset: Sequence[ManifestEntry], ck: ModelCheckpoint, locator: str = "bfd",
                      config: EvalConfig = EvalConfig(),
                      settings: Optional[WatermarkerSettings] = None) -> EvalReport:
    """1-EUL watermark at a random offset of a short host; decode via the chosen locator"""
    if locator not in LOCATORS:
        raise ConfigError(f"Unknown locator {locator!r} (expected one of {LOCATORS})")
    watermarker = _payload_watermarker(ck, settings)
    pattern = watermarker.settings.pattern_bits
    sync = barker_bits()
    sync_length = sync_template(sync).shape[0]
    host_samples = int(round(config.locating_host_seconds * SAMPLE_RATE))
    if host_samples < EUL_SAMPLES + sync_length:
        raise ConfigError("LOCATING_HOST_SECONDS leaves no room for the watermark and sync template")

    columns = _attack_columns(config.attacks)
    lc_ok = _lc_usable(columns)
    rng = np.random.default_rng(config.seed)
    errors: Dict[str, List[float]] = defaultdict(list)
    offset_errors: Dict[str, List[int]] = defaultdict(list)
    hosts = list(iter_windows(testset, host_samples, config.locating_samples))
    if not hosts:
        raise ConfigError(f"Test set has no non-silent {config.locating_host_seconds:g}-second windows")

    for index, (_, host) in enumerate(hosts):
        # the sync template sits right before the watermark, so every locator sees the same placement
        offset = int(rng.integers(sync_length, host_samples - EUL_SAMPLES + 1))
        payload_bits = rng.integers(0, 2, size=watermarker.payload_length)
        message = np.concatenate([pattern, payload_bits])
        segment = encode_segment(host.samples[offset:offset + EUL_SAMPLES], message, ck)
        samples = host.samples.copy()
        samples[offset:offset + EUL_SAMPLES] = segment
        audio = Waveform(samples)
        if locator == "synccode":
            audio = embed_synccode(audio, sync, offset - sync_length)

        for column in columns:
            if column == AttackKind.LC.value and not lc_ok:
                continue
            received = Waveform(_corrupt(audio.samples, column, config.seed + index, keep_length=False))
            if len(received) < EUL_SAMPLES + sync_length:
                continue
            last_start = len(received) - EUL_SAMPLES
            if locator == "oracle":
                result = watermarker.decode_at(received, min(offset, last_start))
            elif locator == "synccode":
                found = synccode_locate(received, sync, SAMPLES_PER_BIT) + sync_length
                result = watermarker.decode_at(received, min(found, last_start))
            else:
                result = watermarker.bfd_decode(received)
            errors[column].append(ber(payload_bits, result.payload_bits))
            offset_errors[column].append(abs(int(result.offset_samples) - offset))

    extra = {
        "locator": locator,
        "host_seconds": config.locating_host_seconds,
        "mean_offset_error_samples": {c: float(np.mean(v)) for c, v in offset_errors.items()},
    }
    return _finalize(f"locating_{locator}", columns, errors, lc_ok, ck, config,
                     counts={"samples": len(hosts)}, extra=extra)


def run_shift_sweep(testset: Sequence[ManifestEntry], ck: ModelCheckpoint,
                    offsets: Optional[Sequence[float]] = None, config: EvalConfig = EvalConfig()) -> EvalReport:
    """Decode windows displaced by fractions of EUL into the following (unwatermarked) audio"""
    offsets = tuple(offsets if offsets is not None else config.shift_offsets)
    if any(not 0.0 <= fraction <= 1.0 for fraction in offsets):
        raise ConfigError(f"Shift offsets must be fractions of EUL in [0, 1], got {offsets}")
    columns = [f"{fraction * 100:g}%" for fraction in offsets]
    rng = np.random.default_rng(config.seed)
    errors: Dict[str, List[float]] = defaultdict(list)

    contexts = list(iter_windows(testset, 2 * EUL_SAMPLES, config.shift_samples))
    if not contexts:
        raise ConfigError("Test set has no non-silent 2-second windows")
    for _, context in contexts:
        host, following = context.samples[:EUL_SAMPLES], context.samples[EUL_SAMPLES:]
        message = rng.integers(0, 2, size=ck.message_bits)
        watermarked = encode_segment(host, message, ck)
        received = np.stack([
            shift(watermarked, following, int(round(fraction * EUL_SAMPLES)), max_shift=EUL_SAMPLES)
            for fraction in offsets
        ])
        bits = decode_batch(received, ck) >= BIT_THRESHOLD
        for column, b in zip(columns, bits):
            errors[column].append(ber(message, b))

    std = {column: round(100.0 * float(np.std(values)), 4) for column, values in errors.items()}
    fingerprint = report_fingerprint(ck.manifest, dict(config.raw_config, protocol="shift"))
    report = EvalReport("shift", columns, {c: _mean_or_none(errors[c]) for c in columns},
                        counts={"segments": len(contexts)}, fingerprint=fingerprint,
                        extra={"offsets": list(offsets), "ber_std_percent": std})
    log_run("EvalSuite", "shift sweep: " + " ".join(
        f"{c}={100 * (report.ber[c] or 0):.2f}%" for c in columns), icon="📐")
    return report


def measure_speed(ck: ModelCheckpoint, seconds: float = 10.0,
                  settings: Optional[WatermarkerSettings] = None, seed: int = 0) -> Dict:
    """Real-time factors (processing time / audio time) for encode, single-window decode and BFD"""
    watermarker = Watermarker(ck, settings)
    rng = np.random.default_rng(seed)
    host = Waveform(rng.uniform(-0.1, 0.1, size=int(seconds * SAMPLE_RATE)))
    payload = watermarker.payload(rng.integers(0, 2, size=watermarker.payload_length))

    started = time.perf_counter()
    watermarked, _ = watermarker.encode_utterance(host, payload)
    encode_time = time.perf_counter() - started

    started = time.perf_counter()
    watermarker.decode_at(watermarked, 0)
    decode_time = time.perf_counter() - started

    started = time.perf_counter()
    result = watermarker.bfd_decode(watermarked)
    bfd_time = time.perf_counter() - started

    return {
        "audio_seconds": seconds,
        "device": str(ck.device),
        "encode_rtf": encode_time / seconds,
        "decode_window_rtf": decode_time / (EUL_SAMPLES / SAMPLE_RATE),
        "bfd_rtf": bfd_time / seconds,
        "bfd_windows": len(result.per_window),
    }


def run_protocols(testset: Sequence[ManifestEntry], ck: ModelCheckpoint, config: EvalConfig,
                  protocols: Optional[Sequence[str]] = None,
                  settings: Optional[WatermarkerSettings] = None) -> List[EvalReport]:
    """Run the requested protocols in order and return their reports"""
    protocols = list(protocols or config.protocols)
    if not testset:
        raise ConfigError("Evaluation test set is empty")
    if {"utterance", "locating"} & set(protocols):
        _payload_watermarker(ck, settings)
    reports: List[EvalReport] = []
    for protocol in protocols:
        if protocol == "segment":
            reports.append(run_segment_eval(testset, ck, config.attacks, config))
        elif protocol == "utterance":
            reports.append(run_utterance_eval(testset, ck, config.clip, config, settings))
        elif protocol == "locating":
            for locator in config.locators:
                try:
                    reports.append(run_locating_eval(testset, ck, locator, config, settings))
                except CapabilityError as e:
                    logger.warning("⚠️  Locating with %s skipped: %s", locator, e)
        elif protocol == "shift":
            reports.append(run_shift_sweep(testset, ck, config.shift_offsets, config))
        else:
            raise ConfigError(f"Unknown evaluation protocol {protocol!r}")
    return reports
