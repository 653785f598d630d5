#!/usr/bin/env python3
"""
invmark Command Line
Subcommands: encode, decode, locate, train, eval, inspect

JSON results go to stdout; logs go to stderr and the rotating log file.
Exit codes: 0 success/accepted, 1 no watermark found, 2 validation/config, 3 IO, 4 domain failure.
"""

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from config import APP_VERSION, InvMarkConfig
from errors import AudioIOError, InvMarkError, NoEncodableSegmentError, TrainingDivergedError, ValidationError
from logging_setup import configure_logging


logger = logging.getLogger("invmark.cli")

EXIT_OK = 0
EXIT_NOT_FOUND = 1


def _emit(payload: Dict):
    """Write one JSON document to stdout"""
    def default(value):
        if isinstance(value, (np.integer,)):
            return int(value)
        if isinstance(value, (np.floating,)):
            return float(value)
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, Path):
            return str(value)
        return str(value)

    def clean(value):
        if isinstance(value, float) and math.isinf(value):
            return "inf"
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        if isinstance(value, list):
            return [clean(v) for v in value]
        return value

    sys.stdout.write(json.dumps(clean(payload), indent=2, sort_keys=True, default=default) + "\n")
    sys.stdout.flush()


def _settings(args):
    from services.watermarker import WatermarkerSettings

    cfg = InvMarkConfig(args.config) if getattr(args, "config", None) else InvMarkConfig()
    settings = WatermarkerSettings.from_config(cfg)
    if getattr(args, "majority", False):
        settings = dataclasses.replace(settings, aggregate="majority")
    return settings


def _pattern_override(args, settings):
    """--pattern HEX with --pattern-bits N replaces the configured pattern"""
    from services.watermarker import bits_from_hex, bits_to_string

    if not getattr(args, "pattern", None):
        return settings
    n_bits = args.pattern_bits or len(settings.pattern)
    pattern = bits_to_string(bits_from_hex(args.pattern, n_bits))
    return dataclasses.replace(settings, pattern=pattern)


def _load_checkpoint(args):
    from models.checkpoint import CheckpointStore

    return CheckpointStore().load(args.ckpt, args.device).eval()


# ============================================================================
# Subcommands
# ============================================================================

def cmd_encode(args) -> int:
    from services.audio_io import ingest, write
    from services.watermarker import Watermarker, bits_from_hex

    ck = _load_checkpoint(args)
    watermarker = Watermarker(ck, _pattern_override(args, _settings(args)))
    n_bits = args.payload_bits if args.payload_bits is not None else watermarker.payload_length
    if n_bits != watermarker.payload_length:
        raise ValidationError(
            f"Payload is {n_bits} bits; this checkpoint carries {watermarker.payload_length} payload bits "
            f"(K={ck.message_bits}, pattern {watermarker.pattern_length})"
        )
    payload = watermarker.payload(bits_from_hex(args.payload, n_bits))

    host = ingest(args.input)
    watermarked, report = watermarker.encode_utterance(host, payload)
    write(watermarked, args.output)

    report.update({
        "input": str(args.input),
        "output": str(args.output),
        "payload_hex": args.payload,
        "checkpoint": str(args.ckpt),
        "app_version": APP_VERSION,
    })
    sidecar = Path(args.report) if args.report else Path(str(args.output) + ".json")
    try:
        sidecar.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise AudioIOError(f"Cannot write encode report {sidecar}: {e}") from e
    logger.info("✅ Watermarked %s → %s (%d segments)", args.input, args.output, report["segments_encoded"])
    _emit(report)
    return EXIT_OK


def cmd_decode(args) -> int:
    from services.audio_io import ingest
    from services.watermarker import Watermarker

    ck = _load_checkpoint(args)
    watermarker = Watermarker(ck, _pattern_override(args, _settings(args)))
    result = watermarker.bfd_decode(ingest(args.input), step_fraction=args.step)
    payload = result.to_dict()
    if not args.windows:
        payload.pop("per_window")
    _emit(payload)
    return EXIT_OK if result.accepted else EXIT_NOT_FOUND


def cmd_locate(args) -> int:
    from services.audio_io import ingest
    from services.synccode import barker_bits, sync_template, synccode_locate
    from services.watermarker import Watermarker

    audio = ingest(args.input)
    if args.locator == "synccode":
        sync = barker_bits(args.sync_length)
        offset = synccode_locate(audio, sync)
        _emit({"locator": "synccode", "sync_offset": offset,
               "watermark_offset": offset + sync_template(sync).shape[0]})
        return EXIT_OK

    if not args.ckpt:
        raise ValidationError("locate --locator bfd needs --ckpt")
    ck = _load_checkpoint(args)
    result = Watermarker(ck, _pattern_override(args, _settings(args))).bfd_decode(audio)
    _emit({"locator": "bfd", "watermark_offset": result.offset_samples,
           "pattern_score": result.pattern_score, "accepted": result.accepted})
    return EXIT_OK if result.accepted else EXIT_NOT_FOUND


def cmd_train(args) -> int:
    from services.training import Trainer, TrainingConfig

    config = TrainingConfig.from_config(InvMarkConfig(args.config))
    trainer = Trainer(config)
    try:
        ck = trainer.run(resume=args.resume)
    except TrainingDivergedError as e:
        _emit({"error": str(e), "last_good_checkpoint": e.last_good_checkpoint})
        return e.exit_code
    _emit({
        "run_id": trainer.run_id,
        "steps": trainer.step,
        "best_checkpoint": str(trainer.best_dir),
        "last_checkpoint": str(trainer.last_dir),
        "best_step": ck.manifest.get("best_step"),
        "config_fingerprint": config.fingerprint,
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    from models import DatabaseManager, EvalReportStore
    from services.audio_io import load_manifest
    from services.evalsuite import EvalConfig, run_protocols

    cfg = InvMarkConfig(args.config)
    config = EvalConfig.from_config(cfg)
    if config.test_manifest is None or not Path(config.test_manifest).exists():
        raise ValidationError(f"Evaluation config needs an existing TEST_MANIFEST, got {config.test_manifest}")
    testset = load_manifest(config.test_manifest, splits=["test"]) or load_manifest(config.test_manifest)
    ck = _load_checkpoint(args)
    settings = _settings(args)

    output_dir = Path(args.output) if args.output else Path(config.output_dir)
    store = EvalReportStore(DatabaseManager(output_dir / "invmark.db"))
    summaries: List[Dict] = []
    for report in run_protocols(testset, ck, config, args.protocol, settings):
        path = report.save(output_dir)
        store.save(f"{report.protocol}_{report.fingerprint}", report.to_dict())
        print(report.to_table(), file=sys.stderr)
        summaries.append({
            "protocol": report.protocol,
            "fingerprint": report.fingerprint,
            "mean_ber_percent": None if report.mean_ber is None else round(100 * report.mean_ber, 4),
            "snr_db": report.snr_db,
            "report": str(path),
        })
    _emit({"reports": summaries})
    return EXIT_OK


def cmd_inspect(args) -> int:
    from models.checkpoint import CheckpointStore
    from services.evalsuite import measure_speed
    from services.inn_codec import parameter_report

    ck = _load_checkpoint(args)
    manifest = CheckpointStore().read_manifest(args.ckpt)
    payload = {"manifest": manifest, "parameters": parameter_report(ck.codec)}
    if args.speed:
        payload["speed"] = measure_speed(ck, args.speed, _settings(args))
    _emit(payload)
    return EXIT_OK


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invmark", description="Invertible audio watermarking")
    parser.add_argument("--version", action="version", version=f"invmark {APP_VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--log-dir", type=Path, default=None, help="directory for invmark.log")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_checkpoint(p, required=True):
        p.add_argument("--ckpt", required=required, help="checkpoint directory or name in INVMARK_CHECKPOINT_DIR")
        p.add_argument("--device", default="cpu")
        p.add_argument("--config", help="key=value config with watermarker settings")

    def add_pattern(p):
        p.add_argument("--pattern", help="pattern bits as hex (default: configured pattern)")
        p.add_argument("--pattern-bits", type=int, help="bit length of --pattern")

    encode = sub.add_parser("encode", help="watermark a WAV file")
    encode.add_argument("input", type=Path)
    encode.add_argument("output", type=Path)
    encode.add_argument("--payload", required=True, help="payload bits as hex")
    encode.add_argument("--payload-bits", type=int, help="bit length of --payload (default K minus pattern)")
    encode.add_argument("--report", help="sidecar report path (default <output>.json)")
    add_checkpoint(encode)
    add_pattern(encode)
    encode.set_defaults(handler=cmd_encode)

    decode = sub.add_parser("decode", help="brute-force detect and decode a watermark")
    decode.add_argument("input", type=Path)
    decode.add_argument("--step", type=float, default=None, help="window step as a fraction of EUL (default 0.05)")
    decode.add_argument("--majority", action="store_true", help="weighted majority vote over accepted windows")
    decode.add_argument("--windows", action="store_true", help="include the per-window score table")
    add_checkpoint(decode)
    add_pattern(decode)
    decode.set_defaults(handler=cmd_decode)

    locate = sub.add_parser("locate", help="find the watermark position")
    locate.add_argument("input", type=Path)
    locate.add_argument("--locator", choices=("bfd", "synccode"), default="bfd")
    locate.add_argument("--sync-length", type=int, default=13, help="Barker code length for synccode")
    add_checkpoint(locate, required=False)
    add_pattern(locate)
    locate.set_defaults(handler=cmd_locate)

    train = sub.add_parser("train", help="run the training curriculum")
    train.add_argument("--config", required=True)
    train.add_argument("--resume", action="store_true", help="continue from <OUTPUT_DIR>/last")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="run evaluation protocols")
    evaluate.add_argument("--protocol", action="append", choices=("segment", "utterance", "locating", "shift"),
                          help="repeatable; default: PROTOCOLS from the config")
    evaluate.add_argument("--output", help="report directory (default OUTPUT_DIR from the config)")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--device", default="cpu")
    evaluate.add_argument("--config", required=True)
    evaluate.set_defaults(handler=cmd_eval)

    inspect = sub.add_parser("inspect", help="show checkpoint manifest and parameter counts")
    inspect.add_argument("--speed", type=float, default=None, metavar="SECONDS",
                         help="also measure real-time factors on SECONDS of synthetic audio")
    add_checkpoint(inspect)
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_dir, verbose=args.verbose)
    logger.debug("invmark %s: %s", APP_VERSION, args.command)

    try:
        return args.handler(args)
    except NoEncodableSegmentError as e:
        logger.error("❌ %s", e)
        _emit({"error": str(e), "report": e.report})
        return e.exit_code
    except InvMarkError as e:
        logger.error("❌ %s: %s", type(e).__name__, e)
        _emit({"error": str(e), "type": type(e).__name__})
        return e.exit_code
    except OSError as e:
        logger.error("❌ %s: %s", type(e).__name__, e)
        _emit({"error": str(e), "type": "AudioIOError"})
        return AudioIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
