#!/usr/bin/env python3
"""
invmark Run Logger
Tagged progress logging for training and evaluation runs (run_id / step tracking)
"""

import logging
from typing import Dict, Optional

import psutil


logger = logging.getLogger("invmark.services.run_logger")


def log_run(service: str, message: str, icon: Optional[str] = "📋",
            run_id: Optional[str] = None, step: Optional[int] = None,
            indent: int = 0, level: int = logging.INFO):
    """
    Progress logging with run/step tags

    Args:
        service: Service name (e.g., "Trainer", "EvalSuite")
        message: Log message
        icon: Emoji icon for visual identification
        run_id: Optional training/eval run ID
        step: Optional optimizer step
        indent: Number of indent levels (for hierarchical logs)

    Example:
        log_run("Trainer", "Stage 2 started", icon="🎚️", run_id="run_20260101_1200", step=3500)
        Output: 🎚️ [Trainer] [run_id:run_20260101_1200][step:3500] > Stage 2 started
    """
    if icon is None:
        icon = "📋"

    ids = []
    if run_id:
        ids.append(f"run_id:{run_id}")
    if step is not None:
        ids.append(f"step:{step}")

    id_str = f"[{']['.join(ids)}]" if ids else ""
    indent_str = "   " * indent
    separator = " >" if id_str else ">"

    logger.log(level, f"{icon} [{service}] {id_str}{separator} {indent_str}{message}")


def log_stage_change(service: str, old_stage: Optional[int], new_stage: int,
                     run_id: Optional[str] = None, step: Optional[int] = None):
    """Log curriculum stage transitions"""
    old = "start" if old_stage is None else f"stage {old_stage}"
    log_run(service, f"Stage change: {old} → stage {new_stage}", icon="🔄", run_id=run_id, step=step)


def log_validation(service: str, per_attack_ber: Dict[str, float], snr_db: float,
                   run_id: Optional[str] = None, step: Optional[int] = None,
                   improved: bool = False):
    """Log a validation summary with process memory footprint"""
    rss_mb = process_rss_mb()
    icon = "✅" if improved else "📊"
    columns = " ".join(f"{name}={ber * 100:.2f}%" for name, ber in per_attack_ber.items())
    log_run(service, f"Validation SNR={snr_db:.2f} dB | BER {columns} | RSS={rss_mb:.0f} MB",
            icon=icon, run_id=run_id, step=step)


def process_rss_mb() -> float:
    """Resident set size of this process in MiB"""
    try:
        return psutil.Process().memory_info().rss / (1024 * 1024)
    except psutil.Error:
        return 0.0
