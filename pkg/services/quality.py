#!/usr/bin/env python3
"""
invmark Quality Metrics
Bit error rate, signal-to-noise ratio and the optional PESQ plugin
"""

import logging
import math
from typing import Callable, Optional

import numpy as np

from errors import ValidationError
from services.audio_io import SAMPLE_RATE


logger = logging.getLogger("invmark.services.quality")

PesqFunction = Callable[[np.ndarray, np.ndarray, int], float]
_pesq_backend: Optional[PesqFunction] = None
_pesq_probed = False


def ber(m, m_hat) -> float:
    """Mismatched bits / K"""
    m = np.asarray(m).astype(np.int64).reshape(-1)
    m_hat = np.asarray(m_hat).astype(np.int64).reshape(-1)
    if m.shape != m_hat.shape:
        raise ValidationError(f"BER needs equal lengths, got {m.size} and {m_hat.size}")
    if m.size == 0:
        raise ValidationError("BER of empty messages is undefined")
    return float(np.count_nonzero(m != m_hat)) / m.size


def snr(x, x_wm) -> float:
    """10·log10(Σx² / Σ(x − x')²) in dB; math.inf when x' == x"""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x_wm = np.asarray(x_wm, dtype=np.float64).reshape(-1)
    if x.shape != x_wm.shape:
        raise ValidationError(f"SNR needs equal lengths, got {x.size} and {x_wm.size}")
    signal_energy = float(np.sum(x ** 2))
    if signal_energy == 0.0:
        raise ValidationError("SNR is undefined for an all-zero reference")
    noise_energy = float(np.sum((x - x_wm) ** 2))
    if noise_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_energy / noise_energy)


def register_pesq(backend: Optional[PesqFunction]):
    """Install an ITU-T P.862 implementation: backend(reference, degraded, sample_rate) -> score"""
    global _pesq_backend, _pesq_probed
    _pesq_backend = backend
    _pesq_probed = True


def _probe_pesq() -> Optional[PesqFunction]:
    global _pesq_backend, _pesq_probed
    if not _pesq_probed:
        _pesq_probed = True
        try:
            from pesq import pesq as pesq_impl  # optional third-party package

            _pesq_backend = lambda ref, deg, rate: float(pesq_impl(rate, ref, deg, "wb"))
            logger.info("🎼 PESQ backend found (pesq package)")
        except ImportError:
            logger.debug("PESQ backend not installed; PESQ reported as unavailable")
    return _pesq_backend


def pesq(reference, degraded, sample_rate: int = SAMPLE_RATE) -> Optional[float]:
    """PESQ score, or None when no backend is registered"""
    backend = _probe_pesq()
    if backend is None:
        return None
    try:
        return float(backend(np.asarray(reference, dtype=np.float32), np.asarray(degraded, dtype=np.float32), sample_rate))
    except Exception as e:
        logger.warning("⚠️  PESQ backend failed: %s", e)
        return None
