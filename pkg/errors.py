#!/usr/bin/env python3
"""
invmark error types
Every error carries the CLI exit code it maps to
"""

from typing import Optional


class InvMarkError(Exception):
    """Base class for invmark failures"""

    exit_code = 4


class ValidationError(InvMarkError):
    """Input outside the accepted range or shape"""

    exit_code = 2


class ShapeError(ValidationError):
    """Array or waveform with the wrong length/shape"""


class ConfigError(InvMarkError):
    """Missing or inconsistent configuration"""

    exit_code = 2


class AudioIOError(InvMarkError):
    """Audio or artifact file could not be read or written"""

    exit_code = 3


class CapabilityError(InvMarkError):
    """External tool required by an operation is unavailable"""

    exit_code = 4


class NoEncodableSegmentError(InvMarkError):
    """Utterance has no segment that passes the silence/quality gates"""

    exit_code = 4

    def __init__(self, message: str, report: Optional[dict] = None):
        super().__init__(message)
        self.report = report or {}


class TrainingDivergedError(InvMarkError):
    """Loss became non-finite during training"""

    exit_code = 4

    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
