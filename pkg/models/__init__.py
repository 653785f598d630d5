"""
invmark Models Package
Data Access Layer: SQLite run ledger and checkpoint storage
"""

from .database import DatabaseManager
from .metrics import TrainingRun, TrainingMetric
from .report import EvalReportStore
from .checkpoint import CheckpointStore

__all__ = [
    'DatabaseManager',
    'TrainingRun',
    'TrainingMetric',
    'EvalReportStore',
    'CheckpointStore'
]
