#!/usr/bin/env python3
"""
invmark Database Manager
SQLite ledger for training runs, metric rows and evaluation reports

Schema:
- training_run: one row per training invocation (resumes reuse the run)
- training_metric: append-only rows (step, stage, losses, per-attack BER, SNR)
- eval_report: evaluation reports keyed by protocol + config fingerprint
"""

import logging
import sqlite3
from pathlib import Path

from errors import AudioIOError


logger = logging.getLogger("invmark.models.database")


class DatabaseManager:
    """Database manager for SQLite operations"""

    def __init__(self, db_path="invmark.db"):
        self.db_path = str(Path(db_path))
        logger.debug("🗄️  Database path: %s", self.db_path)
        try:
            Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
            self.init_database()
        except (OSError, sqlite3.Error) as e:
            raise AudioIOError(f"Cannot open database {self.db_path}: {e}") from e

    def _ensure_column(self, conn, table_name: str, column_name: str, column_sql: str):
        """Add a missing column to an existing table."""
        existing_columns = {
            row[1] for row in conn.execute(f"PRAGMA table_info({table_name})").fetchall()
        }

        if column_name in existing_columns:
            return

        conn.execute(f"ALTER TABLE {table_name} ADD COLUMN {column_name} {column_sql}")
        logger.info("🧩 Added missing column %s.%s", table_name, column_name)

    def init_database(self):
        """Initialize database and create tables"""
        with sqlite3.connect(self.db_path) as conn:
            # ==========================================
            # Table: training_run
            # ==========================================
            conn.execute('''
                CREATE TABLE IF NOT EXISTS training_run (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT UNIQUE NOT NULL,
                    config_fingerprint TEXT NOT NULL,
                    output_dir TEXT NOT NULL,
                    status TEXT NOT NULL DEFAULT 'running',
                    current_step INTEGER DEFAULT 0,
                    current_stage INTEGER DEFAULT 1,
                    best_step INTEGER,
                    best_score REAL,
                    error_message TEXT,
                    created_at DATETIME DEFAULT CURRENT_TIMESTAMP,
                    updated_at DATETIME DEFAULT CURRENT_TIMESTAMP
                )
            ''')

            # ==========================================
            # Table: training_metric (append-only)
            # ==========================================
            conn.execute('''
                CREATE TABLE IF NOT EXISTS training_metric (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    step INTEGER NOT NULL,
                    stage INTEGER NOT NULL,
                    kind TEXT NOT NULL DEFAULT 'train',
                    loss_total REAL,
                    loss_message REAL,
                    loss_audio REAL,
                    loss_generator REAL,
                    loss_discriminator REAL,
                    snr_db REAL,
                    ber TEXT DEFAULT '{}',
                    attack_weights TEXT DEFAULT '{}',
                    rss_mb REAL,
                    created_at DATETIME DEFAULT CURRENT_TIMESTAMP
                )
            ''')
            self._ensure_column(conn, 'training_metric', 'rss_mb', 'REAL')

            # ==========================================
            # Table: eval_report
            # ==========================================
            conn.execute('''
                CREATE TABLE IF NOT EXISTS eval_report (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    report_id TEXT UNIQUE NOT NULL,
                    protocol TEXT NOT NULL,
                    fingerprint TEXT NOT NULL,
                    mean_ber REAL,
                    snr_db REAL,
                    report_json TEXT NOT NULL,
                    created_at DATETIME DEFAULT CURRENT_TIMESTAMP
                )
            ''')

            conn.execute('CREATE INDEX IF NOT EXISTS idx_metric_run_step ON training_metric(run_id, step)')
            conn.execute('CREATE INDEX IF NOT EXISTS idx_report_fingerprint ON eval_report(fingerprint)')
            conn.commit()

    def get_connection(self):
        """Get database connection with row factory"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn
