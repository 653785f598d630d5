#!/usr/bin/env python3
"""
invmark Training Metrics Models
Training run records and the append-only metrics log
"""

import json
from datetime import datetime
from typing import Dict, List, Optional


class TrainingRun:
    """Training run model for database operations"""

    def __init__(self, db_manager):
        self.db = db_manager

    def create(self, run_id: str, config_fingerprint: str, output_dir: str) -> str:
        with self.db.get_connection() as conn:
            conn.execute('''
                INSERT OR IGNORE INTO training_run (run_id, config_fingerprint, output_dir)
                VALUES (?, ?, ?)
            ''', (run_id, config_fingerprint, output_dir))
            conn.commit()
        return run_id

    def update(self, run_id: str, updates: Dict) -> bool:
        """Update run record"""
        if not updates:
            return False

        updates = dict(updates)
        updates['updated_at'] = datetime.now().isoformat()
        set_clause = ', '.join([f"{key} = ?" for key in updates.keys()])
        values = list(updates.values()) + [run_id]

        with self.db.get_connection() as conn:
            cursor = conn.execute(f'''
                UPDATE training_run SET {set_clause}
                WHERE run_id = ?
            ''', values)
            conn.commit()
            return cursor.rowcount > 0

    def get(self, run_id: str) -> Optional[Dict]:
        with self.db.get_connection() as conn:
            row = conn.execute('SELECT * FROM training_run WHERE run_id = ?', (run_id,)).fetchone()
            return dict(row) if row else None


class TrainingMetric:
    """Append-only metric rows"""

    def __init__(self, db_manager):
        self.db = db_manager

    def add(self, run_id: str, step: int, stage: int, kind: str = 'train',
            losses: Optional[Dict[str, float]] = None, snr_db: Optional[float] = None,
            ber: Optional[Dict[str, float]] = None, attack_weights: Optional[Dict[str, float]] = None,
            rss_mb: Optional[float] = None) -> None:
        losses = losses or {}
        with self.db.get_connection() as conn:
            conn.execute('''
                INSERT INTO training_metric (
                    run_id, step, stage, kind, loss_total, loss_message, loss_audio,
                    loss_generator, loss_discriminator, snr_db, ber, attack_weights, rss_mb
                ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                run_id, step, stage, kind,
                losses.get('total'), losses.get('message'), losses.get('audio'),
                losses.get('generator'), losses.get('discriminator'),
                snr_db,
                json.dumps(ber or {}),
                json.dumps(attack_weights or {}),
                rss_mb,
            ))
            conn.commit()

    def get_rows(self, run_id: str, kind: Optional[str] = None) -> List[Dict]:
        query = "SELECT * FROM training_metric WHERE run_id = ?"
        params: list = [run_id]
        if kind:
            query += " AND kind = ?"
            params.append(kind)
        query += " ORDER BY step, id"

        with self.db.get_connection() as conn:
            rows = []
            for row in conn.execute(query, params).fetchall():
                record = dict(row)
                for column in ('ber', 'attack_weights'):
                    try:
                        record[column] = json.loads(record[column] or '{}')
                    except json.JSONDecodeError:
                        record[column] = {}
                rows.append(record)
            return rows
