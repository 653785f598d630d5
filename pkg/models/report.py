#!/usr/bin/env python3
"""
invmark Evaluation Report Store
Persists evaluation reports alongside the training ledger
"""

import json
from typing import Dict, List, Optional


class EvalReportStore:
    """Evaluation report model for database operations"""

    def __init__(self, db_manager):
        self.db = db_manager

    def save(self, report_id: str, report: Dict) -> str:
        with self.db.get_connection() as conn:
            conn.execute('''
                INSERT OR REPLACE INTO eval_report (report_id, protocol, fingerprint, mean_ber, snr_db, report_json)
                VALUES (?, ?, ?, ?, ?, ?)
            ''', (
                report_id,
                report['protocol'],
                report['fingerprint'],
                report.get('mean_ber'),
                report.get('snr_db'),
                json.dumps(report, sort_keys=True),
            ))
            conn.commit()
        return report_id

    def get(self, report_id: str) -> Optional[Dict]:
        with self.db.get_connection() as conn:
            row = conn.execute('SELECT report_json FROM eval_report WHERE report_id = ?', (report_id,)).fetchone()
            return json.loads(row[0]) if row else None

    def find_by_fingerprint(self, fingerprint: str) -> List[Dict]:
        with self.db.get_connection() as conn:
            rows = conn.execute('''
                SELECT report_json FROM eval_report WHERE fingerprint = ? ORDER BY created_at DESC
            ''', (fingerprint,)).fetchall()
            return [json.loads(row[0]) for row in rows]
