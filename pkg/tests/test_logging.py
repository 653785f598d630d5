#!/usr/bin/env python3

import logging
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch


REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from logging_setup import PROJECT_ROOT, SanitizeLogRecordFilter, get_log_file_path
from services.run_logger import log_run, log_stage_change, process_rss_mb


class LogFilePathTests(unittest.TestCase):
    def setUp(self):
        self.tempdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tempdir.cleanup)

    def test_log_dir_argument(self):
        with patch.dict(os.environ, {'INVMARK_LOG_FILE': ''}):
            self.assertEqual(get_log_file_path(Path(self.tempdir.name)), Path(self.tempdir.name) / 'invmark.log')

    def test_environment_overrides_log_dir(self):
        target = os.path.join(self.tempdir.name, 'custom.log')
        with patch.dict(os.environ, {'INVMARK_LOG_FILE': target}):
            self.assertEqual(get_log_file_path(Path('/elsewhere')), Path(target))
        with patch.dict(os.environ, {'INVMARK_LOG_FILE': 'logs/relative.log'}):
            self.assertEqual(get_log_file_path(), PROJECT_ROOT / 'logs' / 'relative.log')


class SanitizeFilterTests(unittest.TestCase):
    def test_renders_args_and_strips_escapes(self):
        record = logging.LogRecord('invmark', logging.INFO, __file__, 1, '\x1b[31mstep %d\x1b[0m', (5,), None)

        self.assertTrue(SanitizeLogRecordFilter().filter(record))

        self.assertEqual(record.msg, 'step 5')
        self.assertEqual(record.args, ())


class RunLoggerTests(unittest.TestCase):
    def test_tags_run_and_step(self):
        with self.assertLogs('invmark.services.run_logger', level='INFO') as captured:
            log_run('Trainer', 'Validation done', icon='✅', run_id='run_1', step=500)
            log_stage_change('Trainer', 1, 2, run_id='run_1', step=3500)

        self.assertIn('✅ [Trainer] [run_id:run_1][step:500] > Validation done', captured.output[0])
        self.assertIn('stage 1 → stage 2', captured.output[1])

    def test_rss_is_positive(self):
        self.assertGreater(process_rss_mb(), 0.0)


if __name__ == '__main__':
    unittest.main()
