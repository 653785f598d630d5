#!/usr/bin/env python3

import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch


REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from config import InvMarkConfig, checkpoint_cache_dir
from errors import ConfigError


class InvMarkConfigTests(unittest.TestCase):
    def setUp(self):
        self.tempdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tempdir.cleanup)
        self.config_path = os.path.join(self.tempdir.name, 'run.env')
        self._write(
            '# training run\n'
            'INVMARK_TEST_BATCH=8\n'
            'INVMARK_TEST_RATE="0.5"\n'
            'INVMARK_TEST_FLAG=yes\n'
            'INVMARK_TEST_LIST=RN, AS ,LP\n'
            'INVMARK_TEST_MANIFEST=data/manifest.tsv\n'
        )

    def _write(self, text):
        with open(self.config_path, 'w', encoding='utf-8') as handle:
            handle.write(text)

    def test_typed_getters_read_file_values(self):
        cfg = InvMarkConfig(self.config_path)

        self.assertEqual(cfg.get_int('INVMARK_TEST_BATCH', 1), 8)
        self.assertEqual(cfg.get_float('INVMARK_TEST_RATE', 0.0), 0.5)
        self.assertTrue(cfg.get_bool('INVMARK_TEST_FLAG'))
        self.assertEqual(cfg.get_list('INVMARK_TEST_LIST'), ['RN', 'AS', 'LP'])
        self.assertEqual(cfg.get_int('INVMARK_TEST_MISSING', 3), 3)

    def test_overrides_beat_environment_beat_file(self):
        with patch.dict(os.environ, {'INVMARK_TEST_BATCH': '16'}):
            self.assertEqual(InvMarkConfig(self.config_path).get_int('INVMARK_TEST_BATCH', 1), 16)
            cfg = InvMarkConfig(self.config_path, overrides={'INVMARK_TEST_BATCH': '32'})
            self.assertEqual(cfg.get_int('INVMARK_TEST_BATCH', 1), 32)

    def test_relative_paths_resolve_against_config_directory(self):
        cfg = InvMarkConfig(self.config_path)
        self.assertEqual(cfg.get_path('INVMARK_TEST_MANIFEST'),
                         Path(self.tempdir.name) / 'data' / 'manifest.tsv')
        self.assertIsNone(cfg.get_path('INVMARK_TEST_MISSING'))

    def test_malformed_line_raises_config_error(self):
        self._write('INVMARK_TEST_BATCH 8\n')
        with self.assertRaises(ConfigError):
            InvMarkConfig(self.config_path)

    def test_unsupported_version_raises_config_error(self):
        self._write('CONFIG_VERSION=2\n')
        with self.assertRaises(ConfigError):
            InvMarkConfig(self.config_path)

    def test_missing_file_raises_config_error(self):
        with self.assertRaises(ConfigError):
            InvMarkConfig(os.path.join(self.tempdir.name, 'absent.env'))

    def test_non_numeric_value_raises_config_error(self):
        cfg = InvMarkConfig(overrides={'INVMARK_TEST_BATCH': 'eight'})
        with self.assertRaises(ConfigError):
            cfg.get_int('INVMARK_TEST_BATCH', 1)

    def test_fingerprint_tracks_effective_values(self):
        first = InvMarkConfig(self.config_path).fingerprint()
        self.assertEqual(first, InvMarkConfig(self.config_path).fingerprint())
        changed = InvMarkConfig(self.config_path, overrides={'INVMARK_TEST_BATCH': '9'}).fingerprint()
        self.assertNotEqual(first, changed)

    def test_checkpoint_cache_dir_honours_environment(self):
        with patch.dict(os.environ, {'INVMARK_CHECKPOINT_DIR': self.tempdir.name}):
            self.assertEqual(checkpoint_cache_dir(), Path(self.tempdir.name))


if __name__ == '__main__':
    unittest.main()
