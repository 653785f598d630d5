#!/usr/bin/env python3

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import torch


REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from errors import AudioIOError, ConfigError
from models.checkpoint import CheckpointStore
from services.inn_codec import build_checkpoint
from services.spectral import SpectralGeometry


SMALL = SpectralGeometry(n_fft=64, hop_length=32, segment_samples=512)


class CheckpointStoreTests(unittest.TestCase):
    def setUp(self):
        self.tempdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tempdir.cleanup)
        self.store = CheckpointStore()
        self.ck = build_checkpoint(n_blocks=2, message_bits=8, hidden_channels=2, geometry=SMALL, seed=3)
        with torch.no_grad():
            for param in self.ck.codec.parameters():
                param.add_(0.01)
        self.directory = Path(self.tempdir.name) / 'best'

    def test_save_then_load_restores_parameters(self):
        self.store.save(self.ck, self.directory)

        loaded = self.store.load(self.directory)

        self.assertEqual(loaded.codec.architecture(), self.ck.codec.architecture())
        for (name, saved), (_, restored) in zip(self.ck.codec.state_dict().items(),
                                                 loaded.codec.state_dict().items()):
            self.assertTrue(torch.equal(saved, restored), name)
        for (name, saved), (_, restored) in zip(self.ck.discriminator.state_dict().items(),
                                                 loaded.discriminator.state_dict().items()):
            self.assertTrue(torch.equal(saved, restored), name)

    def test_manifest_records_architecture_and_versions(self):
        self.ck.manifest.update({'stage': 2, 'step': 40})
        self.store.save(self.ck, self.directory)

        manifest = self.store.read_manifest(self.directory)

        self.assertEqual(manifest['schema_version'], 1)
        self.assertEqual(manifest['message_bits'], 8)
        self.assertEqual(manifest['geometry'], SMALL.to_dict())
        self.assertEqual(manifest['step'], 40)
        self.assertIn('app_version', manifest)

    def test_overwrite_replaces_previous_contents(self):
        self.store.save(self.ck, self.directory, optimizer_states={'codec': {'lr': 1}})
        self.store.save(self.ck, self.directory)

        self.assertIsNone(self.store.load_optimizer_states(self.directory))
        self.assertFalse(self.directory.with_name('best.tmp').exists())

    def test_interrupted_overwrite_keeps_previous_checkpoint(self):
        self.ck.manifest.update({'step': 10})
        self.store.save(self.ck, self.directory)
        real_replace = os.replace
        targets = []

        def failing_install(src, dst):
            targets.append(Path(dst).name)
            if Path(dst) == self.directory:
                raise OSError('disk full')
            return real_replace(src, dst)

        self.ck.manifest.update({'step': 20})
        with patch('models.checkpoint.os.replace', side_effect=failing_install):
            with self.assertRaises(AudioIOError):
                self.store.save(self.ck, self.directory)

        self.assertEqual(targets, ['best.old', 'best'])
        self.assertEqual(self.store.read_manifest(self.directory)['step'], 10)
        self.assertEqual(self.store.load(self.directory).codec.architecture(), self.ck.codec.architecture())

        self.store.save(self.ck, self.directory)
        self.assertEqual(self.store.read_manifest(self.directory)['step'], 20)
        self.assertFalse(self.directory.with_name('best.old').exists())
        self.assertFalse(self.directory.with_name('best.tmp').exists())

    def test_optimizer_states_round_trip(self):
        optimizer = torch.optim.Adam(self.ck.codec.parameters(), lr=1e-4)
        self.store.save(self.ck, self.directory, optimizer_states={'codec': optimizer.state_dict()})

        states = self.store.load_optimizer_states(self.directory)

        self.assertEqual(states['codec']['param_groups'][0]['lr'], 1e-4)

    def test_loading_with_new_message_bits_reinitialises_message_layers(self):
        self.store.save(self.ck, self.directory)

        loaded = self.store.load(self.directory, message_bits=4)

        self.assertEqual(loaded.message_bits, 4)
        self.assertEqual(loaded.manifest['base_checkpoint'], str(self.directory))
        self.assertTrue(torch.equal(loaded.codec.expand.bias, self.ck.codec.expand.bias))
        block_params = zip(self.ck.codec.blocks.parameters(), loaded.codec.blocks.parameters())
        self.assertTrue(all(torch.equal(a, b) for a, b in block_params))

    def test_bare_names_resolve_under_checkpoint_dir(self):
        self.store.save(self.ck, self.directory)
        with patch.dict(os.environ, {'INVMARK_CHECKPOINT_DIR': self.tempdir.name}):
            self.assertEqual(self.store.resolve('best'), Path(self.tempdir.name) / 'best')

    def test_missing_checkpoint(self):
        found, path = self.store.exists(Path(self.tempdir.name) / 'absent')
        self.assertFalse(found)
        self.assertIsNone(path)
        with self.assertRaises(AudioIOError):
            self.store.load(Path(self.tempdir.name) / 'absent')

    def test_unknown_schema_version_is_rejected(self):
        self.store.save(self.ck, self.directory)
        manifest_path = self.directory / 'manifest.json'
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        manifest['schema_version'] = 99
        manifest_path.write_text(json.dumps(manifest), encoding='utf-8')

        with self.assertRaises(ConfigError):
            self.store.load(self.directory)


if __name__ == '__main__':
    unittest.main()
