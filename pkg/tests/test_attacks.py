#!/usr/bin/env python3

import sys
import unittest
from pathlib import Path
from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
import torch


REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from errors import CapabilityError, ConfigError, ValidationError
from services.attacks import (
    ATTACK_KINDS, AttackKind, AttackSimulator, AttackSpec, AttackWeights, apply_attack, attack_tensor,
    derive_seed, max_shift_samples, mp3_round_trip, parse_kind, sample_attack, shift, update_weights,
)
from services.audio_io import Waveform
from services.quality import snr


def _sine(freq_hz, length=16000, amplitude=0.5):
    t = torch.arange(length, dtype=torch.float64) / 16000.0
    return amplitude * torch.sin(2 * torch.pi * freq_hz * t)


def _rms(x):
    return float(torch.sqrt(torch.mean(x ** 2)))


class AttackTransformTests(unittest.TestCase):
    def test_amplitude_scaling(self):
        out = attack_tensor(torch.tensor([1.0, -0.5]), AttackSpec(AttackKind.AS))
        self.assertTrue(torch.allclose(out, torch.tensor([0.9, -0.45])))
        twice = attack_tensor(out, AttackSpec(AttackKind.AS))
        self.assertTrue(torch.allclose(twice, torch.tensor([1.0, -0.5]) * 0.81))

    def test_sample_suppression_zeroes_one_in_a_thousand(self):
        out = attack_tensor(torch.ones(16000), AttackSpec(AttackKind.SS), rng_seed=4)
        self.assertEqual(int((out == 0).sum()), 16)

    def test_sample_suppression_mask_follows_seed(self):
        x = torch.ones(2, 16000)
        first = attack_tensor(x, AttackSpec(AttackKind.SS, {"mask_seed": 11}))
        second = attack_tensor(x, AttackSpec(AttackKind.SS, {"mask_seed": 11}))
        self.assertTrue(torch.equal(first, second))

    def test_echo_adds_delayed_copy(self):
        x = torch.zeros(16000)
        x[0] = 1.0
        out = attack_tensor(x, AttackSpec(AttackKind.EA))
        self.assertAlmostEqual(float(out[0]), 1.0)
        self.assertAlmostEqual(float(out[1600]), 0.3, places=6)
        self.assertEqual(int((out != 0).sum()), 2)

    def test_quantization_grid(self):
        out = attack_tensor(torch.zeros(1, dtype=torch.float64), AttackSpec(AttackKind.QTZ))
        self.assertAlmostEqual(float(out[0]), 1.0 / 511.0, places=12)

        x = torch.rand(16000, dtype=torch.float64) * 2 - 1
        quantized = attack_tensor(x, AttackSpec(AttackKind.QTZ))
        self.assertLessEqual(torch.unique(quantized).numel(), 512)
        self.assertTrue(torch.allclose(attack_tensor(quantized, AttackSpec(AttackKind.QTZ)), quantized, atol=1e-12))

    def test_random_noise_hits_requested_snr(self):
        x = _sine(440)
        for snr_db in (30.0, 34.5, 39.0):
            out = attack_tensor(x, AttackSpec(AttackKind.RN, {"snr_db": snr_db}), rng_seed=1)
            measured = 10 * np.log10(float((x ** 2).sum() / ((out - x) ** 2).sum()))
            self.assertAlmostEqual(measured, snr_db, places=6)

    def test_random_noise_snr_range_over_draws(self):
        weights = AttackWeights.uniform([AttackKind.RN])
        draws = [sample_attack(weights, seed).params["snr_db"] for seed in range(1000)]
        self.assertGreaterEqual(min(draws), 30.0)
        self.assertLessEqual(max(draws), 39.0)
        self.assertAlmostEqual(float(np.mean(draws)), 34.5, delta=0.5)

    def test_random_noise_measured_snr_over_draws(self):
        weights = AttackWeights.uniform([AttackKind.RN])
        host = Waveform(np.random.default_rng(3).uniform(-0.5, 0.5, size=16000))
        measured = []
        for seed in range(1000):
            attacked = apply_attack(host, sample_attack(weights, seed), rng_seed=seed)
            measured.append(snr(host.samples, attacked.samples))

        self.assertGreaterEqual(min(measured), 30.0 - 1e-3)
        self.assertLessEqual(max(measured), 39.0 + 1e-3)
        self.assertAlmostEqual(float(np.mean(measured)), 34.5, delta=0.5)

    def test_non_finite_input_is_rejected_for_every_input_type(self):
        samples = np.full(16000, 0.1, dtype=np.float32)
        samples[10] = np.nan
        spec = AttackSpec(AttackKind.AS)
        for value in (samples, Waveform(samples), torch.from_numpy(samples)):
            with self.assertRaises(ValidationError):
                apply_attack(value, spec)

    def test_resampling_preserves_constant_signal(self):
        x = torch.full((16000,), 0.5)
        for factor in (2.0, 0.5):
            out = attack_tensor(x, AttackSpec(AttackKind.RS, {"factor": factor}))
            self.assertEqual(out.shape[-1], 16000)
            self.assertTrue(torch.allclose(out[1000:-1000], x[1000:-1000], atol=0.02))

    def test_time_stretch_lengths(self):
        x = torch.rand(16000)
        stretched = attack_tensor(x, AttackSpec(AttackKind.TS, {"factor": 1.1}), keep_length=False)
        self.assertEqual(stretched.shape[-1], 14545)
        self.assertEqual(attack_tensor(x, AttackSpec(AttackKind.TS, {"factor": 1.1})).shape[-1], 16000)
        self.assertEqual(attack_tensor(x, AttackSpec(AttackKind.TS, {"factor": 0.9})).shape[-1], 16000)

    def test_low_pass_in_both_modes(self):
        low, high = _sine(200), _sine(7000)
        for differentiable in (False, True):
            kept = attack_tensor(low, AttackSpec(AttackKind.LP), differentiable=differentiable)
            removed = attack_tensor(high, AttackSpec(AttackKind.LP), differentiable=differentiable)
            self.assertGreater(_rms(kept[500:-500]) / _rms(low[500:-500]), 0.95)
            self.assertLess(_rms(removed[500:-500]) / _rms(high[500:-500]), 0.2)

    def test_median_filter_removes_impulse(self):
        x = torch.zeros(1000)
        x[100] = 1.0
        self.assertEqual(float(attack_tensor(x, AttackSpec(AttackKind.MF)).abs().sum()), 0.0)
        constant = torch.full((100,), 0.25)
        self.assertTrue(torch.equal(attack_tensor(constant, AttackSpec(AttackKind.MF)), constant))

    def test_no_attack_is_identity(self):
        x = torch.rand(3, 100)
        self.assertTrue(torch.equal(attack_tensor(x, AttackSpec(AttackKind.NO_ATTACK)), x))

    def test_apply_attack_keeps_input_type(self):
        wave = apply_attack(Waveform(np.ones(100)), AttackSpec(AttackKind.AS))
        self.assertIsInstance(wave, Waveform)
        self.assertTrue(np.allclose(wave.samples, 0.9))
        array = apply_attack(np.ones(100), AttackSpec(AttackKind.AS))
        self.assertIsInstance(array, np.ndarray)
        with self.assertRaises(ValidationError):
            apply_attack(torch.tensor([float('nan'), 0.0]), AttackSpec(AttackKind.AS))

    def test_unknown_kind(self):
        with self.assertRaises(ConfigError):
            parse_kind("REVERB")
        self.assertEqual(parse_kind("qtz"), AttackKind.QTZ)


class StraightThroughTests(unittest.TestCase):
    def test_non_differentiable_attacks_pass_unit_gradient(self):
        for kind in (AttackKind.SS, AttackKind.MF, AttackKind.QTZ):
            x = (torch.rand(1, 16000) * 2 - 1).requires_grad_(True)
            attack_tensor(x, AttackSpec(kind), differentiable=True).sum().backward()
            self.assertTrue(torch.equal(x.grad, torch.ones_like(x)), kind)

    def test_differentiable_attacks_keep_their_gradient(self):
        x = (torch.rand(1, 16000) * 2 - 1).requires_grad_(True)
        attack_tensor(x, AttackSpec(AttackKind.AS), differentiable=True).sum().backward()
        self.assertTrue(torch.allclose(x.grad, torch.full_like(x, 0.9)))

        y = (torch.rand(1, 16000) * 2 - 1).requires_grad_(True)
        attack_tensor(y, AttackSpec(AttackKind.LP), differentiable=True).sum().backward()
        self.assertTrue(bool(torch.all(torch.isfinite(y.grad))))
        self.assertGreater(float(y.grad.abs().sum()), 0.0)


class LossyCompressionTests(unittest.TestCase):
    def test_missing_ffmpeg_raises_capability_error(self):
        with patch('services.attacks.shutil.which', return_value=None):
            with self.assertRaises(CapabilityError):
                mp3_round_trip(np.zeros(200, dtype=np.float32))

    def test_round_trip_realigns_to_input_length(self):
        decoded = (np.full(150, 1000, dtype='<i2')).tobytes()
        results = [SimpleNamespace(stdout=b'mp3-bytes'), SimpleNamespace(stdout=decoded)]
        with patch('services.attacks.shutil.which', return_value='/usr/bin/ffmpeg'), \
                patch('services.attacks.subprocess.run', side_effect=results) as run:
            out = mp3_round_trip(np.zeros(200, dtype=np.float32))

        self.assertEqual(out.shape, (200,))
        self.assertAlmostEqual(float(out[0]), 1000 / 32768.0)
        self.assertEqual(float(out[-1]), 0.0)
        self.assertEqual(run.call_count, 2)


class ShiftTests(unittest.TestCase):
    def test_shift_moves_following_audio_in(self):
        out = shift(np.arange(20), np.arange(100, 120), 2)
        self.assertEqual(out.tolist(), list(range(2, 20)) + [100, 101])
        tensor_out = shift(torch.arange(20), torch.arange(100, 120), 1)
        self.assertEqual(tensor_out.tolist(), list(range(1, 20)) + [100])

    def test_zero_shift_is_identity(self):
        x = np.arange(20)
        self.assertIs(shift(x, np.arange(5), 0), x)

    def test_shift_bounds(self):
        with self.assertRaises(ValidationError):
            shift(np.arange(20), np.arange(100, 120), 3)
        with self.assertRaises(ValidationError):
            shift(np.arange(20), np.arange(1), 2)
        with self.assertRaises(ValidationError):
            shift(np.arange(20), np.arange(20), -1)
        self.assertEqual(max_shift_samples(), 1600)


class AttackSamplingTests(unittest.TestCase):
    def test_uniform_weights_sample_every_kind(self):
        weights = AttackWeights.uniform()
        counts = {kind: 0 for kind in ATTACK_KINDS}
        for seed in range(10000):
            counts[sample_attack(weights, seed).kind] += 1
        sigma = np.sqrt(10000 * 0.1 * 0.9)
        for kind, count in counts.items():
            self.assertLess(abs(count - 1000), 4 * sigma, kind)

    def test_single_kind_weights(self):
        weights = AttackWeights.uniform([AttackKind.AS])
        self.assertTrue(all(sample_attack(weights, seed).kind == AttackKind.AS for seed in range(50)))

    def test_no_attack_share(self):
        weights = AttackWeights.uniform([AttackKind.AS])
        drawn = [sample_attack(weights, seed, no_attack_share=0.1).kind for seed in range(5000)]
        count = drawn.count(AttackKind.NO_ATTACK)
        self.assertLess(abs(count - 500), 4 * np.sqrt(5000 * 0.1 * 0.9))

    def test_sampling_is_deterministic(self):
        weights = AttackWeights.uniform()
        self.assertEqual(sample_attack(weights, 42), sample_attack(weights, 42))
        self.assertEqual(derive_seed(1, 2, 3), derive_seed(1, 2, 3))
        self.assertNotEqual(derive_seed(1, 2, 3), derive_seed(1, 2, 4))

    def test_update_weights_floors_and_normalises(self):
        weights = update_weights([0.5, 0.0, 0.25], [AttackKind.RN, AttackKind.AS, AttackKind.LP])
        self.assertTrue(np.allclose(weights.weights, np.array([0.5, 0.01, 0.25]) / 0.76))
        self.assertAlmostEqual(float(weights.weights.sum()), 1.0)

    def test_update_weights_with_all_zero_ber_is_uniform(self):
        weights = update_weights([0.0] * 10)
        self.assertTrue(np.allclose(weights.weights, 0.1))

    def test_update_weights_rejects_bad_input(self):
        with self.assertRaises(ValidationError):
            update_weights([1.5, 0.0], [AttackKind.RN, AttackKind.AS])
        with self.assertRaises(ValidationError):
            update_weights([0.1], [AttackKind.RN, AttackKind.AS])

    def test_weights_must_sum_to_one(self):
        with self.assertRaises(ValidationError):
            AttackWeights((AttackKind.RN, AttackKind.AS), np.array([0.5, 0.6]))
        restored = AttackWeights.from_dict({"RN": 0.25, "AS": 0.75})
        self.assertEqual(restored.as_dict(), {"RN": 0.25, "AS": 0.75})


class AttackSimulatorTests(unittest.TestCase):
    def test_lossy_compression_dropped_without_ffmpeg(self):
        with patch('services.attacks.shutil.which', return_value=None):
            simulator = AttackSimulator(["LC", "AS"])
            self.assertEqual(simulator.kinds, (AttackKind.AS,))
            with self.assertRaises(ConfigError):
                AttackSimulator(["LC"])

    def test_attack_batch_applies_one_attack_per_item(self):
        simulator = AttackSimulator(["AS"], no_attack_share=0.0)
        batch = torch.ones(3, 100, requires_grad=True)

        out, applied = simulator.attack_batch(batch, step=7)

        self.assertEqual(applied, ["AS", "AS", "AS"])
        self.assertTrue(torch.allclose(out, torch.full((3, 100), 0.9)))
        out.sum().backward()
        self.assertTrue(torch.allclose(batch.grad, torch.full((3, 100), 0.9)))

    def test_reweight_uses_validation_ber(self):
        simulator = AttackSimulator(["RN", "AS"], no_attack_share=0.0)
        weights = simulator.reweight({"RN": 0.3, "AS": 0.1, "No Attack": 0.0})
        self.assertTrue(np.allclose(weights.weights, [0.75, 0.25]))
        self.assertIs(simulator.weights, weights)


if __name__ == '__main__':
    unittest.main()
