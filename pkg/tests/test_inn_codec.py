#!/usr/bin/env python3

import sys
import unittest
from pathlib import Path

import numpy as np
import torch


REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from errors import ConfigError, ShapeError
from services.inn_codec import (
    InvertibleCodec, build_checkpoint, decode_batch, decode_segment, discriminate, encode_segment, parameter_report,
)
from services.spectral import SpectralGeometry


SMALL = SpectralGeometry(n_fft=64, hop_length=32, segment_samples=512)


def _randomise_final_layers(codec, std=0.05):
    with torch.no_grad():
        for block in codec.blocks:
            for net in (block.phi, block.eta, block.rho):
                net.final.weight.normal_(0.0, std)
                net.final.bias.normal_(0.0, std)


class CouplingInvertibilityTests(unittest.TestCase):
    def test_blocks_invert_exactly_in_double_precision(self):
        for trial in range(20):
            torch.manual_seed(trial)
            codec = InvertibleCodec(n_blocks=4, message_bits=8, hidden_channels=4, geometry=SMALL).double()
            _randomise_final_layers(codec)
            x = torch.randn((2,) + SMALL.shape, dtype=torch.float64)
            m = torch.randn((2,) + SMALL.shape, dtype=torch.float64)

            x_out, m_out = codec.forward_blocks(x, m)
            x_back, m_back = codec.inverse_blocks(x_out, m_out)

            self.assertLess(float((x_back - x).abs().max()), 1e-9)
            self.assertLess(float((m_back - m).abs().max()), 1e-9)

    def test_full_geometry_blocks_invert(self):
        torch.manual_seed(0)
        codec = InvertibleCodec(n_blocks=8, message_bits=32, hidden_channels=4).double()
        _randomise_final_layers(codec)
        x = torch.randn((1,) + codec.geometry.shape, dtype=torch.float64)
        m = torch.randn((1,) + codec.geometry.shape, dtype=torch.float64)

        x_back, m_back = codec.inverse_blocks(*codec.forward_blocks(x, m))

        self.assertLess(float((x_back - x).abs().max()), 1e-9)
        self.assertLess(float((m_back - m).abs().max()), 1e-9)

    def test_full_geometry_blocks_invert_in_single_precision(self):
        torch.manual_seed(1)
        codec = InvertibleCodec(n_blocks=8, message_bits=32, hidden_channels=4)
        _randomise_final_layers(codec, std=0.02)
        x = 0.5 * torch.randn((1,) + codec.geometry.shape)
        m = 0.5 * torch.randn((1,) + codec.geometry.shape)

        with torch.no_grad():
            x_back, m_back = codec.inverse_blocks(*codec.forward_blocks(x, m))
            x_again, m_again = codec.forward_blocks(*codec.inverse_blocks(x, m))

        self.assertEqual(x_back.dtype, torch.float32)
        self.assertLess(float((x_back - x).abs().max()), 1e-5)
        self.assertLess(float((m_back - m).abs().max()), 1e-5)
        self.assertLess(float((x_again - x).abs().max()), 1e-5)
        self.assertLess(float((m_again - m).abs().max()), 1e-5)

    def test_single_block_round_trip(self):
        torch.manual_seed(3)
        codec = InvertibleCodec(n_blocks=1, message_bits=4, hidden_channels=4, geometry=SMALL).double()
        _randomise_final_layers(codec, std=0.2)
        block = codec.blocks[0]
        x = torch.randn((1,) + SMALL.shape, dtype=torch.float64)
        m = torch.randn((1,) + SMALL.shape, dtype=torch.float64)

        x_back, m_back = block.inverse(*block(x, m))

        self.assertTrue(torch.allclose(x_back, x, atol=1e-10))
        self.assertTrue(torch.allclose(m_back, m, atol=1e-10))

    def test_mismatched_branches_raise_shape_error(self):
        block = InvertibleCodec(n_blocks=1, message_bits=4, hidden_channels=2, geometry=SMALL).blocks[0]
        with self.assertRaises(ShapeError):
            block(torch.zeros(1, 2, 33, 17), torch.zeros(1, 2, 33, 16))


class CodecTests(unittest.TestCase):
    def setUp(self):
        self.ck = build_checkpoint(n_blocks=1, message_bits=16, hidden_channels=4, seed=0).eval()
        self.rng = np.random.default_rng(0)
        self.host = self.rng.uniform(-0.5, 0.5, size=16000).astype(np.float32)
        self.message = self.rng.integers(0, 2, size=16)

    def test_reference_shapes(self):
        codec = self.ck.codec
        hosts = torch.rand(3, 16000) - 0.5
        messages = torch.randint(0, 2, (3, 16)).float()
        with torch.no_grad():
            self.assertEqual(tuple(codec.expand_message(messages).shape), (3, 2, 501, 41))
            self.assertEqual(tuple(codec.encode(hosts, messages).shape), (3, 16000))
            self.assertEqual(tuple(codec.decode(hosts).shape), (3, 16))

    def test_fresh_codec_encodes_near_identity(self):
        watermarked = encode_segment(self.host, self.message, self.ck)
        self.assertEqual(watermarked.shape, (16000,))
        self.assertTrue(np.allclose(watermarked, self.host, atol=1e-4))

    def test_message_length_must_match_k(self):
        with self.assertRaises(ConfigError):
            encode_segment(self.host, np.zeros(8), self.ck)

    def test_host_length_must_be_one_eul(self):
        with self.assertRaises(ShapeError):
            encode_segment(self.host[:15999], self.message, self.ck)
        with self.assertRaises(ShapeError):
            discriminate(self.host[:100], self.ck)

    def test_non_finite_host_is_rejected(self):
        host = self.host.copy()
        host[10] = np.nan
        with self.assertRaises(ShapeError):
            encode_segment(host, self.message, self.ck)

    def test_latent_is_shared_across_the_batch(self):
        z = self.ck.codec.sample_latent(3, z_seed=5)
        self.assertTrue(torch.equal(z[0], z[2]))
        self.assertTrue(torch.equal(z, self.ck.codec.sample_latent(3, z_seed=5)))

    def test_decode_is_deterministic_for_a_seed(self):
        bits, soft = decode_segment(self.host, self.ck)
        _, again = decode_segment(self.host, self.ck)
        _, other_seed = decode_segment(self.host, self.ck, z_seed=1)

        self.assertEqual(bits.shape, (16,))
        self.assertTrue(set(np.unique(bits)).issubset({0, 1}))
        self.assertTrue(np.array_equal(soft, again))
        self.assertFalse(np.array_equal(soft, other_seed))

    def test_batch_decode_matches_single_decode(self):
        batch = np.stack([self.host, self.host * 0.5])
        soft = decode_batch(batch, self.ck)
        _, single = decode_segment(self.host * 0.5, self.ck)
        self.assertTrue(np.allclose(soft[1], single, atol=1e-5))

    def test_discriminator_returns_probability(self):
        score = discriminate(self.host, self.ck)
        self.assertGreaterEqual(score, 0.0)
        self.assertLessEqual(score, 1.0)

    def test_parameter_report_counts_message_layers(self):
        report = parameter_report(self.ck.codec)
        k = 16
        expected = (k * 16000 + 16000) + (16000 * k + k)
        self.assertEqual(report['message_layer_parameters'], expected)
        self.assertEqual(report['codec_parameters'], sum(p.numel() for p in self.ck.codec.parameters()))
        self.assertGreater(report['message_layer_share'], 0.5)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        geometry = SpectralGeometry(n_fft=100, hop_length=40, segment_samples=400)
        codec = InvertibleCodec(n_blocks=2, message_bits=8, hidden_channels=4, geometry=geometry).double()
        self.assertEqual(codec.channel_mode, 'magnitude_phase')
        _randomise_final_layers(codec)
        host = (torch.rand(1, 400, dtype=torch.float64) - 0.5).requires_grad_()
        message = torch.randint(0, 2, (1, 8)).double()
        wave_weights = torch.randn(1, 400, dtype=torch.float64)
        score_weights = torch.randn(1, 8, dtype=torch.float64)

        def objective():
            watermarked = codec.encode(host, message)
            return (watermarked * wave_weights).sum() + (codec.decode(watermarked) * score_weights).sum()

        objective().backward()
        tensors = [host] + list(codec.parameters())
        eps = 1e-7
        for _ in range(3):
            directions = [torch.randn_like(t) for t in tensors]
            analytic = float(sum((t.grad * d).sum() for t, d in zip(tensors, directions)))
            with torch.no_grad():
                for t, d in zip(tensors, directions):
                    t.add_(eps * d)
                upper = float(objective())
                for t, d in zip(tensors, directions):
                    t.sub_(2 * eps * d)
                lower = float(objective())
                for t, d in zip(tensors, directions):
                    t.add_(eps * d)
            numeric = (upper - lower) / (2 * eps)
            self.assertLess(abs(numeric - analytic) / abs(analytic), 1e-3)

    def test_gradients_flow_through_encode_and_decode(self):
        codec = self.ck.codec.train()
        host = torch.rand(2, 16000) - 0.5
        message = torch.randint(0, 2, (2, 16)).float()

        watermarked = codec.encode(host, message)
        soft = codec.decode(watermarked)
        loss = ((soft - message) ** 2).mean() + ((watermarked - host) ** 2).mean()
        loss.backward()

        for name, param in codec.named_parameters():
            self.assertIsNotNone(param.grad, name)
            self.assertTrue(bool(torch.all(torch.isfinite(param.grad))), name)
        self.assertGreater(float(codec.contract.weight.grad.abs().sum()), 0.0)

    def test_invalid_construction(self):
        with self.assertRaises(ConfigError):
            InvertibleCodec(n_blocks=0)


if __name__ == '__main__':
    unittest.main()
