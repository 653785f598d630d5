#!/usr/bin/env python3
"""
invmark Invertible Codec
Shared-parameter encoder/decoder built from affine coupling blocks, plus the discriminator.

Encoding runs the blocks forward on (host spectrogram, message spectrogram) and keeps the
audio branch; decoding runs the same blocks backward from (received spectrogram, noise).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError, ShapeError
from services.spectral import SpectralGeometry, SpectralTransform


logger = logging.getLogger("invmark.services.inn_codec")

DEFAULT_BLOCKS = 8
DEFAULT_MESSAGE_BITS = 32
DEFAULT_HIDDEN_CHANNELS = 32
DENSE_LAYERS = 5
BIT_THRESHOLD = 0.5


class DenseBlock(nn.Module):
    """Five 3x3 conv layers; layer j sees the concatenation of the input and all earlier outputs.

    The last layer is zero-initialised so a fresh coupling block starts as (near-)identity.
    """

    def __init__(self, in_channels: int = 2, out_channels: int = 2,
                 hidden_channels: int = DEFAULT_HIDDEN_CHANNELS, n_layers: int = DENSE_LAYERS):
        super().__init__()
        self.layers = nn.ModuleList()
        width = in_channels
        for _ in range(n_layers - 1):
            self.layers.append(nn.Conv2d(width, hidden_channels, kernel_size=3, padding=1))
            width += hidden_channels
        self.final = nn.Conv2d(width, out_channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = [x]
        for layer in self.layers:
            features.append(F.leaky_relu(layer(torch.cat(features, dim=1)), negative_slope=0.2))
        return self.final(torch.cat(features, dim=1))


class CouplingBlock(nn.Module):
    """x' = x + phi(m);  m' = m * exp(sigmoid(rho(x'))) + eta(x')"""

    def __init__(self, channels: int = 2, hidden_channels: int = DEFAULT_HIDDEN_CHANNELS):
        super().__init__()
        self.phi = DenseBlock(channels, channels, hidden_channels)
        self.eta = DenseBlock(channels, channels, hidden_channels)
        self.rho = DenseBlock(channels, channels, hidden_channels)

    def forward(self, x: torch.Tensor, m: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.shape != m.shape:
            raise ShapeError(f"Coupling branches differ in shape: {tuple(x.shape)} vs {tuple(m.shape)}")
        x1 = x + self.phi(m)
        m1 = m * torch.exp(torch.sigmoid(self.rho(x1))) + self.eta(x1)
        return x1, m1

    def inverse(self, x1: torch.Tensor, m1: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x1.shape != m1.shape:
            raise ShapeError(f"Coupling branches differ in shape: {tuple(x1.shape)} vs {tuple(m1.shape)}")
        m = (m1 - self.eta(x1)) * torch.exp(-torch.sigmoid(self.rho(x1)))
        x = x1 - self.phi(m)
        return x, m


class InvertibleCodec(nn.Module):
    """Message expansion, stacked coupling blocks and message contraction"""

    def __init__(self, n_blocks: int = DEFAULT_BLOCKS, message_bits: int = DEFAULT_MESSAGE_BITS,
                 hidden_channels: int = DEFAULT_HIDDEN_CHANNELS,
                 geometry: SpectralGeometry = SpectralGeometry(), channel_mode: str = "magnitude_phase"):
        super().__init__()
        if n_blocks < 1 or message_bits < 1:
            raise ConfigError("n_blocks and message_bits must be positive")
        self.n_blocks = n_blocks
        self.message_bits = message_bits
        self.hidden_channels = hidden_channels
        self.geometry = geometry
        self.spectral = SpectralTransform(geometry, channel_mode)
        self.expand = nn.Linear(message_bits, geometry.segment_samples)
        self.contract = nn.Linear(geometry.segment_samples, message_bits)
        self.blocks = nn.ModuleList(CouplingBlock(2, hidden_channels) for _ in range(n_blocks))

    @property
    def channel_mode(self) -> str:
        return self.spectral.channel_mode

    def architecture(self) -> Dict:
        return {
            "n_blocks": self.n_blocks,
            "message_bits": self.message_bits,
            "hidden_channels": self.hidden_channels,
            "channel_mode": self.channel_mode,
            "geometry": self.geometry.to_dict(),
        }

    def _check_message(self, m: torch.Tensor) -> torch.Tensor:
        if m.dim() == 1:
            m = m.unsqueeze(0)
        if m.shape[-1] != self.message_bits:
            raise ConfigError(f"Message has {m.shape[-1]} bits, codec expects K={self.message_bits}")
        return m

    def _check_wave(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        if wave.dim() != 2 or wave.shape[-1] != self.geometry.segment_samples:
            raise ShapeError(f"Expected (B, {self.geometry.segment_samples}) audio, got {tuple(wave.shape)}")
        return wave

    def expand_message(self, m: torch.Tensor) -> torch.Tensor:
        m = self._check_message(m)
        return self.spectral.stft(self.expand(m.to(self.expand.weight.dtype)))

    def forward_blocks(self, x_spec: torch.Tensor, m_spec: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        for block in self.blocks:
            x_spec, m_spec = block(x_spec, m_spec)
        return x_spec, m_spec

    def inverse_blocks(self, x_spec: torch.Tensor, m_spec: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        for block in reversed(self.blocks):
            x_spec, m_spec = block.inverse(x_spec, m_spec)
        return x_spec, m_spec

    def encode(self, host: torch.Tensor, message: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        host = self._check_wave(host)
        message = self._check_message(message)
        x_spec = self.spectral.stft(host)
        m_spec = self.expand_message(message)
        x_out, _ = self.forward_blocks(x_spec, m_spec)
        watermarked = self.spectral.istft(x_out)
        return watermarked.clamp(-1.0, 1.0) if clamp else watermarked

    def sample_latent(self, batch: int, z_seed: Optional[int] = 0,
                      generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """One standard-normal draw shared across the batch"""
        if generator is None:
            generator = torch.Generator().manual_seed(0 if z_seed is None else int(z_seed))
        z = torch.randn((1,) + self.geometry.shape, generator=generator, dtype=torch.float32)
        param = self.contract.weight
        return z.to(device=param.device, dtype=param.dtype).expand(batch, -1, -1, -1)

    def decode(self, received: torch.Tensor, z_seed: Optional[int] = 0,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Soft message scores (B, K); threshold at 0.5 for bits"""
        received = self._check_wave(received)
        y_spec = self.spectral.stft(received)
        z = self.sample_latent(received.shape[0], z_seed, generator)
        _, m_spec = self.inverse_blocks(y_spec, z)
        return self.contract(self.spectral.istft(m_spec))


class Discriminator(nn.Module):
    """Four strided 1-D conv layers with a sigmoid head: P(watermarked)"""

    def __init__(self, channels: Tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        widths = (1,) + tuple(channels)
        self.convs = nn.ModuleList(
            nn.Conv1d(widths[i], widths[i + 1], kernel_size=15, stride=4, padding=7)
            for i in range(len(channels))
        )
        self.head = nn.Conv1d(widths[-1], 1, kernel_size=3, padding=1)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        h = wave.unsqueeze(1)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), negative_slope=0.2)
        logits = self.head(h).mean(dim=(1, 2))
        return torch.sigmoid(logits)


@dataclass
class ModelCheckpoint:
    """Codec + discriminator with the manifest that rebuilds them"""

    codec: InvertibleCodec
    discriminator: Discriminator
    manifest: Dict = field(default_factory=dict)

    @property
    def message_bits(self) -> int:
        return self.codec.message_bits

    @property
    def device(self) -> torch.device:
        return self.codec.contract.weight.device

    def eval(self) -> "ModelCheckpoint":
        self.codec.eval()
        self.discriminator.eval()
        return self


def build_checkpoint(n_blocks: int = DEFAULT_BLOCKS, message_bits: int = DEFAULT_MESSAGE_BITS,
                     hidden_channels: int = DEFAULT_HIDDEN_CHANNELS, channel_mode: str = "magnitude_phase",
                     geometry: SpectralGeometry = SpectralGeometry(), seed: int = 0) -> ModelCheckpoint:
    """Fresh (stage-0) model"""
    torch.manual_seed(seed)
    codec = InvertibleCodec(n_blocks, message_bits, hidden_channels, geometry, channel_mode)
    discriminator = Discriminator()
    manifest = {"stage": 0, "step": 0, "seed": seed, **codec.architecture()}
    return ModelCheckpoint(codec, discriminator, manifest)



def _as_tensor(value, ck: ModelCheckpoint) -> torch.Tensor:
    samples = getattr(value, "samples", value)
    tensor = torch.as_tensor(np.asarray(samples) if not torch.is_tensor(samples) else samples)
    return tensor.to(device=ck.device, dtype=ck.codec.contract.weight.dtype)


def expand_message(m, ck: ModelCheckpoint) -> torch.Tensor:
    with torch.no_grad():
        return ck.codec.expand_message(_as_tensor(m, ck))


def block_forward(x: torch.Tensor, m: torch.Tensor, block: CouplingBlock) -> Tuple[torch.Tensor, torch.Tensor]:
    return block(x, m)


def block_inverse(x1: torch.Tensor, m1: torch.Tensor, block: CouplingBlock) -> Tuple[torch.Tensor, torch.Tensor]:
    return block.inverse(x1, m1)


def encode_segment(x, m, ck: ModelCheckpoint) -> np.ndarray:
    """Watermark one 16000-sample segment; returns clamped samples"""
    host = _as_tensor(x, ck)
    if not torch.all(torch.isfinite(host)):
        raise ShapeError("Host segment contains non-finite samples")
    with torch.no_grad():
        out = ck.codec.encode(host, _as_tensor(m, ck), clamp=True)
    return out.squeeze(0).cpu().numpy().astype(np.float32)


def encode_batch(hosts: np.ndarray, messages: np.ndarray, ck: ModelCheckpoint) -> np.ndarray:
    with torch.no_grad():
        out = ck.codec.encode(_as_tensor(hosts, ck), _as_tensor(messages, ck), clamp=True)
    return out.cpu().numpy().astype(np.float32)


def decode_batch(received: np.ndarray, ck: ModelCheckpoint, z_seed: int = 0) -> np.ndarray:
    """Soft scores (B, K) for a batch of 1-EUL windows"""
    with torch.no_grad():
        soft = ck.codec.decode(_as_tensor(received, ck), z_seed=z_seed)
    return soft.cpu().numpy().astype(np.float64)


def decode_segment(y, ck: ModelCheckpoint, z_seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Decode one segment: (bits in {0,1}, soft scores)"""
    soft = decode_batch(_as_tensor(y, ck).reshape(1, -1), ck, z_seed)[0]
    return (soft >= BIT_THRESHOLD).astype(np.uint8), soft


def discriminate(w, ck: ModelCheckpoint) -> float:
    wave = _as_tensor(w, ck)
    if wave.shape[-1] != ck.codec.geometry.segment_samples:
        raise ShapeError(f"Discriminator expects {ck.codec.geometry.segment_samples} samples")
    with torch.no_grad():
        return float(ck.discriminator(wave.reshape(1, -1))[0])


def parameter_report(codec: InvertibleCodec) -> Dict:
    total = sum(p.numel() for p in codec.parameters())
    message_layers = sum(p.numel() for p in codec.expand.parameters()) + sum(
        p.numel() for p in codec.contract.parameters()
    )
    return {
        "codec_parameters": int(total),
        "message_layer_parameters": int(message_layers),
        "message_layer_share": round(message_layers / total, 4) if total else 0.0,
    }
