#!/usr/bin/env python3
"""
invmark Spectral Transform
Differentiable STFT/ISTFT between 1-EUL waveforms and 2-channel feature maps
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from errors import ConfigError, ShapeError


CHANNEL_MODES = ("magnitude_phase", "real_imag")


@dataclass(frozen=True)
class SpectralGeometry:
    n_fft: int = 1000
    hop_length: int = 400
    segment_samples: int = 16000

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frames(self) -> int:
        return self.segment_samples // self.hop_length + 1

    @property
    def shape(self):
        return (2, self.freq_bins, self.frames)

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "hop_length": self.hop_length, "segment_samples": self.segment_samples}


class SpectralTransform(torch.nn.Module):
    """Hamming-window STFT with reflection centering and least-squares inversion.

    Spectrograms are (B, 2, F, T) real tensors. In ``magnitude_phase`` mode channel 0
    holds |X| and channel 1 the phase in (-pi, pi]; ``real_imag`` stores Re/Im instead.
    """

    def __init__(self, geometry: SpectralGeometry = SpectralGeometry(), channel_mode: str = "magnitude_phase"):
        super().__init__()
        if channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"Unknown spectrogram channel mode {channel_mode!r}")
        self.geometry = geometry
        self.channel_mode = channel_mode
        self.register_buffer("window", torch.hamming_window(geometry.n_fft, dtype=torch.float32), persistent=False)

    def _window_for(self, tensor: torch.Tensor) -> torch.Tensor:
        return self.window.to(device=tensor.device, dtype=tensor.dtype)

    def stft(self, wave: torch.Tensor) -> torch.Tensor:
        squeeze = wave.dim() == 1
        if squeeze:
            wave = wave.unsqueeze(0)
        if wave.dim() != 2 or wave.shape[-1] != self.geometry.segment_samples:
            raise ShapeError(
                f"stft expects (B, {self.geometry.segment_samples}) waveforms, got {tuple(wave.shape)}"
            )

        spec = torch.stft(
            wave,
            n_fft=self.geometry.n_fft,
            hop_length=self.geometry.hop_length,
            win_length=self.geometry.n_fft,
            window=self._window_for(wave),
            center=True,
            pad_mode="reflect",
            normalized=False,
            onesided=True,
            return_complex=True,
        )

        if self.channel_mode == "magnitude_phase":
            phase = torch.angle(spec)
            phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
            out = torch.stack([spec.abs(), phase], dim=1)
        else:
            out = torch.stack([spec.real, spec.imag], dim=1)
        return out.squeeze(0) if squeeze else out

    def istft(self, spec: torch.Tensor) -> torch.Tensor:
        squeeze = spec.dim() == 3
        if squeeze:
            spec = spec.unsqueeze(0)
        if spec.dim() != 4 or tuple(spec.shape[1:]) != self.geometry.shape:
            raise ShapeError(f"istft expects (B, {self.geometry.shape}) spectrograms, got {tuple(spec.shape)}")

        if self.channel_mode == "magnitude_phase":
            # channel 0 may go negative inside the network
            complex_spec = torch.complex(spec[:, 0] * torch.cos(spec[:, 1]), spec[:, 0] * torch.sin(spec[:, 1]))
        else:
            complex_spec = torch.complex(spec[:, 0], spec[:, 1])

        wave = torch.istft(
            complex_spec,
            n_fft=self.geometry.n_fft,
            hop_length=self.geometry.hop_length,
            win_length=self.geometry.n_fft,
            window=self._window_for(spec),
            center=True,
            normalized=False,
            onesided=True,
            length=self.geometry.segment_samples,
        )
        return wave.squeeze(0) if squeeze else wave


def stft(wave: torch.Tensor, channel_mode: str = "magnitude_phase") -> torch.Tensor:
    """STFT at the reference geometry (window 1000, hop 400, 16000 samples)"""
    return SpectralTransform(channel_mode=channel_mode).stft(wave)


def istft(spec: torch.Tensor, channel_mode: str = "magnitude_phase") -> torch.Tensor:
    """Inverse of :func:`stft` at the reference geometry"""
    return SpectralTransform(channel_mode=channel_mode).istft(spec)
