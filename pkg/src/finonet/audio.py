"""Waveform -> fixed-length MFCC matrix for the audio branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import ConfigError, EmptyAudio


@dataclass(frozen=True)
class AudioFrontEndConfig:
    sample_rate: int = 16000
    window_ms: float = 32.0
    hop_ms: float = 32.0
    n_fft: int = 512
    n_mels: int = 40
    n_mfcc: int = 20
    log_floor: float = 1e-10
    t_a: int = 320
    f_min: float = 0.0
    f_max: float = 8000.0

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ConfigError(f"window of {self.win_length} samples exceeds n_fft={self.n_fft}")
        if self.n_mfcc > self.n_mels:
            raise ConfigError("n_mfcc must not exceed n_mels")
        if self.hop_length < 1 or self.t_a < 1 or self.log_floor <= 0:
            raise ConfigError("hop, t_a and log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))


@dataclass
class MfccMatrix:
    data: np.ndarray  # (rows, n_mfcc)
    valid_windows: int


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_filterbank(cfg: AudioFrontEndConfig) -> np.ndarray:
    """Triangular HTK-mel filters sampled at the rfft bin centres, shape (n_mels, n_fft//2+1).

    Each triangle is scaled by 2 / (upper - lower edge in Hz) so it has unit area.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    tri = np.maximum(0.0, np.minimum(rising, falling))
    return tri * (2.0 / (hi - lo))


def frame_signal(waveform, cfg: AudioFrontEndConfig = AudioFrontEndConfig()) -> np.ndarray:
    """Cut into Hann-weighted windows; the last partial window is zero-padded.

    Returns an array of shape (n_windows, win_length).
    """
    x = np.asarray(waveform, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyAudio("cannot frame an empty waveform")
    win, hop = cfg.win_length, cfg.hop_length
    n = 1 + int(np.ceil(max(x.size - win, 0) / hop))
    padded = np.zeros((n - 1) * hop + win)
    padded[: x.size] = x
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return padded[idx] * periodic_hann(win)


def mfcc(windows: np.ndarray, cfg: AudioFrontEndConfig = AudioFrontEndConfig()) -> MfccMatrix:
    power = np.abs(np.fft.rfft(windows, n=cfg.n_fft, axis=-1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    log_e = np.log(np.maximum(energies, cfg.log_floor))
    coeffs = dct(log_e, type=2, norm="ortho", axis=-1)[:, : cfg.n_mfcc]
    return MfccMatrix(coeffs, len(windows))


def silence_vector(cfg: AudioFrontEndConfig = AudioFrontEndConfig()) -> np.ndarray:
    """MFCC row of digital silence, used as the padding row."""
    flat = np.full((1, cfg.n_mels), np.log(cfg.log_floor))
    return dct(flat, type=2, norm="ortho", axis=-1)[0, : cfg.n_mfcc]


def fix_length(m: MfccMatrix, t_a: int, cfg: AudioFrontEndConfig = AudioFrontEndConfig()) -> MfccMatrix:
    """Pad at the end with silence rows, or keep the last ``t_a`` rows."""
    rows = m.data.shape[0]
    if rows < t_a:
        pad = np.broadcast_to(silence_vector(cfg), (t_a - rows, m.data.shape[1]))
        data = np.concatenate([m.data, pad], axis=0)
    elif rows > t_a:
        data = m.data[rows - t_a:]
    else:
        data = m.data
    return MfccMatrix(np.ascontiguousarray(data), m.valid_windows)


def extract(waveform, cfg: AudioFrontEndConfig = AudioFrontEndConfig()) -> MfccMatrix:
    """Full front end: framing, MFCC, pad/clip to ``cfg.t_a`` rows."""
    return fix_length(mfcc(frame_signal(waveform, cfg), cfg), cfg.t_a, cfg)
