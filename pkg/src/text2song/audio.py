"""Waveform container, PCM16 WAV I/O and spectral front-ends."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim != 1:
            raise ValidationError(f"waveform must be mono (1-D), got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def write_wav(path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValidationError(f"{path}: only PCM16 WAV is supported")
        n_ch = f.getnchannels()
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0
    if n_ch > 1:
        x = x.reshape(-1, n_ch).mean(axis=1)
    return Waveform(x, sr)


def frame_signal(x: np.ndarray, frame_length: int, hop: int, center: bool = True) -> np.ndarray:
    """Slice into overlapping frames (n_frames, frame_length); zero padding when centered."""
    x = np.asarray(x, dtype=np.float64)
    if center:
        x = np.pad(x, (frame_length // 2, frame_length // 2))
    if len(x) < frame_length:
        return np.zeros((0, frame_length))
    n = 1 + (len(x) - frame_length) // hop
    return np.lib.stride_tricks.sliding_window_view(x, frame_length)[::hop][:n]


def stft_magnitude(x: np.ndarray, n_fft: int = 1024, hop: int = 256, win_length: int | None = None) -> np.ndarray:
    """Magnitude spectrogram, shape (n_fft // 2 + 1, n_frames), Hann window, centered frames."""
    win_length = win_length or n_fft
    window = np.hanning(win_length + 1)[:-1]
    if win_length < n_fft:
        lpad = (n_fft - win_length) // 2
        window = np.pad(window, (lpad, n_fft - win_length - lpad))
    frames = frame_signal(x, n_fft, hop)
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = 1024, n_mels: int = 80,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-style filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / max(mid - lo, 1e-9)
        down = (hi - bins) / max(hi - mid, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB_CACHE: dict = {}


def log_mel(w: Waveform, n_fft: int = 1024, hop: int = 256, n_mels: int = 80) -> np.ndarray:
    """Log mel spectrogram (n_mels, frames) with FFT 1024 / hop 256 / window 1024 defaults."""
    key = (w.sample_rate, n_fft, n_mels)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(w.sample_rate, n_fft, n_mels)
    mag = stft_magnitude(w.samples, n_fft=n_fft, hop=hop)
    return np.log(_FB_CACHE[key] @ mag + 1e-5).astype(np.float32)
