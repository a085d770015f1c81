"""Frame-wise F0 by normalized cross-correlation (autocorrelation family)."""
from __future__ import annotations

import numpy as np

from ..audio import Waveform

HOP = 320


def _nccf(frames: np.ndarray, window: int, lags: np.ndarray) -> np.ndarray:
    """Normalized correlation of x[0:W] with x[lag:lag+W] for each frame and lag."""
    head = frames[:, :window]
    e0 = np.einsum("fw,fw->f", head, head)
    out = np.empty((frames.shape[0], len(lags)))
    for j, lag in enumerate(lags):
        seg = frames[:, lag: lag + window]
        num = np.einsum("fw,fw->f", head, seg)
        el = np.einsum("fw,fw->f", seg, seg)
        out[:, j] = num / np.sqrt(e0 * el + 1e-20)
    return out


def extract_f0(w: Waveform, hop: int = HOP, fmin: float = 60.0, fmax: float = 1000.0,
               threshold: float = 0.5, window: int = 400, silence_rms: float = 1e-4) -> np.ndarray:
    """Per-frame F0 in rounded Hz (0 = unvoiced), one value per ``hop`` samples.

    Frame ``t`` is analysed around the centre of samples [t*hop, (t+1)*hop).
    The chosen lag is the shortest local NCCF peak within 90% of the best
    one, refined by parabolic interpolation. Frames whose peak NCCF is below
    ``threshold`` or whose energy is below ``silence_rms`` are unvoiced.
    """
    sr = w.sample_rate
    x = w.samples.astype(np.float64)
    n_frames = len(x) // hop
    if n_frames == 0:
        return np.zeros(0, np.int64)
    lag_lo = max(2, int(np.floor(sr / fmax)))
    lag_hi = int(np.ceil(sr / fmin)) + 1
    span = window + lag_hi + 1
    centers = np.arange(n_frames) * hop + hop // 2
    starts = centers - window // 2
    pad = span
    xp = np.pad(x, (pad, pad))
    idx = starts[:, None] + pad + np.arange(span)[None, :]
    frames = xp[idx]
    lags = np.arange(lag_lo - 1, lag_hi + 2)
    r = _nccf(frames, window, lags)

    rms = np.sqrt(np.mean(frames[:, :window] ** 2, axis=1))
    f0 = np.zeros(n_frames, np.int64)
    inner = r[:, 1:-1]
    is_peak = (inner >= r[:, :-2]) & (inner > r[:, 2:])
    for t in range(n_frames):
        if rms[t] < silence_rms:
            continue
        peaks = np.nonzero(is_peak[t])[0] + 1
        if len(peaks) == 0:
            continue
        best = r[t, peaks].max()
        if best < threshold:
            continue
        j = peaks[np.argmax(r[t, peaks] >= 0.9 * best)]
        a, b, c = r[t, j - 1], r[t, j], r[t, j + 1]
        denom = a - 2 * b + c
        delta = 0.5 * (a - c) / denom if denom != 0 else 0.0
        f0[t] = int(np.rint(sr / (lags[j] + delta)))
    return f0
