"""Cutting songs into fixed clips or phrase-aligned training segments."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..audio import Waveform
from ..errors import ValidationError
from ..score import MusicScore

log = logging.getLogger(__name__)
HOP = 320


@dataclass
class ClipPair:
    start: int  # sample index
    vocal: Waveform
    accomp: Waveform


@dataclass
class Segment:
    start: int   # frame index
    end: int     # frame index (exclusive)
    vocal: Waveform
    score: MusicScore
    accomp: Waveform | None = None
    hard_cut: bool = False


def _slice(w: Waveform, a: int, b: int) -> Waveform:
    return Waveform(w.samples[a:b].copy(), w.sample_rate)


def segment_clips(vocal: Waveform, accomp: Waveform, clip_seconds: float = 10.0) -> list[ClipPair]:
    """Non-overlapping aligned clips; the trailing remainder shorter than a clip is dropped."""
    if len(vocal) != len(accomp) or vocal.sample_rate != accomp.sample_rate:
        raise ValidationError(f"stems are not aligned: {len(vocal)} vs {len(accomp)} samples")
    n = int(round(clip_seconds * vocal.sample_rate))
    if n < 1:
        raise ValidationError("clip length must be positive")
    return [ClipPair(s, _slice(vocal, s, s + n), _slice(accomp, s, s + n))
            for s in range(0, len(vocal) - n + 1, n)]


def phrase_boundaries(score: MusicScore) -> list[int]:
    """Frames where a silence run ends and singing resumes (lyric phrase starts)."""
    ph = score.frame_phonemes()
    sil = ph == 0
    starts = np.nonzero(sil[:-1] & ~sil[1:])[0] + 1
    return [int(s) for s in starts]


def plan_cuts(n_frames: int, boundaries, min_frames: int, max_frames: int) -> list[tuple[int, int, bool]]:
    """Greedy cut plan as (start, end, hard_cut) frame spans partitioning [0, n_frames).

    From each start, a remainder no longer than ``max_frames`` becomes the last
    segment. Otherwise cut at the latest boundary within [min, max] frames of
    the start, or hard-cut at ``max_frames`` when no boundary is in range.
    """
    if min_frames < 1 or max_frames < min_frames:
        raise ValidationError("need 1 <= min <= max segment length")
    bounds = sorted({int(b) for b in boundaries if 0 < b < n_frames})
    spans, s = [], 0
    while s < n_frames:
        if n_frames - s <= max_frames:
            spans.append((s, n_frames, False))
            break
        ok = [b for b in bounds if s + min_frames <= b <= s + max_frames]
        if ok:
            spans.append((s, ok[-1], False))
            s = ok[-1]
        else:
            spans.append((s, s + max_frames, True))
            s += max_frames
    return spans


def segment_by_phrase(vocal: Waveform, score: MusicScore, min_seconds: float = 6.0, max_seconds: float = 10.0,
                      accomp: Waveform | None = None, boundaries=None) -> list[Segment]:
    """Split a song at phrase boundaries into segments of ``min``-``max`` seconds.

    ``boundaries`` are frame indices; by default they come from the score's
    silence runs. Segments partition the song exactly.
    """
    if len(vocal) != score.n_frames * HOP:
        raise ValidationError(f"score covers {score.n_frames * HOP} samples, vocal has {len(vocal)}")
    if accomp is not None and len(accomp) != len(vocal):
        raise ValidationError("accompaniment and vocal differ in length")
    fps = vocal.sample_rate / HOP
    lo, hi = int(round(min_seconds * fps)), int(round(max_seconds * fps))
    if boundaries is None:
        boundaries = phrase_boundaries(score)
    out = []
    for a, b, hard in plan_cuts(score.n_frames, boundaries, lo, hi):
        if hard:
            log.warning("no phrase boundary within [%.1f, %.1f] s of frame %d; hard cut at %.1f s",
                        min_seconds, max_seconds, a, max_seconds)
        out.append(Segment(a, b, _slice(vocal, a * HOP, b * HOP), score.slice_frames(a, b),
                           None if accomp is None else _slice(accomp, a * HOP, b * HOP), hard))
    return out
