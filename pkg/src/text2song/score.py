"""Music score container and pitch bucketing."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

N_PITCH_BUCKETS = 256
UNVOICED_BUCKET = N_PITCH_BUCKETS
PITCH_LO, PITCH_HI = 50.0, 1000.0
_CENTERS = np.geomspace(PITCH_LO, PITCH_HI, N_PITCH_BUCKETS)


def pitch_bucket(f0) -> np.ndarray:
    """Integer Hz -> bucket id in [0, 256]; 0 Hz maps to the unvoiced bucket 256."""
    f = np.asarray(f0, dtype=np.float64)
    out = np.full(f.shape, UNVOICED_BUCKET, dtype=np.int64)
    voiced = f > 0
    logf = np.log(np.clip(f[voiced], PITCH_LO, PITCH_HI))
    step = np.log(PITCH_HI / PITCH_LO) / (N_PITCH_BUCKETS - 1)
    out[voiced] = np.clip(np.rint((logf - np.log(PITCH_LO)) / step), 0, N_PITCH_BUCKETS - 1).astype(np.int64)
    return out


def bucket_center(bucket: int) -> float:
    return 0.0 if bucket == UNVOICED_BUCKET else float(_CENTERS[bucket])


@dataclass
class MusicScore:
    phonemes: np.ndarray   # (n,) phoneme ids
    durations: np.ndarray  # (n,) frames per phoneme, each >= 1
    f0: np.ndarray         # (frames,) rounded Hz, 0 = unvoiced

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64).reshape(-1)
        self.durations = np.asarray(self.durations, dtype=np.int64).reshape(-1)
        f0 = np.asarray(self.f0)
        if f0.size and not np.all(f0 == np.round(f0)):
            raise ValidationError("f0 values must be integers (rounded Hz)")
        self.f0 = f0.astype(np.int64).reshape(-1)
        if len(self.phonemes) != len(self.durations):
            raise ValidationError("phonemes and durations differ in length")
        if np.any(self.durations < 1):
            raise ValidationError("every phoneme duration must be >= 1 frame")
        if np.any(self.f0 < 0):
            raise ValidationError("f0 must be non-negative")
        if int(self.durations.sum()) != len(self.f0):
            raise ValidationError(f"durations sum to {int(self.durations.sum())} frames but f0 has {len(self.f0)}")

    @property
    def n_frames(self) -> int:
        return len(self.f0)

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phonemes, self.durations)

    def slice_frames(self, start: int, stop: int) -> "MusicScore":
        """Sub-score over frames [start, stop), splitting phonemes at the edges."""
        edges = np.concatenate([[0], np.cumsum(self.durations)])
        ph, du = [], []
        for p, a, b in zip(self.phonemes, edges[:-1], edges[1:]):
            lo, hi = max(a, start), min(b, stop)
            if hi > lo:
                ph.append(p)
                du.append(hi - lo)
        return MusicScore(np.array(ph, np.int64), np.array(du, np.int64), self.f0[start:stop])

    def to_dict(self) -> dict:
        return {"phonemes": self.phonemes.tolist(), "durations": self.durations.tolist(), "f0": self.f0.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MusicScore":
        missing = {"phonemes", "durations", "f0"} - set(d)
        if missing:
            raise ValidationError(f"score is missing fields {sorted(missing)}")
        return cls(d["phonemes"], d["durations"], d["f0"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MusicScore":
        return cls.from_dict(json.loads(Path(path).read_text()))
