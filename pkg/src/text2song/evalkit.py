"""Objective metrics: F0 frame error, retrieval (Recall@k, mAP), melody alignment, onset counting."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, stft_magnitude
from .errors import ValidationError

log = logging.getLogger(__name__)


def ffe(f0_ref, f0_hyp, gross: float = 0.2) -> float:
    """Fraction of frames with a voicing mismatch or a >20% pitch error where both are voiced."""
    ref = np.asarray(f0_ref, dtype=np.float64)
    hyp = np.asarray(f0_hyp, dtype=np.float64)
    if ref.shape != hyp.shape:
        raise ValidationError(f"F0 tracks differ in length: {ref.shape} vs {hyp.shape}")
    if ref.size == 0:
        raise ValidationError("empty F0 tracks")
    vr, vh = ref > 0, hyp > 0
    both = vr & vh
    pitch_err = np.zeros_like(both)
    pitch_err[both] = np.abs(hyp[both] - ref[both]) / ref[both] > gross
    return float(np.mean((vr != vh) | pitch_err))


@dataclass
class RetrievalResult:
    rankings: np.ndarray      # (n_queries, n_candidates) candidate indices, best first
    truth: np.ndarray         # (n_queries,) true candidate index
    candidate_ids: tuple | None = None

    def __post_init__(self):
        self.rankings = np.asarray(self.rankings, dtype=np.int64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        if self.rankings.ndim != 2 or len(self.truth) != len(self.rankings):
            raise ValidationError("rankings must be (n_queries, n_candidates) with one truth per query")
        m = self.rankings.shape[1]
        if not np.all(np.sort(self.rankings, axis=1) == np.arange(m)):
            raise ValidationError("every ranking must be a permutation of the candidate pool")

    def ranks(self) -> np.ndarray:
        """1-based rank of the true candidate for every query."""
        return np.argmax(self.rankings == self.truth[:, None], axis=1) + 1


def _check_unit(x: np.ndarray, name: str):
    norms = np.linalg.norm(x, axis=1)
    if x.size and not np.allclose(norms, 1.0, atol=1e-3):
        raise ValidationError(f"{name} embeddings must be unit-norm")


def rank_candidates(queries, candidates, truth) -> RetrievalResult:
    """Rank candidates by cosine similarity; ties go to the lower candidate index."""
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise ValidationError("queries and candidates must be (n, d) with a shared d")
    _check_unit(q, "query")
    _check_unit(c, "candidate")
    if len(truth) != len(q) or (truth.size and (truth.min() < 0 or truth.max() >= len(c))):
        raise ValidationError("truth must map each query to a candidate index")
    sims = q @ c.T
    # lexsort: last key is primary; stable by index for equal similarity
    idx = np.broadcast_to(np.arange(len(c)), sims.shape)
    order = np.lexsort((idx, -sims), axis=1)
    return RetrievalResult(order, truth)


def recall_at_k(queries, candidates, truth, k: int) -> float:
    pool = np.asarray(candidates).shape[0]
    if not 1 <= k <= pool:
        raise ValidationError(f"k={k} outside [1, {pool}]")
    res = rank_candidates(queries, candidates, truth)
    return float(np.mean(res.ranks() <= k))


def mean_average_precision(results: RetrievalResult) -> float:
    """Single-relevant-item AP is 1/rank, so mAP is the mean reciprocal rank."""
    if len(results.truth) == 0:
        raise ValidationError("mAP over an empty query set")
    return float(np.mean(1.0 / results.ranks()))


def chroma(w: Waveform, n_fft: int = 2048, hop: int = 320, fmin: float = 50.0, fmax: float = 4000.0) -> np.ndarray:
    """(12, frames) pitch-class energy from STFT power."""
    mag = stft_magnitude(w.samples.astype(np.float64), n_fft=n_fft, hop=hop)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / w.sample_rate)
    keep = (freqs >= fmin) & (freqs <= fmax)
    pc = np.rint(12 * np.log2(freqs[keep] / 440.0)).astype(np.int64) % 12
    out = np.zeros((12, mag.shape[1]))
    np.add.at(out, pc, mag[keep] ** 2)
    return out


def melody_alignment(vocal: Waveform, accomp: Waveform) -> float:
    """Pearson correlation of the two stems' chroma energy envelopes.

    Each pitch-class envelope is log-compressed and centred over time, then the
    (12 x frames) matrices are correlated as flat vectors. Returns NaN (and logs)
    when either envelope has zero variance.
    """
    if len(vocal) != len(accomp):
        raise ValidationError(f"stems differ in length: {len(vocal)} vs {len(accomp)}")
    a = np.log1p(100.0 * chroma(vocal))
    b = np.log1p(100.0 * chroma(accomp))
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        log.warning("melody_alignment undefined: constant chroma envelope")
        return float("nan")
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))


def spectral_flux(w: Waveform, n_fft: int = 1024, hop: int = 160) -> np.ndarray:
    mag = stft_magnitude(w.samples.astype(np.float64), n_fft=n_fft, hop=hop)
    logm = np.log1p(1000.0 * mag)
    return np.maximum(0.0, np.diff(logm, axis=1)).mean(axis=0)


def onset_count(w: Waveform, hop: int = 160, delta: float = 0.05, min_gap: float = 0.05,
                window: float = 0.1) -> int:
    """Count spectral-flux peaks above a local-mean threshold (absolute ``delta`` offset)."""
    flux = spectral_flux(w, hop=hop)
    if flux.size < 3:
        return 0
    half = max(1, int(window * w.sample_rate / hop))
    kernel = np.ones(2 * half + 1) / (2 * half + 1)
    local = np.convolve(flux, kernel, mode="same")
    is_peak = np.zeros_like(flux, dtype=bool)
    is_peak[1:-1] = (flux[1:-1] >= flux[:-2]) & (flux[1:-1] > flux[2:])
    cand = np.nonzero(is_peak & (flux > local + delta))[0]
    gap = int(min_gap * w.sample_rate / hop)
    count, last = 0, -gap - 1
    for i in cand:
        if i - last > gap:
            count += 1
            last = i
    return count


def metric_report(metric: str, value: float, n: int, config: dict | None = None) -> dict:
    return {"metric": metric, "value": None if np.isnan(value) else float(value), "n": int(n),
            "config": dict(config or {})}


def write_reports(path, reports: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(reports, indent=2))


def retrieval_metrics(query_ids, queries, cand_ids, candidates, ks=(1, 5, 10)) -> dict:
    """Recall@k and mAP for queries whose truth is the candidate with the same id."""
    pos = {c: i for i, c in enumerate(cand_ids)}
    missing = [q for q in query_ids if q not in pos]
    if missing:
        raise ValidationError(f"{len(missing)} queries have no matching candidate id (e.g. {missing[0]!r})")
    if max(ks) > len(cand_ids):
        raise ValidationError(f"candidate pool of {len(cand_ids)} is smaller than k={max(ks)}")
    truth = np.array([pos[q] for q in query_ids])
    res = rank_candidates(queries, candidates, truth)
    ranks = res.ranks()
    out = {f"recall@{k}": float(np.mean(ranks <= k)) for k in ks}
    out["mAP"] = mean_average_precision(res)
    return out
