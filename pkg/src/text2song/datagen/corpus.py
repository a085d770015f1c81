"""Synthetic paired-stem corpus: rendering, segmentation, captions and the JSONL manifest."""
from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..audio import Waveform, read_wav, write_wav
from ..errors import ValidationError
from ..score import MusicScore
from .captions import generate_caption, validate_tags
from .render import HOP, SR, make_song_spec, render_accompaniment, render_vocal
from .segment import segment_by_phrase

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
SPLITS = ("train", "valid", "test")


@dataclass
class CorpusConfig:
    song_seconds: float = 8.0
    seg_min: float = 6.0
    seg_max: float = 10.0
    n_svs_extra: int = 0              # extra vocal-only songs (Stage-1 data)
    exclude_svs_extra: bool = False
    exclude_song_data: bool = False
    split_fractions: tuple = (0.8, 0.1, 0.1)
    tag_pool: tuple | None = None     # restrict songs to these tag tuples, cycled
    style_variants: bool = False      # one row per pooled style, all sharing the song's vocal
    workers: int = 1

    def __post_init__(self):
        if self.song_seconds <= 0 or self.seg_min <= 0 or self.seg_max < self.seg_min:
            raise ValidationError("need song_seconds > 0 and 0 < seg_min <= seg_max")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValidationError("split_fractions must be three values summing to 1")
        if self.n_svs_extra < 0:
            raise ValidationError("n_svs_extra must be >= 0")
        if self.tag_pool is not None:
            self.tag_pool = tuple(tuple(validate_tags(t)) for t in self.tag_pool)
            if not self.tag_pool:
                raise ValidationError("tag_pool must not be empty")
        if self.style_variants and self.tag_pool is None:
            raise ValidationError("style_variants needs a tag_pool")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["tag_pool"] = None if self.tag_pool is None else [list(t) for t in self.tag_pool]
        return d


def split_counts(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_valid = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    if n_valid + n_test >= n:
        n_valid, n_test = (0, 0) if n < 3 else (1, 1)
    return n - n_valid - n_test, n_valid, n_test


def song_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class CorpusManifest:
    root: Path
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST
        with open(path, "w", encoding="utf-8") as f:
            for r in self.rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "CorpusManifest":
        root = Path(root)
        path = root / MANIFEST if root.is_dir() else root
        if not path.exists():
            raise ValidationError(f"no corpus manifest at {path}")
        rows = [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
        return cls(path.parent, rows)

    def filter(self, predicate) -> "CorpusManifest":
        return CorpusManifest(self.root, [r for r in self.rows if predicate(r)])

    def split(self, name: str) -> "CorpusManifest":
        return self.filter(lambda r: r["split"] == name)

    def source(self, name: str) -> "CorpusManifest":
        return self.filter(lambda r: r["source"] == name)

    def quality_filtered(self) -> "CorpusManifest":
        """Drop live recordings and multi-singer rows (always a no-op on synthetic data)."""
        return self.filter(lambda r: not r.get("live", False) and r.get("n_singers", 1) == 1)

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    def vocal(self, row) -> Waveform:
        return read_wav(self.path(row["vocal_wav"]))

    def accomp(self, row) -> Waveform:
        if row.get("accomp_wav") is None:
            raise ValidationError(f"row {row['id']} has no accompaniment stem")
        return read_wav(self.path(row["accomp_wav"]))

    def score(self, row) -> MusicScore:
        return MusicScore.load(self.path(row["score"]))

    def summary(self) -> dict:
        secs = sum(r["end"] - r["start"] for r in self.rows) / SR
        tags = Counter(t for r in self.rows for t in r["tags"])
        return {"rows": len(self.rows), "hours": secs / 3600.0,
                "splits": dict(Counter(r["split"] for r in self.rows)),
                "sources": dict(Counter(r["source"] for r in self.rows)),
                "tags": dict(sorted(tags.items()))}


def _render_song(args):
    """Render and segment one song; writes stems and scores, returns manifest rows.

    With ``style_variants`` the vocal is rendered once from the first pooled
    style and every pooled style gets its own accompaniment, tags and caption.
    """
    index, sid_seed, source, split, cfg_dict, out = args
    cfg = CorpusConfig(**{**cfg_dict, "split_fractions": tuple(cfg_dict["split_fractions"]),
                          "tag_pool": cfg_dict["tag_pool"]})
    if cfg.style_variants:
        styles = list(cfg.tag_pool)
    else:
        styles = [None if cfg.tag_pool is None else cfg.tag_pool[index % len(cfg.tag_pool)]]
    spec = make_song_spec(sid_seed, cfg.song_seconds, styles[0])
    vocal, score = render_vocal(spec)
    song_id = f"{'song' if source == 'song' else 'svs'}{index:05d}"
    out = Path(out)
    rows = []
    for v, tags in enumerate(styles):
        vspec = spec if tags is None else spec.with_tags(tags)
        accomp = render_accompaniment(vspec) if source == "song" else None
        segs = segment_by_phrase(vocal, score, cfg.seg_min, cfg.seg_max, accomp=accomp,
                                 boundaries=spec.phrase_ends)
        for k, seg in enumerate(segs):
            rid = f"{song_id}_{k:02d}" + (f"_v{v}" if cfg.style_variants else "")
            vp, sp = f"audio/{rid}_vocal.wav", f"scores/{rid}.json"
            write_wav(out / vp, seg.vocal)
            seg.score.save(out / sp)
            ap = None
            if seg.accomp is not None:
                ap = f"audio/{rid}_accomp.wav"
                write_wav(out / ap, seg.accomp)
            rows.append({
                "id": rid, "song_id": song_id, "source": source, "split": split,
                "vocal_wav": vp, "accomp_wav": ap, "score": sp,
                "tags": list(vspec.tags), "caption": generate_caption(vspec.tags, sid_seed),
                "start": seg.start * HOP, "end": seg.end * HOP,
                "live": False, "n_singers": 1,
            })
        if source != "song":
            break
    return rows


def build_corpus(n_songs: int, out_dir, config: CorpusConfig | None = None, seed: int = 0) -> CorpusManifest:
    """Render ``n_songs`` captioned songs (+ optional vocal-only extras) into ``out_dir``.

    Songs are split train/valid/test by song. Ablation switches drop rows after
    generation, so the remaining rows are identical to an unfiltered build.
    """
    cfg = config or CorpusConfig()
    if n_songs < 1:
        raise ValidationError("n_songs must be >= 1")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "scores").mkdir(parents=True, exist_ok=True)

    order = np.random.default_rng(seed).permutation(n_songs)
    n_tr, n_va, _ = split_counts(n_songs, cfg.split_fractions)
    split_of = {}
    for rank, i in enumerate(order):
        split_of[int(i)] = "train" if rank < n_tr else "valid" if rank < n_tr + n_va else "test"

    jobs = [(i, song_seed(seed, i), "song", split_of[i], cfg.to_dict(), str(out)) for i in range(n_songs)]
    jobs += [(i, song_seed(seed + 1_000_003, i), "svs_extra", "train", cfg.to_dict(), str(out))
             for i in range(cfg.n_svs_extra)]
    if cfg.exclude_song_data:
        jobs = [j for j in jobs if j[2] != "song"]
    if cfg.exclude_svs_extra:
        jobs = [j for j in jobs if j[2] != "svs_extra"]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            parts = list(ex.map(_render_song, jobs))
    else:
        parts = [_render_song(j) for j in jobs]
    manifest = CorpusManifest(out, [r for p in parts for r in p])
    manifest.save()
    log.info("corpus: %d rows from %d songs written to %s", len(manifest), n_songs, out)
    return manifest


def check_manifest(m: CorpusManifest) -> None:
    """Validate file existence, stem alignment, score length and split disjointness."""
    songs_by_split = {}
    for r in m.rows:
        v = m.vocal(r)
        s = m.score(r)
        if len(v) != s.n_frames * HOP:
            raise ValidationError(f"{r['id']}: score covers {s.n_frames * HOP} samples, vocal has {len(v)}")
        if r.get("accomp_wav") is not None and len(m.accomp(r)) != len(v):
            raise ValidationError(f"{r['id']}: stems differ in length")
        songs_by_split.setdefault(r["split"], set()).add(r["song_id"])
    names = list(songs_by_split)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if songs_by_split[a] & songs_by_split[b]:
                raise ValidationError(f"splits {a} and {b} share songs")
