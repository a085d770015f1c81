import json
import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from text2song.audio import Waveform
from text2song.datagen import (ALL_TAGS, CorpusConfig, CorpusManifest, NoteEvent, SongSpec, build_corpus,
                               check_manifest, extract_f0, generate_caption, make_song_spec, plan_cuts,
                               render_accompaniment, render_vocal, segment_by_phrase, segment_clips, split_counts)
from text2song.datagen.render import HOP, SR
from text2song.errors import ValidationError
from text2song.evalkit import ffe, onset_count
from text2song.score import MusicScore


def sine(f, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return Waveform((amp * np.sin(2 * np.pi * f * t)).astype(np.float32))


# ---- F0


@pytest.mark.parametrize("f", [80, 110, 150, 220, 330, 440, 500])
def test_pure_tone_f0(f):
    est = extract_f0(sine(f))
    interior = est[2:-2]
    assert np.all(np.abs(interior - f) <= 1)


def test_silence_is_unvoiced():
    assert not extract_f0(Waveform(np.zeros(16000, np.float32))).any()


def test_octave_mix_reads_fundamental():
    t = np.arange(SR) / SR
    w = Waveform((0.3 * np.sin(2 * np.pi * 220 * t) + 0.3 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
    est = extract_f0(w)[2:-2]
    assert np.mean(np.abs(est - 220) <= 1) >= 0.9


def test_frame_count():
    assert len(extract_f0(Waveform(np.zeros(32000, np.float32)))) == 100


# ---- rendering


def single_note_spec(f=220.0, frames=50, tags=("pop", "piano", "mellow")):
    return SongSpec(120.0, 9, (NoteEvent(f, 0, frames, (1,)),), tags, frames)


def test_rendered_note_reads_back():
    w, score = render_vocal(single_note_spec())
    est = extract_f0(w)
    voiced = est > 0
    assert voiced.sum() > 40
    # vibrato moves the per-frame truth; the estimate tracks the score, not the nominal pitch
    assert np.mean(np.abs(est[voiced] - score.f0[voiced]) <= 1) >= 0.95
    assert np.all(np.abs(score.f0 - 220) <= 220 * (2 ** (25 / 1200) - 1) + 1)


def test_rest_only_spec():
    w, score = render_vocal(SongSpec(120.0, 0, (), ("pop",), 40))
    assert len(w) == 40 * HOP and not w.samples.any()
    assert not score.f0.any() and score.n_frames == 40


def test_out_of_range_pitch():
    with pytest.raises(ValidationError):
        single_note_spec(f=1500.0)
    with pytest.raises(ValidationError):
        single_note_spec(tags=("polka",))


def test_render_deterministic_and_aligned():
    spec = make_song_spec(5, 3.0)
    (a, sa), (b, sb) = render_vocal(spec), render_vocal(spec)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(sa.f0, sb.f0)
    acc = render_accompaniment(spec)
    assert len(acc) == len(a) == spec.n_samples
    assert np.array_equal(acc.samples, render_accompaniment(spec).samples)
    assert np.abs(acc.samples).max() <= 1 and np.abs(a.samples).max() <= 1


def test_score_matches_rendering():
    spec = make_song_spec(11, 4.0)
    w, score = render_vocal(spec)
    assert int(score.durations.sum()) * HOP == len(w)
    assert ffe(score.f0, extract_f0(w)) < 0.1


def test_drums_have_more_onsets_than_mellow_pad():
    for seed in range(3):
        spec = make_song_spec(seed, 6.0, ("pop", "drums", "energetic"))
        busy = onset_count(render_accompaniment(spec))
        calm = onset_count(render_accompaniment(spec.with_tags(("pop", "synth", "mellow"))))
        assert busy >= 2 * max(calm, 1)


@given(st.integers(0, 10_000), st.sampled_from([1.0, 2.5, 4.0]))
def test_spec_invariants(seed, seconds):
    spec = make_song_spec(seed, seconds)
    assert spec.tags and all(80 <= n.pitch <= 1000 for n in spec.notes)
    ends = [n.onset + n.duration for n in spec.notes]
    assert all(e <= o for e, o in zip(ends, [n.onset for n in spec.notes][1:]))


# ---- segmentation


def test_segment_clips_counts():
    n = lambda s: Waveform(np.zeros(int(s * SR), np.float32))
    assert len(segment_clips(n(35), n(35))) == 3
    assert len(segment_clips(n(9), n(9))) == 0
    clips = segment_clips(sine(100, 25), sine(200, 25))
    for c in clips:
        assert len(c.vocal) == len(c.accomp) == 10 * SR
        assert np.array_equal(c.vocal.samples, sine(100, 25).samples[c.start: c.start + 10 * SR])
    with pytest.raises(ValidationError):
        segment_clips(n(3), n(4))


def greedy_oracle(n, bounds, lo, hi):
    """Independent restatement: walk forward taking the furthest admissible boundary."""
    out, s = [], 0
    while n - s > hi:
        cands = [b for b in bounds if lo <= b - s <= hi]
        e = max(cands) if cands else s + hi
        out.append((s, e))
        s = e
    out.append((s, n))
    return out


def test_phrases_four_seconds_apart():
    n = 24 * 50
    bounds = list(range(200, n, 200))
    spans = plan_cuts(n, bounds, 300, 500)
    assert [(a, b) for a, b, _ in spans] == greedy_oracle(n, bounds, 300, 500)
    assert all(b - a == 400 for a, b, _ in spans)


@given(st.integers(1, 3000), st.lists(st.integers(1, 2999), max_size=30), st.integers(50, 300), st.integers(0, 300))
def test_plan_cuts_partition(n, bounds, lo, extra):
    hi = lo + extra
    spans = plan_cuts(n, bounds, lo, hi)
    assert spans[0][0] == 0 and spans[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert all(b - a <= hi for a, b, _ in spans)
    assert [(a, b) for a, b, _ in spans] == greedy_oracle(n, [b for b in bounds if 0 < b < n], lo, hi)


def test_single_phrase_and_reconstruction():
    spec = make_song_spec(2, 7.0)
    w, score = render_vocal(spec)
    segs = segment_by_phrase(w, score, 6, 10)
    assert len(segs) == 1 and segs[0].end == score.n_frames
    spec = make_song_spec(3, 25.0)
    w, score = render_vocal(spec)
    acc = render_accompaniment(spec)
    segs = segment_by_phrase(w, score, 6, 10, accomp=acc, boundaries=spec.phrase_ends)
    assert np.array_equal(np.concatenate([s.vocal.samples for s in segs]), w.samples)
    assert np.array_equal(np.concatenate([s.accomp.samples for s in segs]), acc.samples)
    for s in segs:
        assert int(s.score.durations.sum()) * HOP == len(s.vocal)


def test_hard_cut_is_logged(caplog):
    w = Waveform(np.zeros(30 * SR, np.float32))
    score = MusicScore([1], [30 * 50], np.full(30 * 50, 200))
    with caplog.at_level(logging.WARNING):
        segs = segment_by_phrase(w, score, 6, 10)
    assert any(s.hard_cut for s in segs) and "hard cut" in caplog.text


# ---- captions


def test_caption_examples():
    assert generate_caption(("pop", "piano", "mellow"), 0) == "This is a mellow pop piece led by piano."
    assert generate_caption(("pop", "piano", "energetic"), 0) == "This is an energetic pop piece led by piano."
    with pytest.raises(ValidationError):
        generate_caption(("pop", "banjo"))
    with pytest.raises(ValidationError):
        generate_caption(())


@given(st.lists(st.sampled_from(ALL_TAGS), min_size=1, max_size=5, unique=True), st.integers(0, 100))
def test_caption_contains_tags(tags, seed):
    cap = generate_caption(tags, seed)
    assert cap == generate_caption(tags, seed)
    assert all(t in cap for t in tags)


# ---- corpus


def test_split_counts():
    assert split_counts(50) == (40, 5, 5)
    assert split_counts(1) == (1, 0, 0)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    cfg = CorpusConfig(song_seconds=3.0, seg_min=1.0, seg_max=4.0, n_svs_extra=3)
    return build_corpus(20, tmp_path_factory.mktemp("c"), cfg, seed=4), cfg


def test_corpus_structure(small_corpus):
    m, _ = small_corpus
    check_manifest(m)
    songs = m.source("song")
    assert len({r["song_id"] for r in songs.rows}) == 20
    by_split = {s: {r["song_id"] for r in songs.split(s).rows} for s in ("train", "valid", "test")}
    assert [len(v) for v in by_split.values()] == [16, 2, 2]
    assert all(r["accomp_wav"] is None for r in m.source("svs_extra").rows)
    for r in m.rows:
        assert all(t in r["caption"] for t in r["tags"])
    assert len(m.quality_filtered()) == len(m)


def test_corpus_deterministic_and_ablations(small_corpus, tmp_path):
    m, cfg = small_corpus
    again = build_corpus(20, tmp_path / "a", cfg, seed=4)
    assert (m.root / "manifest.jsonl").read_bytes() == (again.root / "manifest.jsonl").read_bytes()
    no_extra = build_corpus(20, tmp_path / "b", CorpusConfig(**{**cfg.to_dict(), "split_fractions": (0.8, 0.1, 0.1),
                                                                "exclude_svs_extra": True}), seed=4)
    assert no_extra.rows == m.source("song").rows
    no_song = build_corpus(20, tmp_path / "c", CorpusConfig(**{**cfg.to_dict(), "split_fractions": (0.8, 0.1, 0.1),
                                                               "exclude_song_data": True}), seed=4)
    assert no_song.rows == m.source("svs_extra").rows
    loaded = CorpusManifest.load(m.root)
    assert loaded.rows == m.rows and loaded.summary()["rows"] == len(m)


def test_fifty_song_split(tmp_path):
    m = build_corpus(50, tmp_path, CorpusConfig(song_seconds=1.0, seg_min=0.5, seg_max=2.0), seed=0)
    assert len(m) == 50
    assert [len(m.split(s)) for s in ("train", "valid", "test")] == [40, 5, 5]


def test_style_variants_share_vocal(tmp_path):
    pool = (("pop", "drums", "energetic"), ("pop", "synth", "mellow"))
    m = build_corpus(2, tmp_path, CorpusConfig(song_seconds=2.0, seg_min=1.0, seg_max=3.0, tag_pool=pool,
                                               style_variants=True, split_fractions=(1.0, 0.0, 0.0)), seed=1)
    check_manifest(m)
    for sid in {r["song_id"] for r in m.rows}:
        rows = [r for r in m.rows if r["song_id"] == sid]
        assert sorted(tuple(r["tags"]) for r in rows) == sorted(pool)
        assert np.array_equal(m.vocal(rows[0]).samples, m.vocal(rows[1]).samples)
        assert not np.array_equal(m.accomp(rows[0]).samples, m.accomp(rows[1]).samples)
    with pytest.raises(ValidationError):
        CorpusConfig(style_variants=True)


def test_bad_manifest_detected(small_corpus, tmp_path):
    m, _ = small_corpus
    leak = dict(m.rows[0], id="leak", split="test" if m.rows[0]["split"] != "test" else "train")
    with pytest.raises(ValidationError):
        check_manifest(CorpusManifest(m.root, m.rows + [leak]))
    MusicScore([1], [3], [200, 200, 200]).save(tmp_path / "short.json")
    short = dict(m.rows[0], id="short", score=str(tmp_path / "short.json"))
    with pytest.raises(ValidationError):
        check_manifest(CorpusManifest(m.root, [short]))
    with pytest.raises(ValidationError):
        CorpusManifest.load(tmp_path / "nothing")
