"""Parametric song rendering: melody + phonemes -> vocal stem, tags -> accompaniment stem.

Everything runs on a 50 fps frame clock (hop 320 at 16 kHz) so the vocal,
the accompaniment and the score share one timeline exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..audio import Waveform
from ..errors import ValidationError
from ..score import MusicScore
from .captions import AXIS_OF, TAXONOMY, validate_tags

SR = 16000
HOP = 320
FPS = SR // HOP
PEAK = 0.45
VOCAL_RANGE = (80.0, 1000.0)
MELODY_SPAN = 4  # semitones either side of the genre's register centre

# 40-symbol abstract inventory: silence, 12 vowels, 27 consonants.
VOWELS = ("a", "e", "i", "o", "u", "ae", "ao", "er", "ih", "uh", "ei", "ou")
CONSONANTS = ("b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x",
              "zh", "ch", "sh", "r", "z", "c", "s", "y", "w", "v", "ng", "th", "dh")
PHONEMES = ("sil",) + VOWELS + CONSONANTS
PHONEME_ID = {p: i for i, p in enumerate(PHONEMES)}
SIL = 0
N_PHONEMES = len(PHONEMES)

_VOWEL_FORMANTS = {
    "a": (800, 1200, 2500), "e": (500, 1900, 2500), "i": (300, 2300, 3000),
    "o": (500, 900, 2400), "u": (320, 800, 2300), "ae": (700, 1700, 2500),
    "ao": (600, 1000, 2500), "er": (500, 1400, 1700), "ih": (400, 2000, 2600),
    "uh": (550, 1100, 2400), "ei": (450, 2100, 2700), "ou": (450, 850, 2350),
}


def _build_formants() -> np.ndarray:
    table = np.zeros((N_PHONEMES, 3))
    rng = np.random.default_rng(1234)
    for p, i in PHONEME_ID.items():
        if p in _VOWEL_FORMANTS:
            table[i] = _VOWEL_FORMANTS[p]
        elif p != "sil":
            table[i] = [rng.uniform(250, 500), rng.uniform(1000, 2200), rng.uniform(2400, 3400)]
    return table


FORMANTS = _build_formants()
BANDWIDTHS = np.array([90.0, 120.0, 180.0])

# Tag effects. Genre sets tempo, register and brightness; mood sets note
# length, vibrato depth (cents) and rate (Hz), tempo scaling and articulation:
# a per-note loudness shape, breath noise and extra spectral darkening.
GENRE_STYLE = {
    "pop": dict(tempo=110, centre=208.0, bright=1.0, acc_octave=0),
    "rock": dict(tempo=130, centre=294.0, bright=0.75, acc_octave=-1),
    "jazz": dict(tempo=95, centre=147.0, bright=1.5, acc_octave=0),
    "electronic": dict(tempo=125, centre=415.0, bright=0.45, acc_octave=1),
}
MOOD_STYLE = {
    "mellow": dict(tempo_scale=0.8, beats=(1.0, 2.0, 2.0, 4.0), vibrato=25.0, vib_rate=5.0,
                   shape="flat", breath=0.02, dark=0.3),
    "energetic": dict(tempo_scale=1.2, beats=(0.5, 0.5, 1.0, 1.0), vibrato=10.0, vib_rate=6.5,
                      shape="decay", breath=0.0, dark=0.0),
    "sentimental": dict(tempo_scale=0.9, beats=(1.0, 1.0, 2.0), vibrato=60.0, vib_rate=5.5,
                        shape="swell", breath=0.02, dark=0.0),
    "dreamy": dict(tempo_scale=0.85, beats=(2.0, 2.0, 4.0), vibrato=40.0, vib_rate=4.5,
                   shape="flat", breath=0.06, dark=0.0),
}
MAJOR = np.array([0, 2, 4, 5, 7, 9, 11])


@dataclass(frozen=True)
class NoteEvent:
    pitch: float          # Hz
    onset: int            # frame
    duration: int         # frames
    phonemes: tuple = ()  # phoneme ids sung on this note; default one vowel


@dataclass(frozen=True)
class SongSpec:
    tempo: float
    key: int                          # tonic pitch class 0..11 (major)
    notes: tuple                      # NoteEvents, non-overlapping, sorted
    tags: tuple
    n_frames: int
    seed: int = 0
    phrase_ends: tuple = field(default=())  # frames where a lyric phrase ends

    def __post_init__(self):
        validate_tags(self.tags)
        if self.n_frames < 0:
            raise ValidationError("n_frames must be >= 0")
        prev_end = 0
        for n in self.notes:
            if not VOCAL_RANGE[0] <= n.pitch <= VOCAL_RANGE[1]:
                raise ValidationError(f"note pitch {n.pitch} Hz outside vocal range {VOCAL_RANGE}")
            if n.duration < 1 or n.onset < prev_end:
                raise ValidationError("notes must be sorted, non-overlapping and at least one frame long")
            if n.onset + n.duration > self.n_frames:
                raise ValidationError("note extends past the end of the song")
            if any(not 1 <= p < N_PHONEMES for p in n.phonemes):
                raise ValidationError("note phonemes must be non-silence inventory ids")
            if len(n.phonemes) > n.duration:
                raise ValidationError("more phonemes than frames on a note")
            prev_end = n.onset + n.duration

    @property
    def n_samples(self) -> int:
        return self.n_frames * HOP

    def tag(self, axis: str, default: str) -> str:
        for t in self.tags:
            if AXIS_OF[t] == axis:
                return t
        return default

    def with_tags(self, tags) -> "SongSpec":
        return SongSpec(self.tempo, self.key, self.notes, tuple(tags), self.n_frames, self.seed, self.phrase_ends)


def midi_to_hz(m):
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=np.float64) - 69) / 12)


def hz_to_midi(f):
    return 69 + 12 * np.log2(np.asarray(f, dtype=np.float64) / 440.0)


def random_tags(rng: np.random.Generator) -> tuple:
    return tuple(TAXONOMY[a][rng.integers(len(TAXONOMY[a]))] for a in ("genre", "instrument", "mood"))


def make_song_spec(seed: int, seconds: float = 8.0, tags=None) -> SongSpec:
    """Random diatonic melody in phrases of two bars, styled by ``tags``."""
    rng = np.random.default_rng(seed)
    tags = tuple(tags) if tags is not None else random_tags(rng)
    validate_tags(tags)
    genre = next((t for t in tags if AXIS_OF[t] == "genre"), "pop")
    mood = next((t for t in tags if AXIS_OF[t] == "mood"), "mellow")
    g, m = GENRE_STYLE[genre], MOOD_STYLE[mood]
    tempo = g["tempo"] * m["tempo_scale"] * rng.uniform(0.95, 1.05)
    beat = FPS * 60.0 / tempo
    key = int(rng.integers(12))
    n_frames = int(round(seconds * FPS))

    centre = hz_to_midi(g["centre"])
    # scale degrees (midi) around the register centre
    degrees = [k + 12 * o + key for o in range(-2, 12) for k in MAJOR]
    pool = [d for d in degrees if abs(d - centre) <= MELODY_SPAN and VOCAL_RANGE[0] <= midi_to_hz(d) <= VOCAL_RANGE[1]]

    notes, phrase_ends = [], []
    t, phrase_beats, pos = 0, 8.0, int(rng.integers(len(pool)))
    while True:
        # one phrase: notes filling phrase_beats minus a half-beat breath
        start = t
        remaining = phrase_beats - 0.5
        while remaining > 1e-6:
            b = min(float(rng.choice(m["beats"])), remaining)
            dur = int(round(b * beat))
            if t + dur > n_frames or dur < 2:
                break
            pos = int(np.clip(pos + rng.integers(-2, 3), 0, len(pool) - 1))
            n_ph = 1 if dur < 6 else 2
            syll = (int(rng.integers(13, N_PHONEMES)),) if n_ph == 2 else ()
            syll = syll + (int(rng.integers(1, 13)),)
            notes.append(NoteEvent(float(np.round(midi_to_hz(pool[pos]), 2)), t, dur, syll))
            t += dur
            remaining -= b
        t = min(n_frames, start + int(round(phrase_beats * beat)))
        if t >= n_frames or not notes or notes[-1].onset < start:
            break
        phrase_ends.append(t)
    return SongSpec(float(tempo), key, tuple(notes), tags, n_frames, int(seed), tuple(phrase_ends))


def _frame_tracks(spec: SongSpec):
    """Per-frame target pitch (0 = rest), phoneme id and note index."""
    pitch = np.zeros(spec.n_frames)
    phon = np.full(spec.n_frames, SIL, np.int64)
    for n in spec.notes:
        sl = slice(n.onset, n.onset + n.duration)
        pitch[sl] = n.pitch
        ph = n.phonemes or (PHONEME_ID["a"],)
        if len(ph) == 1:
            phon[sl] = ph[0]
        else:
            # consonants get short fixed slots, the vowel takes the rest
            cons = min(3, max(1, n.duration // (4 * (len(ph) - 1))))
            bounds = [n.onset + i * cons for i in range(len(ph))] + [n.onset + n.duration]
            for p, a, b in zip(ph, bounds[:-1], bounds[1:]):
                phon[a:b] = p
    return pitch, phon


def _formant_gain(freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
    """Magnitude of a sum of three resonances at ``freqs`` (samples, harmonics)."""
    g = np.full(freqs.shape, 0.05)
    for i, (w, b) in enumerate(zip((1.0, 0.7, 0.4), BANDWIDTHS)):
        g += w / (1.0 + ((freqs - formants[:, i]) / b) ** 2)
    return g


def _note_shape(shape: str, n: int) -> np.ndarray:
    """Loudness over one note: flat, accented decay or a swell."""
    x = np.linspace(0.0, 1.0, n, endpoint=False)
    if shape == "decay":
        return np.exp(-2.5 * x)
    if shape == "swell":
        return 0.35 + 0.65 * x
    return np.ones(n)


def render_vocal(spec: SongSpec, max_harmonics: int = 40) -> tuple[Waveform, MusicScore]:
    """Band-limited sawtooth with vibrato, shaped per phoneme by formant resonances.

    Consonant slots add a short noise burst. The returned score carries the
    per-frame mean of the rendered instantaneous F0, rounded to Hz.
    """
    rng = np.random.default_rng([spec.seed, 1])
    genre = spec.tag("genre", "pop")
    mood = spec.tag("mood", "mellow")
    depth_cents = MOOD_STYLE[mood]["vibrato"]
    tilt = GENRE_STYLE[genre]["bright"] + MOOD_STYLE[mood]["dark"]
    n = spec.n_samples
    pitch_f, phon_f = _frame_tracks(spec)
    score_ph, score_du = _runs(phon_f)
    if n == 0 or not spec.notes:
        return Waveform(np.zeros(n, np.float32), SR), MusicScore(score_ph, score_du, np.zeros(spec.n_frames, np.int64))

    t = np.arange(n) / SR
    base = np.repeat(pitch_f, HOP)
    voiced = base > 0
    vib_rate = MOOD_STYLE[mood]["vib_rate"]
    inst = base * 2.0 ** (depth_cents / 1200.0 * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(inst) / SR

    form = FORMANTS[np.repeat(phon_f, HOP)]
    y = np.zeros(n)
    for k in range(1, max_harmonics + 1):
        fk = k * inst
        ok = voiced & (fk < 0.45 * SR)
        if not ok.any():
            break
        amp = np.where(ok, _formant_gain(fk, form) / k ** tilt, 0.0)
        y += amp * np.sin(k * phase)

    # note envelopes: 10 ms attack, 20 ms release
    env = np.zeros(n)
    att, rel = int(0.01 * SR), int(0.02 * SR)
    for note in spec.notes:
        a, b = note.onset * HOP, (note.onset + note.duration) * HOP
        e = _note_shape(MOOD_STYLE[mood]["shape"], b - a)
        e[: min(att, len(e))] *= np.linspace(0, 1, min(att, len(e)), endpoint=False)
        r = min(rel, len(e))
        e[len(e) - r:] *= np.linspace(1, 0, r)
        env[a:b] = e
    y *= env

    cons = np.isin(np.repeat(phon_f, HOP), [PHONEME_ID[c] for c in CONSONANTS])
    if cons.any():
        burst = np.diff(rng.standard_normal(n + 1)) * 0.05 * np.abs(y).max()
        y += np.where(cons, burst, 0.0) * env

    breath = MOOD_STYLE[mood]["breath"]
    if breath > 0:
        y += np.diff(rng.standard_normal(n + 1)) * breath * np.abs(y).max() * env * voiced

    peak = np.abs(y).max()
    y = y * (PEAK / peak) if peak > 0 else y
    frame_f0 = np.where(pitch_f > 0, inst.reshape(-1, HOP).mean(axis=1), 0.0)
    score = MusicScore(score_ph, score_du, np.rint(frame_f0).astype(np.int64))
    return Waveform(y.astype(np.float32), SR), score


def _runs(seq: np.ndarray):
    if len(seq) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    change = np.nonzero(np.diff(seq))[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(seq)]])
    return seq[starts], ends - starts


def chord_progression(spec: SongSpec) -> list[np.ndarray]:
    """One diatonic triad (I, IV, V or vi; midi pitch classes) per bar.

    Each bar takes the triad covering the most melody duration; ties keep the
    earlier candidate in (I, IV, V, vi) order.
    """
    beat = FPS * 60.0 / spec.tempo
    bar = 4 * beat
    n_bars = max(1, int(np.ceil(spec.n_frames / bar)))
    triads = [spec.key + MAJOR[[d, (d + 2) % 7, (d + 4) % 7]] for d in (0, 3, 4, 5)]
    score = np.zeros((n_bars, len(triads)))
    for note in spec.notes:
        pc = int(round(hz_to_midi(note.pitch))) % 12
        for f in range(note.onset, note.onset + note.duration):
            b = min(int(f // bar), n_bars - 1)
            for j, tri in enumerate(triads):
                if pc in tri % 12:
                    score[b, j] += 1
    return [triads[int(np.argmax(s))] % 12 for s in score]


def _tone(f: float, n: int, harmonics: int, tilt: float, detune: float = 0.0) -> np.ndarray:
    t = np.arange(n) / SR
    y = np.zeros(n)
    for k in range(1, harmonics + 1):
        if k * f >= 0.45 * SR:
            break
        y += np.sin(2 * np.pi * k * f * (1 + detune) * t) / k ** tilt
    return y


def _decay(n: int, tau: float) -> np.ndarray:
    e = np.exp(-np.arange(n) / (tau * SR))
    a = min(n, int(0.004 * SR))
    e[:a] *= np.linspace(0, 1, a, endpoint=False)
    return e


def _place(out: np.ndarray, sig: np.ndarray, at: int):
    if at >= len(out):
        return
    m = min(len(sig), len(out) - at)
    out[at: at + m] += sig[:m]


def _kick(rng, n):
    t = np.arange(n) / SR
    f = 50 + 90 * np.exp(-t / 0.03)
    return np.sin(2 * np.pi * np.cumsum(f) / SR) * _decay(n, 0.12)


def _snare(rng, n):
    return (0.6 * np.diff(rng.standard_normal(n + 1)) + 0.4 * _tone(190, n, 2, 1.0)) * _decay(n, 0.06)


def _hat(rng, n):
    return 0.5 * np.diff(np.diff(rng.standard_normal(n + 2))) * _decay(n, 0.02)


def render_accompaniment(spec: SongSpec) -> Waveform:
    """Chords from key + melody, voiced by the instrument tag and shaped by mood.

    Percussive layers (drums, plucks, struck chords, energetic bass) put
    onsets on the beat grid; "mellow" and "dreamy" keep sustained pads and no
    percussion unless drums are requested.
    """
    rng = np.random.default_rng([spec.seed, 2])
    n = spec.n_samples
    out = np.zeros(n)
    if n == 0:
        return Waveform(np.zeros(0, np.float32), SR)
    genre = spec.tag("genre", "pop")
    instrument = spec.tag("instrument", "piano")
    mood = spec.tag("mood", "mellow")
    g = GENRE_STYLE[genre]
    tilt = 1.0 + 0.5 * g["bright"]
    beat = int(round(SR * 60.0 / spec.tempo))
    bar = 4 * beat
    chords = chord_progression(spec)
    octave = 48 + 12 * g["acc_octave"]
    calm = mood in ("mellow", "dreamy")

    for b, tri in enumerate(chords):
        a = b * bar
        if a >= n:
            break
        freqs = midi_to_hz(octave + tri)
        root = float(midi_to_hz(octave - 12 + tri[0]))
        if instrument == "piano":
            hits = (0, 2) if calm else (0, 1, 2, 3)
            for h in hits:
                for f in freqs:
                    _place(out, 0.3 * _tone(f, 2 * beat, 8, tilt) * _decay(2 * beat, 0.5), a + h * beat)
        elif instrument == "guitar":
            step = beat if calm else beat // 2
            for i in range(4 * beat // step):
                f = freqs[i % 3] * (2 if i % 6 >= 3 else 1)
                _place(out, 0.35 * _tone(f, beat, 10, tilt) * _decay(beat, 0.15), a + i * step)
        elif instrument == "synth":
            m = min(bar, n - a)
            fade = np.minimum(1.0, np.minimum(np.arange(m), m - np.arange(m)) / (0.05 * SR))
            for f in freqs:
                pad = _tone(f, m, 12, tilt + 0.6, 0.0) + _tone(f, m, 12, tilt + 0.6, 0.003)
                out[a: a + m] += 0.12 * pad * fade
        if instrument == "drums" or mood == "energetic":
            sub = 2 if (instrument == "drums" or not calm) else 1
            for i in range(4 * sub):
                at = a + i * beat // sub
                if i % (2 * sub) == 0:
                    _place(out, 0.8 * _kick(rng, beat), at)
                elif i % sub == 0:
                    _place(out, 0.5 * _snare(rng, beat // 2), at)
                if instrument == "drums" or mood == "energetic":
                    _place(out, 0.25 * _hat(rng, beat // 4), at)
        # bass: eighth notes when energetic, whole notes otherwise
        if mood == "energetic":
            for i in range(8):
                _place(out, 0.3 * _tone(root, beat // 2, 4, 1.5) * _decay(beat // 2, 0.1), a + i * beat // 2)
        else:
            m = min(bar, n - a)
            env = np.minimum(1.0, np.minimum(np.arange(m), m - np.arange(m)) / (0.08 * SR))
            out[a: a + m] += 0.2 * _tone(root, m, 3, 2.0) * env
            if mood == "dreamy" and instrument != "synth":
                for f in freqs:
                    out[a: a + m] += 0.05 * _tone(2 * f, m, 4, 2.0) * env

    peak = np.abs(out).max()
    out = out * (PEAK / peak) if peak > 0 else out
    return Waveform(out.astype(np.float32), SR)
