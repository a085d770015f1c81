"""Two-stage text-to-song synthesis.

Stage 1 maps a music score to vocal tokens, Stage 2 maps vocal tokens plus a
text prompt to accompaniment tokens. Each stem is decoded by its own codec
and the two waveforms are summed and clamped.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform
from .checkpoint import file_sha256
from .codec import AcousticTokenGrid, CodecModel, encode, vocode
from .errors import ConfigurationError, StageError, Text2SongError, ValidationError
from .mstransformer import ModelConfig, MultiScaleTransformer, generate
from .score import MusicScore, pitch_bucket
from .seqlayout import (ConditionSequence, LayoutConfig, PatchBlock, UnifiedSequence, concat_blocks,
                        expand_condition, grid_patches, pack_prefix, pack_sequence, special_patch)
from .tritower import FrozenTextEncoder

log = logging.getLogger(__name__)

__all__ = ["MusicScore", "SongOutput", "StageModels", "prepare_svs_condition", "prepare_v2a_condition",
           "svs_sequence", "v2a_sequence", "synthesize_vocal", "synthesize_accompaniment", "mix",
           "text_to_song"]


# ---------------------------------------------------------------------------
# conditions

def prepare_svs_condition(score: MusicScore, layout: LayoutConfig | None = None) -> ConditionSequence:
    """Per frame: (phoneme id, pitch bucket id), interleaved; 2 tokens per frame."""
    layout = layout or LayoutConfig()
    if int(score.durations.sum()) != score.n_frames:
        raise ValidationError("score durations do not cover its f0 track")
    ph = score.frame_phonemes()
    if ph.size and (ph.min() < 0 or ph.max() >= layout.n_phonemes):
        raise ValidationError(f"phoneme ids must lie in [0, {layout.n_phonemes})")
    buckets = pitch_bucket(score.f0)
    if buckets.size and buckets.max() >= layout.n_pitch:
        raise ValidationError(f"pitch bucket outside the layout's {layout.n_pitch} entries")
    toks = np.empty(2 * score.n_frames, np.int64)
    toks[0::2] = ph + layout.phoneme_offset
    toks[1::2] = buckets + layout.pitch_offset
    return ConditionSequence("discrete", tokens=toks)


def svs_sequence(score: MusicScore, vocal: AcousticTokenGrid, layout: LayoutConfig) -> UnifiedSequence:
    return pack_sequence(expand_condition(prepare_svs_condition(score, layout), layout.n_q, layout), vocal, layout)


def prepare_v2a_condition(vocal: AcousticTokenGrid, prompt: str, encoder: FrozenTextEncoder,
                          layout: LayoutConfig) -> PatchBlock:
    """Prompt rows (one patch each, repeated over n_q cells), SEP, then vocal token patches."""
    if not prompt or not prompt.strip():
        raise ValidationError("empty prompt")
    rows = encoder.non_pooled(prompt)
    if len(rows) == 0:
        raise ValidationError(f"prompt {prompt!r} produced no text tokens")
    text = expand_condition(ConditionSequence("continuous", rows=rows), layout.n_q, layout)
    return concat_blocks(text, special_patch(layout.sep, layout.n_q), grid_patches(vocal, layout))


def v2a_sequence(vocal: AcousticTokenGrid, prompt: str, accomp: AcousticTokenGrid, encoder: FrozenTextEncoder,
                 layout: LayoutConfig) -> UnifiedSequence:
    return pack_sequence(prepare_v2a_condition(vocal, prompt, encoder, layout), accomp, layout)


# ---------------------------------------------------------------------------
# stage inference

def _check_model(model: MultiScaleTransformer, layout: LayoutConfig | None, stage: str):
    if not isinstance(model, MultiScaleTransformer):
        raise ConfigurationError(f"{stage} model is not a multi-scale transformer")
    if layout is not None and model.layout != layout:
        raise ConfigurationError(f"{stage} model was trained with a different sequence layout")


def _capacity(model: MultiScaleTransformer, prefix: UnifiedSequence) -> int:
    return model.config.max_patches - len(prefix) - 1


def synthesize_vocal(score: MusicScore, model: MultiScaleTransformer, top_k: int = 30, temperature: float = 0.8,
                     seed: int = 0, max_frames: int | None = None) -> AcousticTokenGrid:
    _check_model(model, None, "svs")
    lay = model.layout
    if score.n_frames == 0:
        return AcousticTokenGrid(np.zeros((0, lay.n_q), np.int64), stem="vocal", codebook_size=lay.n_audio)
    if model.config.cond_dim:
        raise ConfigurationError("svs model expects continuous conditions; wrong checkpoint?")
    prefix = pack_prefix(expand_condition(prepare_svs_condition(score, lay), lay.n_q, lay), lay)
    # the score fixes the song's length, so generation never runs past it
    cap = min(_capacity(model, prefix), score.n_frames)
    limit = cap if max_frames is None else min(max_frames, cap)
    if limit < 1:
        raise ValidationError(f"score of {score.n_frames} frames leaves no room in a {model.config.max_patches}-patch model")
    return generate(model, prefix, limit, top_k, temperature, seed, stem="vocal")


def synthesize_accompaniment(vocal: AcousticTokenGrid, prompt: str, model: MultiScaleTransformer,
                             encoder: FrozenTextEncoder, top_k: int = 30, temperature: float = 0.8,
                             seed: int = 0) -> AcousticTokenGrid:
    """Accompaniment tokens forced to exactly the vocal frame count."""
    _check_model(model, None, "v2a")
    lay = model.layout
    if model.config.cond_dim != encoder.width:
        raise ConfigurationError(f"v2a model expects {model.config.cond_dim}-wide prompt rows, "
                                 f"text encoder gives {encoder.width}")
    prefix = pack_prefix(prepare_v2a_condition(vocal, prompt, encoder, lay), lay)
    t = vocal.n_frames
    if t > _capacity(model, prefix):
        raise ValidationError(f"{t} vocal frames exceed the v2a model capacity")
    grid = generate(model, prefix, t, top_k, temperature, seed, min_frames=t, stem="accompaniment")
    assert grid.n_frames == t
    return grid


def mix(vocal: Waveform, accompaniment: Waveform, normalize: bool = False) -> Waveform:
    """Samplewise sum hard-clamped to [-1, 1]; optional peak normalisation afterwards."""
    if len(vocal) != len(accompaniment):
        raise ValidationError(f"stems differ in length: {len(vocal)} vs {len(accompaniment)}")
    if vocal.sample_rate != accompaniment.sample_rate:
        raise ValidationError("stems differ in sample rate")
    y = np.clip(vocal.samples + accompaniment.samples, -1.0, 1.0).astype(np.float32)
    if normalize:
        peak = float(np.abs(y).max()) if y.size else 0.0
        y = y / peak * 0.99 if peak > 0 else y
    return Waveform(y, vocal.sample_rate)


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class StageModels:
    svs: MultiScaleTransformer
    v2a: MultiScaleTransformer
    vocal_codec: CodecModel
    accomp_codec: CodecModel
    text_encoder: FrozenTextEncoder
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vocal_codec.stem_kind != "vocal" or self.accomp_codec.stem_kind != "accompaniment":
            raise ConfigurationError("codecs are assigned to the wrong stems")

    @classmethod
    def load(cls, svs, v2a, vocal_codec, accomp_codec, tritower) -> "StageModels":
        paths = {"svs": svs, "v2a": v2a, "vocal_codec": vocal_codec, "accomp_codec": accomp_codec,
                 "tritower": tritower}
        return cls(MultiScaleTransformer.load(svs, "svs transformer")[0],
                   MultiScaleTransformer.load(v2a, "v2a transformer")[0],
                   CodecModel.load(vocal_codec, "vocal"), CodecModel.load(accomp_codec, "accompaniment"),
                   FrozenTextEncoder.load(tritower), {k: str(v) for k, v in paths.items()})

    def hashes(self) -> dict:
        return {k: file_sha256(p) for k, p in self.paths.items() if Path(p).is_file()}


@dataclass
class SongOutput:
    vocal: Waveform
    accompaniment: Waveform
    mix: Waveform
    vocal_tokens: AcousticTokenGrid
    accomp_tokens: AcousticTokenGrid
    prompt: str
    seeds: dict
    timings: dict

    def __post_init__(self):
        if not len(self.vocal) == len(self.accompaniment) == len(self.mix):
            raise ValidationError("song stems differ in length")


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Text2SongError as e:
        raise StageError(name, e) from e
    except (ValueError, RuntimeError) as e:
        raise StageError(name, e) from e


def text_to_song(score: MusicScore, prompt: str, models: StageModels, seed: int = 0,
                 top_k: int = 30, temperature: float = 0.8, stage1_top_k: int | None = None,
                 stage2_seed: int | None = None, normalize: bool = False) -> SongOutput:
    """Score + prompt -> vocal, accompaniment and their mix.

    Stage 1 samples with ``seed``; Stage 2 with ``stage2_seed`` (default seed + 1)
    so its randomness never touches Stage-1 output.
    """
    s2 = seed + 1 if stage2_seed is None else stage2_seed
    k1 = top_k if stage1_top_k is None else stage1_top_k
    t = {}
    t0 = time.perf_counter()
    v_tok = _stage("stage1/svs", synthesize_vocal, score, models.svs, k1, temperature, seed)
    t["stage1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    a_tok = _stage("stage2/v2a", synthesize_accompaniment, v_tok, prompt, models.v2a, models.text_encoder,
                   top_k, temperature, s2)
    t["stage2"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    vocal = _stage("vocoder/vocal", vocode, v_tok, models.vocal_codec)
    accomp = _stage("vocoder/accompaniment", vocode, a_tok, models.accomp_codec)
    t["vocode"] = time.perf_counter() - t0
    out = _stage("mix", mix, vocal, accomp, normalize)
    return SongOutput(vocal, accomp, out, v_tok, a_tok, prompt, {"stage1": seed, "stage2": s2}, t)


# ---------------------------------------------------------------------------
# training data

def stage_model_config(layout: LayoutConfig, max_patches: int, cond_dim: int = 0, **kw) -> ModelConfig:
    """Desk-scale multi-scale transformer sized for the given layout."""
    base = dict(n_q=layout.n_q, vocab_size=layout.vocab_size, embed_dim=64, global_layers=2, global_width=128,
                global_heads=4, global_ffn=512, local_layers=1, local_width=128, local_heads=4, local_ffn=512,
                max_patches=max_patches, cond_dim=cond_dim)
    base.update(kw)
    return ModelConfig(**base)


def svs_training_sequences(manifest, rows, codec: CodecModel, layout: LayoutConfig) -> list[UnifiedSequence]:
    out = []
    for r in rows:
        grid = encode(manifest.vocal(r), codec)
        score = manifest.score(r)
        if grid.n_frames != score.n_frames:
            raise ValidationError(f"{r['id']}: {grid.n_frames} token frames vs {score.n_frames} score frames")
        out.append(svs_sequence(score, grid, layout))
    return out


def v2a_training_sequences(manifest, rows, vocal_codec: CodecModel, accomp_codec: CodecModel,
                           encoder: FrozenTextEncoder, layout: LayoutConfig,
                           prompts: dict | None = None) -> list[UnifiedSequence]:
    """Vocal tokens come from the ground-truth vocal stem (teacher forcing across stages)."""
    out = []
    for r in rows:
        if r.get("accomp_wav") is None:
            continue
        v = encode(manifest.vocal(r), vocal_codec)
        a = encode(manifest.accomp(r), accomp_codec)
        prompt = (prompts or {}).get(r["id"], r["caption"])
        out.append(v2a_sequence(v, prompt, a, encoder, layout))
    return out
