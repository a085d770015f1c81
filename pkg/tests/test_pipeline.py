import numpy as np
import pytest
import torch

from text2song.audio import Waveform
from text2song.codec import AcousticTokenGrid, CodecModel
from text2song.errors import ConfigurationError, StageError, ValidationError
from text2song.mstransformer import MultiScaleTransformer, TrainConfig, generate, train_transformer
from text2song.pipeline import (StageModels, mix, prepare_svs_condition, prepare_v2a_condition, stage_model_config,
                                svs_sequence, synthesize_accompaniment, synthesize_vocal, text_to_song, v2a_sequence)
from text2song.score import UNVOICED_BUCKET, MusicScore, pitch_bucket
from text2song.seqlayout import LayoutConfig, pack_prefix, unpack_targets
from text2song.tritower import FrozenTextEncoder, TowerConfig, TriTower, build_tokenizer

LAY = LayoutConfig()
WORDS = "one two three four five six seven eight nine ten mellow pop piano"


def tiny_stage(cond_dim=0, seed=0):
    torch.manual_seed(seed)
    cfg = stage_model_config(LAY, 256, cond_dim, embed_dim=16, global_layers=1, global_width=32, global_heads=2,
                             global_ffn=64, local_width=32, local_heads=2, local_ffn=64)
    return MultiScaleTransformer(cfg, LAY)


def codec(stem, seed):
    torch.manual_seed(seed)
    m = CodecModel(stem_kind=stem).eval()
    with torch.no_grad():
        m.quantizer.codebooks.normal_(0, 0.5)
        m.quantizer.codebooks[:, 0] = 0
    return m


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    tok = build_tokenizer([WORDS], vocab_size=100)
    return FrozenTextEncoder(TriTower(TowerConfig(width=32, layers=1, heads=2, ffn=64, vocab_size=100), tok))


@pytest.fixture(scope="module")
def models(encoder):
    return StageModels(tiny_stage(), tiny_stage(encoder.width, 1), codec("vocal", 2), codec("accompaniment", 3),
                       encoder)


def score(frames=12):
    half = frames // 2
    return MusicScore([3, 0], [half, frames - half], [220] * half + [0] * (frames - half))


# ---- conditions


def test_svs_condition_construction():
    s = MusicScore([5], [4], [220] * 4)
    toks = prepare_svs_condition(s, LAY).tokens
    ph, p = LAY.phoneme_offset + 5, LAY.pitch_offset + int(pitch_bucket(220))
    assert toks.tolist() == [ph, p] * 4
    assert len(prepare_svs_condition(MusicScore([], [], []), LAY)) == 0
    unv = prepare_svs_condition(MusicScore([0], [2], [0, 0]), LAY).tokens
    assert unv[1] == LAY.pitch_offset + UNVOICED_BUCKET
    with pytest.raises(ValidationError):
        MusicScore([1], [3], [220, 220])


def test_v2a_condition_layout(encoder):
    prompt = "one two three four five six seven eight nine ten"
    vocal = AcousticTokenGrid(np.arange(12).reshape(4, 3))
    block = prepare_v2a_condition(vocal, prompt, encoder, LAY)
    n_text = len(encoder.non_pooled(prompt))
    assert n_text == 10
    assert block.continuous[:10].all() and not block.continuous[10:].any()
    assert (block.ids[:10] == LAY.cont).all() and (block.ids[10] == LAY.sep).all()
    assert np.array_equal(block.ids[11:], vocal.tokens)
    again = prepare_v2a_condition(vocal, prompt, encoder, LAY)
    assert np.array_equal(block.rows, again.rows)
    with pytest.raises(ValidationError):
        prepare_v2a_condition(vocal, "  ", encoder, LAY)


def test_prompt_projection_width(models, encoder):
    rows = torch.from_numpy(encoder.non_pooled("mellow pop"))
    assert models.v2a.project_condition(rows).shape[-1] == models.v2a.config.embed_dim


# ---- mix


def test_mix_examples():
    r = np.random.default_rng(0)
    a = Waveform(r.uniform(-0.5, 0.5, 100).astype(np.float32))
    b = Waveform(r.uniform(-0.5, 0.5, 100).astype(np.float32))
    z = Waveform(np.zeros(100, np.float32))
    assert np.array_equal(mix(a, z).samples, a.samples)
    assert np.array_equal(mix(a, b).samples, mix(b, a).samples)
    hot = Waveform(np.full(4, 0.8, np.float32))
    assert np.all(mix(hot, hot).samples == 1.0)
    with pytest.raises(ValidationError):
        mix(a, Waveform(np.zeros(99, np.float32)))


# ---- stage inference


def test_synthesize_vocal_contract(models):
    assert synthesize_vocal(MusicScore([], [], []), models.svs).n_frames == 0
    a = synthesize_vocal(score(), models.svs, seed=4, max_frames=8)
    assert a == synthesize_vocal(score(), models.svs, seed=4, max_frames=8)
    assert a.n_frames <= 8
    with pytest.raises(ConfigurationError):
        synthesize_vocal(score(), models.v2a)


def test_accompaniment_matches_vocal_length(models):
    for t in (1, 5, 9):
        v = AcousticTokenGrid(np.random.default_rng(t).integers(0, 1024, (t, 3)))
        assert synthesize_accompaniment(v, "mellow pop", models.v2a, models.text_encoder, seed=t).n_frames == t


def test_overfit_stage1_reproduces_clip():
    m = tiny_stage()
    s = score(10)
    target = AcousticTokenGrid(np.random.default_rng(0).integers(0, 1024, (10, 3)))
    train_transformer(m, [svs_sequence(s, target, LAY)], TrainConfig(steps=300, batch_size=1, lr=3e-3, warmup=10))
    assert synthesize_vocal(s, m, top_k=1) == target


def test_overfit_stage2_reproduces_clip(encoder):
    m = tiny_stage(encoder.width, 5)
    vocal = AcousticTokenGrid(np.random.default_rng(1).integers(0, 1024, (6, 3)))
    accomp = AcousticTokenGrid(np.random.default_rng(2).integers(0, 1024, (6, 3)))
    seq = v2a_sequence(vocal, "mellow pop piano", accomp, encoder, LAY)
    train_transformer(m, [seq], TrainConfig(steps=300, batch_size=1, lr=3e-3, warmup=10))
    assert synthesize_accompaniment(vocal, "mellow pop piano", m, encoder, top_k=1).tokens.tolist() == \
        accomp.tokens.tolist()


# ---- orchestration


def test_text_to_song_contracts(models):
    out = text_to_song(score(), "mellow pop", models, seed=0)
    again = text_to_song(score(), "mellow pop", models, seed=0)
    assert np.array_equal(out.mix.samples, again.mix.samples)
    assert len(out.mix) == out.vocal_tokens.n_frames * 320 == len(out.vocal) == len(out.accompaniment)
    assert np.array_equal(out.mix.samples, np.clip(out.vocal.samples + out.accompaniment.samples, -1, 1))
    assert out.seeds == {"stage1": 0, "stage2": 1}


def test_stage_isolation(models):
    a = text_to_song(score(), "mellow pop", models, seed=0, stage1_top_k=1, stage2_seed=10)
    b = text_to_song(score(), "mellow pop", models, seed=7, stage1_top_k=1, stage2_seed=11)
    assert a.vocal_tokens == b.vocal_tokens


def test_stage_errors_are_attributed(models):
    with pytest.raises(StageError) as e:
        text_to_song(score(), "   ", models)
    assert "stage2" in str(e.value)


def test_codec_assignment_checked(models):
    with pytest.raises(ConfigurationError):
        StageModels(models.svs, models.v2a, models.accomp_codec, models.vocal_codec, models.text_encoder)


def test_stage_models_load(tmp_path, models, encoder):
    models.svs.save(tmp_path / "svs.pt")
    models.v2a.save(tmp_path / "v2a.pt")
    models.vocal_codec.save(tmp_path / "vc.pt")
    models.accomp_codec.save(tmp_path / "ac.pt")
    encoder.model.save(tmp_path / "tt.pt")
    loaded = StageModels.load(tmp_path / "svs.pt", tmp_path / "v2a.pt", tmp_path / "vc.pt", tmp_path / "ac.pt",
                              tmp_path / "tt.pt")
    assert set(loaded.hashes()) == {"svs", "v2a", "vocal_codec", "accomp_codec", "tritower"}
    a = text_to_song(score(), "mellow pop", models, seed=3)
    b = text_to_song(score(), "mellow pop", loaded, seed=3)
    assert np.array_equal(a.mix.samples, b.mix.samples)
