import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from text2song.audio import Waveform
from text2song.errors import ValidationError
from text2song.tritower import (CLS_ID, ContrastiveConfig, FrozenTextEncoder, TowerConfig, Triplet, TriTower,
                                augment_spectrogram, augment_text, build_tokenizer, embed_triplets, encode_audio,
                                encode_text, info_nce_pair, mel_features, pad_spectrogram, patchify,
                                random_crop,
                                read_embedding_dump, tokenize, train_tritower, tritower_loss,
                                write_embedding_dump)

CAPTIONS = ["This is a mellow pop piece led by piano.", "An energetic rock song with drums and guitar.",
            "A dreamy electronic track built on synth.", "A sentimental jazz ballad with piano."]


def unit(x):
    x = torch.as_tensor(x, dtype=torch.float64)
    return x / x.norm(dim=-1, keepdim=True)


def brute_pair(zx, zy, tau):
    """Both InfoNCE directions with explicit sums over the batch."""
    n = len(zx)
    dot = lambda a, b: sum(float(a[i]) * float(b[i]) for i in range(len(a)))
    total = 0.0
    for a, b in ((zx, zy), (zy, zx)):
        for i in range(n):
            num = math.exp(dot(a[i], b[i]) / tau)
            den = sum(math.exp(dot(a[i], b[j]) / tau) for j in range(n))
            total += -math.log(num / den)
    return total / (2 * n)


@pytest.fixture(scope="module")
def tower():
    torch.manual_seed(0)
    return TriTower(TowerConfig(width=32, layers=1, heads=2, ffn=64, embed_dim=128, vocab_size=200),
                    build_tokenizer(CAPTIONS, vocab_size=200)).eval()


# ---- losses


def test_n1_loss_is_zero():
    z = unit(torch.randn(1, 128))
    assert info_nce_pair(z, unit(torch.randn(1, 128))).item() == 0.0
    assert tritower_loss(z, z, z).item() == 0.0


def test_hand_set_n2():
    zx = unit([[1.0, 0.0], [0.6, 0.8]])
    zy = unit([[0.8, 0.6], [0.0, 1.0]])
    assert abs(info_nce_pair(zx, zy, 0.2).item() - brute_pair(zx, zy, 0.2)) < 1e-6


@given(st.integers(1, 4), st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_pair_matches_brute_force(n, seed, tau):
    g = torch.Generator().manual_seed(seed)
    zx, zy = unit(torch.randn(n, 8, generator=g)), unit(torch.randn(n, 8, generator=g))
    assert abs(info_nce_pair(zx, zy, tau).item() - brute_pair(zx, zy, tau)) < 1e-6


def test_identical_batches_below_log_n():
    z = unit(torch.randn(8, 128))
    assert info_nce_pair(z, z, 0.2).item() < math.log(8)


def test_tritower_sum_is_exact():
    p, v, a = (unit(torch.randn(5, 128)) for _ in range(3))
    total = tritower_loss(p, v, a)
    assert torch.equal(total, info_nce_pair(p, v) + info_nce_pair(p, a) + info_nce_pair(v, a))


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_permutation_and_rotation_invariance(n, seed):
    g = torch.Generator().manual_seed(seed)
    p, v, a = (unit(torch.randn(n, 16, generator=g)) for _ in range(3))
    perm = torch.randperm(n, generator=g)
    base = tritower_loss(p, v, a).item()
    assert abs(tritower_loss(p[perm], v[perm], a[perm]).item() - base) < 1e-9
    q, _ = torch.linalg.qr(torch.randn(16, 16, generator=g, dtype=torch.float64))
    assert abs(info_nce_pair(p @ q, v @ q).item() - info_nce_pair(p, v).item()) < 1e-9


def test_loss_errors():
    with pytest.raises(ValidationError):
        info_nce_pair(torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ValidationError):
        tritower_loss(torch.zeros(2, 4), torch.zeros(3, 4), torch.zeros(2, 4))
    with pytest.raises(ValidationError):
        ContrastiveConfig(tau=0)


# ---- augmentation


def test_text_augmentation():
    c = CAPTIONS[0]
    assert augment_text(c, ["pop", "piano"], 1, p=0.0) == c
    assert augment_text(c, [], 1, p=1.0) == c
    assert augment_text(c, ["pop", "piano"], 5, p=1.0) == augment_text(c, ["pop", "piano"], 5, p=1.0)
    out = augment_text(c, ["pop", "piano"], 5, p=1.0)
    assert out.startswith(c) and out != c


def test_spec_augmentation():
    spec = np.random.default_rng(0).normal(size=(80, 100)).astype(np.float32)
    assert np.array_equal(augment_spectrogram(spec, 0, enabled=False), spec)
    out = augment_spectrogram(spec, 3)
    assert out.shape == spec.shape
    changed = out != spec
    assert np.allclose(out[changed], np.float32(spec.mean()))
    assert np.array_equal(out, augment_spectrogram(spec, 3))


@given(st.integers(1, 300), st.floats(0.1, 1.0), st.integers(0, 2**31 - 1))
def test_random_crop_is_a_window(t, keep, seed):
    spec = np.arange(4 * t, dtype=np.float32).reshape(4, t)
    out = random_crop(spec, seed, keep)
    n = out.shape[1]
    assert n <= t and (n == t or n >= max(16, int(round(t * keep))))
    # contiguous: the first row of a window is an arithmetic run inside the first row of the input
    assert np.array_equal(out[0], np.arange(out[0, 0], out[0, 0] + n))
    assert np.array_equal(out, random_crop(spec, seed, keep))
    if keep >= 1.0 or t <= 16:
        assert out is spec


# ---- text and audio encoders


def test_tokenizer_and_truncation(tower):
    ids = tokenize(tower.tokenizer, "Mellow PIANO")
    assert ids[0] == CLS_ID and len(ids) >= 3
    long = CAPTIONS[0] + " " + "and more words " * 12
    assert len(long) > 150
    assert np.array_equal(encode_text(tower, long), encode_text(tower, long[:77]))
    with pytest.raises(ValidationError):
        encode_text(tower, "   ")


def test_text_embedding_unit_and_deterministic(tower):
    for c in CAPTIONS:
        z = encode_text(tower, c)
        assert z.shape == (128,) and abs(np.linalg.norm(z) - 1) < 1e-6
        assert np.array_equal(z, encode_text(tower, c))


def patch_count_oracle(f, t):
    return (-(-f // 16)) * (-(-t // 16))


@pytest.mark.parametrize("t", [16, 37, 100, 251])
def test_patch_counts(t):
    spec = np.zeros((80, t), np.float32)
    padded = pad_spectrogram(spec)
    p, rows, cols = patchify(padded)
    assert padded.shape[0] == 80 and rows == 5
    assert len(p) == patch_count_oracle(80, t) == rows * cols


def test_audio_embeddings(tower):
    spec = np.random.default_rng(0).normal(size=(80, 64)).astype(np.float32)
    zv, za = encode_audio(tower, spec, "v"), encode_audio(tower, spec, "a")
    assert abs(np.linalg.norm(zv) - 1) < 1e-6 and abs(np.linalg.norm(za) - 1) < 1e-6
    assert not np.allclose(zv, za)
    with pytest.raises(ValidationError):
        encode_audio(tower, spec, "x")


def test_mel_features_shape():
    w = Waveform(np.zeros(16000, np.float32))
    f = mel_features(w)
    assert f.shape[0] == 80 and np.isfinite(f).all()


def test_frozen_encoder(tmp_path, tower):
    tower.save(tmp_path / "t.pt")
    enc = FrozenTextEncoder.load(tmp_path / "t.pt")
    assert not any(p.requires_grad for p in enc.model.parameters())
    rows = enc.non_pooled(CAPTIONS[1])
    assert rows.shape == (len(tokenize(tower.tokenizer, CAPTIONS[1])) - 1, enc.width)
    assert np.array_equal(rows, enc.non_pooled(CAPTIONS[1]))
    assert np.allclose(enc.pooled(CAPTIONS[1]), encode_text(tower, CAPTIONS[1]), atol=1e-6)


def test_embedding_dump_round_trip(tmp_path):
    e = {"p": np.eye(3), "v": np.eye(3)[::-1]}
    write_embedding_dump(tmp_path / "e.jsonl", ["a", "b", "c"], e)
    back = read_embedding_dump(tmp_path / "e.jsonl")
    assert back["p"][0] == ["a", "b", "c"] and np.array_equal(back["v"][1], e["v"])


# ---- training


def toy_triplets(n=24, seed=0):
    """Two styles: captions name the style, spectra carry it in distinct mel bands."""
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = i % 2
        v = r.normal(0, 0.1, (80, 48)).astype(np.float32)
        a = r.normal(0, 0.1, (80, 48)).astype(np.float32)
        v[10 + 40 * s: 20 + 40 * s] += 1.0
        a[5 + 50 * s: 25 + 50 * s] += 1.0
        cap = CAPTIONS[0] if s == 0 else CAPTIONS[1]
        out.append(Triplet(f"t{i}", f"s{i}", cap, ("pop", "piano") if s == 0 else ("rock", "drums"), v, a))
    return out


def test_training_lowers_loss_and_aligns_pairs():
    trips = toy_triplets()
    model, rows = train_tritower(trips[:16], ContrastiveConfig(steps=60, batch_size=8, log_every=1, warmup=5),
                                 TowerConfig(width=32, layers=1, heads=2, ffn=64), seed=0)
    first, last = np.mean([r["loss"] for r in rows[:5]]), np.mean([r["loss"] for r in rows[-5:]])
    assert last < first
    e = embed_triplets(model, trips[16:])
    e2 = embed_triplets(model, trips[16:])
    assert all(np.array_equal(e[k], e2[k]) for k in e)
    sims = e["p"] @ e["a"].T
    style = np.array([i % 2 for i in range(16, 24)])
    same = style[:, None] == style[None, :]
    assert sims[same].mean() > sims[~same].mean()
    for k in e:
        assert np.allclose(np.linalg.norm(e[k], axis=1), 1, atol=1e-6)


def test_degenerate_corpus_warns(caplog):
    t = toy_triplets(2)
    same = [Triplet(f"x{i}", f"s{i}", t[0].caption, t[0].tags, t[0].vocal, t[0].accomp) for i in range(3)]
    with caplog.at_level("WARNING"):
        train_tritower(same, ContrastiveConfig(steps=2, batch_size=2), TowerConfig(width=32, layers=1, heads=2, ffn=64))
    assert "degenerate" in caplog.text
    with pytest.raises(ValidationError):
        train_tritower(same[:1], ContrastiveConfig(steps=1))
