"""Tri-tower contrastive pretraining over (prompt, vocal, accompaniment) triplets.

Three encoders (text, vocal mel, accompaniment mel), each pooled on a [CLS]
position and projected to a shared 128-d unit sphere. Training minimises the
sum of the three symmetric pairwise InfoNCE losses.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, trainers

from .audio import Waveform, log_mel
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import TrainingDivergedError, ValidationError
from .layers import Block, init_weights

log = logging.getLogger(__name__)

MAX_TEXT_CHARS = 77
PATCH = 16
N_MELS = 80
SPECIALS = ["[PAD]", "[UNK]", "[CLS]"]
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2


# ---------------------------------------------------------------------------
# losses

def info_nce_pair(zx: torch.Tensor, zy: torch.Tensor, tau: float = 0.2) -> torch.Tensor:
    """Symmetric InfoNCE: mean of the x->y and y->x cross-entropies over the batch."""
    if zx.ndim != 2 or zx.shape != zy.shape:
        raise ValidationError(f"pair batches must be equal (N, d); got {tuple(zx.shape)} and {tuple(zy.shape)}")
    if zx.shape[0] == 0:
        raise ValidationError("InfoNCE over an empty batch")
    if tau <= 0:
        raise ValidationError("temperature must be > 0")
    logits = zx @ zy.T / tau
    target = torch.arange(zx.shape[0])
    return (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2


def tritower_loss(zp: torch.Tensor, zv: torch.Tensor, za: torch.Tensor, tau: float = 0.2) -> torch.Tensor:
    if not (zp.shape == zv.shape == za.shape):
        raise ValidationError(f"triplet batches differ in shape: {tuple(zp.shape)}, {tuple(zv.shape)}, {tuple(za.shape)}")
    return info_nce_pair(zp, zv, tau) + info_nce_pair(zp, za, tau) + info_nce_pair(zv, za, tau)


# ---------------------------------------------------------------------------
# augmentation

def augment_text(caption: str, tags: Sequence[str], seed: int, p: float = 0.5) -> str:
    """With probability ``p`` append a comma-joined random subset of ``tags``."""
    tags = list(tags)
    if not tags or p <= 0:
        return caption
    rng = np.random.default_rng(seed)
    if rng.random() >= p:
        return caption
    k = int(rng.integers(1, len(tags) + 1))
    pick = [tags[i] for i in rng.permutation(len(tags))[:k]]
    return f"{caption} {', '.join(pick)}"


def augment_spectrogram(spec: np.ndarray, seed: int, n_freq: int = 2, max_freq: int = 8,
                        n_time: int = 2, max_time: int = 16, enabled: bool = True) -> np.ndarray:
    """Mask up to ``n_freq`` bands of <= ``max_freq`` bins and ``n_time`` spans of
    <= ``max_time`` frames with the pre-mask global mean."""
    out = np.array(spec, dtype=np.float32, copy=True)
    if not enabled or out.size == 0:
        return out
    rng = np.random.default_rng(seed)
    fill = float(np.mean(spec))
    f, t = out.shape
    for _ in range(n_freq):
        w = int(rng.integers(0, min(max_freq, f) + 1))
        a = int(rng.integers(0, f - w + 1))
        out[a: a + w, :] = fill
    for _ in range(n_time):
        w = int(rng.integers(0, min(max_time, t) + 1))
        a = int(rng.integers(0, t - w + 1))
        out[:, a: a + w] = fill
    return out


def random_crop(spec: np.ndarray, seed: int, min_keep: float = 0.5, min_frames: int = PATCH) -> np.ndarray:
    """Random contiguous time window keeping a uniform fraction in [min_keep, 1] of the frames."""
    t = spec.shape[1]
    if min_keep >= 1.0 or t <= min_frames:
        return spec
    rng = np.random.default_rng(seed)
    n = max(min_frames, int(round(t * rng.uniform(min_keep, 1.0))))
    a = int(rng.integers(0, t - n + 1))
    return spec[:, a: a + n]


# ---------------------------------------------------------------------------
# text tokenisation

def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())[:MAX_TEXT_CHARS]


def build_tokenizer(texts: Sequence[str], vocab_size: int = 1000) -> Tokenizer:
    """Lowercase word-piece vocabulary learned from ``texts``."""
    tok = Tokenizer(models.WordPiece(unk_token="[UNK]"))
    tok.normalizer = normalizers.Lowercase()
    tok.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    trainer = trainers.WordPieceTrainer(vocab_size=vocab_size, special_tokens=SPECIALS, show_progress=False)
    tok.train_from_iterator(list(texts), trainer)
    return tok


def tokenize(tok: Tokenizer, text: str) -> list[int]:
    """[CLS] + word-piece ids of the 77-char prefix of the normalised text."""
    norm = normalize_text(text)
    if not norm:
        raise ValidationError("empty prompt text")
    return [CLS_ID] + tok.encode(norm).ids


# ---------------------------------------------------------------------------
# towers

@dataclass
class TowerConfig:
    width: int = 128
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    embed_dim: int = 128
    vocab_size: int = 1000
    max_text_tokens: int = MAX_TEXT_CHARS + 1
    n_mels: int = N_MELS
    max_time_patches: int = 64
    dropout: float = 0.2
    audio_pool: str = "mean"   # "cls" or masked mean over patch tokens

    def to_dict(self) -> dict:
        return asdict(self)


class TextTower(nn.Module):
    def __init__(self, c: TowerConfig):
        super().__init__()
        self.tok = nn.Embedding(c.vocab_size, c.width)
        self.pos = nn.Embedding(c.max_text_tokens, c.width)
        self.blocks = nn.ModuleList([Block(c.width, c.heads, c.ffn, c.dropout) for _ in range(c.layers)])
        self.ln = nn.LayerNorm(c.width)
        self.proj = nn.Linear(c.width, c.embed_dim)

    def hidden(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.tok(ids) + self.pos(torch.arange(ids.shape[1]))[None]
        for b in self.blocks:
            x = b(x, key_mask=mask)
        return self.ln(x)

    def forward(self, ids, mask):
        h = self.hidden(ids, mask)
        return F.normalize(self.proj(h[:, 0]), dim=-1), h


class AudioTower(nn.Module):
    """Spectrogram transformer over 16x16 patches with a [CLS] position."""

    def __init__(self, c: TowerConfig):
        super().__init__()
        self.c = c
        self.patch = nn.Linear(PATCH * PATCH, c.width)
        self.cls = nn.Parameter(torch.zeros(1, 1, c.width))
        self.freq_pos = nn.Embedding(-(-c.n_mels // PATCH), c.width)
        self.time_pos = nn.Embedding(c.max_time_patches, c.width)
        self.blocks = nn.ModuleList([Block(c.width, c.heads, c.ffn, c.dropout) for _ in range(c.layers)])
        self.ln = nn.LayerNorm(c.width)
        self.proj = nn.Linear(c.width, c.embed_dim)

    def forward(self, patches, rows: int, cols: int, mask=None):
        b = patches.shape[0]
        r = torch.arange(rows).repeat_interleave(cols)
        t = torch.arange(cols).repeat(rows)
        x = self.patch(patches) + self.freq_pos(r)[None] + self.time_pos(t)[None]
        x = torch.cat([self.cls.expand(b, -1, -1), x], dim=1)
        if mask is not None:
            mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        x = self.ln(x)
        if self.c.audio_pool == "cls":
            pooled = x[:, 0]
        else:
            w = (mask[:, 1:] if mask is not None else torch.ones(b, x.shape[1] - 1, dtype=torch.bool)).float()
            pooled = (x[:, 1:] * w[..., None]).sum(1) / w.sum(1, keepdim=True).clamp_min(1.0)
        return F.normalize(self.proj(pooled), dim=-1)


def pad_spectrogram(spec: np.ndarray, max_time_patches: int | None = None) -> np.ndarray:
    """Pad F and T up to multiples of 16 (edge values), cropping T to the tower's capacity."""
    spec = np.asarray(spec, dtype=np.float32)
    if spec.ndim != 2 or spec.size == 0:
        raise ValidationError("spectrogram must be a non-empty (F, T) array")
    f, t = spec.shape
    if max_time_patches is not None and t > max_time_patches * PATCH:
        spec = spec[:, : max_time_patches * PATCH]
        t = spec.shape[1]
    return np.pad(spec, ((0, (-f) % PATCH), (0, (-t) % PATCH)), mode="edge")


def patchify(spec: np.ndarray) -> tuple[np.ndarray, int, int]:
    """(F, T) with F, T multiples of 16 -> ((F/16)*(T/16), 256) row-major patches."""
    f, t = spec.shape
    if f % PATCH or t % PATCH:
        raise ValidationError(f"spectrogram {spec.shape} not padded to multiples of {PATCH}")
    rows, cols = f // PATCH, t // PATCH
    p = spec.reshape(rows, PATCH, cols, PATCH).transpose(0, 2, 1, 3).reshape(rows * cols, PATCH * PATCH)
    return p, rows, cols


def mel_features(w: Waveform) -> np.ndarray:
    """Log-mel (80 x frames) scaled to roughly unit range."""
    return ((log_mel(w, n_fft=1024, hop=256, n_mels=N_MELS) + 5.0) / 5.0).astype(np.float32)


class TriTower(nn.Module):
    def __init__(self, config: TowerConfig, tokenizer: Tokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        self.text = TextTower(config)
        self.vocal = AudioTower(config)
        self.accomp = AudioTower(config)
        init_weights(self)

    def _text_batch(self, texts: Sequence[str]):
        ids = [tokenize(self.tokenizer, t)[: self.config.max_text_tokens] for t in texts]
        n = max(len(i) for i in ids)
        arr = torch.full((len(ids), n), PAD_ID, dtype=torch.long)
        for k, i in enumerate(ids):
            arr[k, : len(i)] = torch.tensor(i)
        return arr, arr != PAD_ID

    def embed_text(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        ids, mask = self._text_batch(texts)
        z, h = self.text(ids, mask)
        return z, h, mask

    def _audio_batch(self, specs: Sequence[np.ndarray]):
        padded = [pad_spectrogram(s, self.config.max_time_patches) for s in specs]
        rows = padded[0].shape[0] // PATCH
        cols = max(p.shape[1] for p in padded) // PATCH
        out = np.zeros((len(padded), rows * cols, PATCH * PATCH), np.float32)
        mask = np.zeros((len(padded), rows * cols), bool)
        for k, p in enumerate(padded):
            full = np.pad(p, ((0, 0), (0, cols * PATCH - p.shape[1])), mode="edge")
            out[k] = patchify(full)[0]
            valid = np.zeros((rows, cols), bool)
            valid[:, : p.shape[1] // PATCH] = True
            mask[k] = valid.reshape(-1)
        return torch.from_numpy(out), rows, cols, torch.from_numpy(mask)

    def embed_audio(self, specs: Sequence[np.ndarray], modality: str) -> torch.Tensor:
        if modality not in ("v", "a"):
            raise ValidationError(f"modality must be 'v' or 'a', got {modality!r}")
        x, rows, cols, mask = self._audio_batch(specs)
        tower = self.vocal if modality == "v" else self.accomp
        return tower(x, rows, cols, mask)

    def save(self, path, extra: dict | None = None):
        return save_checkpoint(path, "tritower", {"tower": self.config.to_dict()}, self.state_dict(),
                               {"tokenizer": self.tokenizer.to_str(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "TriTower":
        ck = load_checkpoint(path, "tritower", what="text encoder (tri-tower checkpoint)")
        m = cls(TowerConfig(**ck["config"]["tower"]), Tokenizer.from_str(ck["extra"]["tokenizer"]))
        m.load_state_dict(ck["tensors"])
        return m.eval()


def encode_text(model: TriTower, text: str) -> np.ndarray:
    with torch.no_grad():
        return model.eval().embed_text([text])[0][0].numpy()


def encode_audio(model: TriTower, spec: np.ndarray, modality: str) -> np.ndarray:
    with torch.no_grad():
        return model.eval().embed_audio([spec], modality)[0].numpy()


class FrozenTextEncoder:
    """Inference-only text tower: pooled embedding and per-token hidden rows."""

    def __init__(self, model: TriTower):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @classmethod
    def load(cls, path) -> "FrozenTextEncoder":
        return cls(TriTower.load(path))

    @property
    def width(self) -> int:
        return self.model.config.width

    def pooled(self, text: str) -> np.ndarray:
        return encode_text(self.model, text)

    def non_pooled(self, text: str) -> np.ndarray:
        """(n_tokens, width) final-layer hidden states, [CLS] excluded."""
        with torch.no_grad():
            _, h, mask = self.model.embed_text([text])
        return h[0, 1: int(mask[0].sum())].numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# training

@dataclass
class Triplet:
    id: str
    song_id: str
    caption: str
    tags: tuple
    vocal: np.ndarray   # log-mel (80, T)
    accomp: np.ndarray


@dataclass
class ContrastiveConfig:
    tau: float = 0.2
    batch_size: int = 16
    steps: int = 3000
    lr: float = 1e-4
    warmup: int = 100
    text_aug: bool = True
    spec_aug: bool = True
    p_text_aug: float = 0.5
    crop_min: float = 0.5     # spectrogram augmentation also crops to a random window
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    min_lr_ratio: float = 0.1   # cosine decay floor after warmup
    log_every: int = 10

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError("tau must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def triplets_from_manifest(manifest, rows=None) -> list[Triplet]:
    out = []
    for r in rows if rows is not None else manifest.rows:
        if r.get("accomp_wav") is None:
            continue
        out.append(Triplet(r["id"], r["song_id"], r["caption"], tuple(r["tags"]),
                           mel_features(manifest.vocal(r)), mel_features(manifest.accomp(r))))
    return out


def _song_batch(triplets, rng, size):
    """Random batch with at most one segment per song (no same-song negatives)."""
    seen, picked = set(), []
    for i in rng.permutation(len(triplets)):
        if triplets[i].song_id not in seen:
            seen.add(triplets[i].song_id)
            picked.append(int(i))
            if len(picked) == size:
                break
    return picked


def _lr_factor(step: int, cfg: ContrastiveConfig) -> float:
    if step < cfg.warmup:
        return (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))


def train_tritower(triplets: Sequence[Triplet], config: ContrastiveConfig | None = None,
                   tower: TowerConfig | None = None, seed: int = 0, log_path=None,
                   tokenizer: Tokenizer | None = None, callback=None) -> tuple[TriTower, list[dict]]:
    """Contrastive training; ``callback(step, model)`` may add fields to logged rows."""
    cfg = config or ContrastiveConfig()
    if len(triplets) < 2:
        raise ValidationError("tri-tower training needs at least 2 triplets")
    if len({(t.caption, t.vocal.tobytes(), t.accomp.tobytes()) for t in triplets}) == 1:
        log.warning("degenerate corpus: all triplets identical")
    torch.manual_seed(seed)
    if tokenizer is None:
        tags = sorted({t for tr in triplets for t in tr.tags})
        tokenizer = build_tokenizer([t.caption for t in triplets] + [", ".join(tags)])
    tcfg = tower or TowerConfig()
    tcfg = TowerConfig(**{**tcfg.to_dict(), "vocab_size": tokenizer.get_vocab_size()})
    model = TriTower(tcfg, tokenizer)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, cfg))
    rng = np.random.default_rng(seed)
    rows, t0 = [], time.time()
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            ts = time.perf_counter()
            idx = _song_batch(triplets, rng, cfg.batch_size)
            texts, vs, as_ = [], [], []
            for k, i in enumerate(idx):
                tr = triplets[i]
                s = int(rng.integers(2**31))
                texts.append(augment_text(tr.caption, tr.tags, s, cfg.p_text_aug) if cfg.text_aug else tr.caption)
                v, a = tr.vocal, tr.accomp
                if cfg.spec_aug:
                    v, a = random_crop(v, s + 3, cfg.crop_min), random_crop(a, s + 4, cfg.crop_min)
                vs.append(augment_spectrogram(v, s + 1, enabled=cfg.spec_aug))
                as_.append(augment_spectrogram(a, s + 2, enabled=cfg.spec_aug))
            model.train()
            zp = model.embed_text(texts)[0]
            zv = model.embed_audio(vs, "v")
            za = model.embed_audio(as_, "a")
            loss = tritower_loss(zp, zv, za, cfg.tau)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"tri-tower loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
                n_tok = sum(v.shape[1] + a.shape[1] for v, a in zip(vs, as_)) // PATCH * (N_MELS // PATCH)
                row = {"step": step, "loss": loss.item(), "lr": opt.param_groups[0]["lr"],
                       "tokens_per_sec": round(n_tok / max(time.perf_counter() - ts, 1e-9), 1),
                       "elapsed": round(time.time() - t0, 3)}
                if callback is not None:
                    row.update(callback(step, model) or {})
                    model.train()
                rows.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    return model.eval(), rows


def embed_triplets(model: TriTower, triplets: Sequence[Triplet], batch: int = 64) -> dict:
    """{'p' | 'v' | 'a': (N, 128) array} for un-augmented inputs."""
    out = {"p": [], "v": [], "a": []}
    model.eval()
    with torch.no_grad():
        for s in range(0, len(triplets), batch):
            chunk = triplets[s: s + batch]
            out["p"].append(model.embed_text([t.caption for t in chunk])[0].numpy())
            out["v"].append(model.embed_audio([t.vocal for t in chunk], "v").numpy())
            out["a"].append(model.embed_audio([t.accomp for t in chunk], "a").numpy())
    return {k: np.concatenate(v).astype(np.float64) for k, v in out.items()}


def write_embedding_dump(path, ids: Sequence[str], embeddings: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for modality, arr in embeddings.items():
            for i, v in zip(ids, arr):
                f.write(json.dumps({"id": i, "modality": modality, "vector": [float(x) for x in v]}) + "\n")
    return path


def read_embedding_dump(path) -> dict:
    """{modality: (ids, (N, d) array)} from a JSONL dump."""
    by = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            by.setdefault(r["modality"], ([], []))
            by[r["modality"]][0].append(r["id"])
            by[r["modality"]][1].append(r["vector"])
    if not by:
        raise ValidationError(f"no embeddings in {path}")
    return {m: (ids, np.asarray(v, dtype=np.float64)) for m, (ids, v) in by.items()}
