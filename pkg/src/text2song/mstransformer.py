"""Global/local (multi-scale) decoder-only transformer over patch sequences.

The global model reads one vector per patch and runs causally across
patches; its output at patch ``t - 1`` is projected to the local width and
added to the embeddings of patch ``t``'s previous cells, and the local model
then predicts the ``n_q`` cells of patch ``t`` causally.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import AcousticTokenGrid
from .errors import CapacityError, ConfigurationError, TrainingDivergedError, ValidationError
from .layers import Block, block_params, init_weights
from .seqlayout import LayoutConfig, UnifiedSequence

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    n_q: int = 3
    vocab_size: int = LayoutConfig().vocab_size
    embed_dim: int = 128
    global_layers: int = 4
    global_width: int = 256
    global_heads: int = 4
    global_ffn: int = 1024
    local_layers: int = 2
    local_width: int = 256
    local_heads: int = 4
    local_ffn: int = 1024
    max_patches: int = 2048
    cond_dim: int = 0  # width of continuous condition rows; 0 disables the projection

    def __post_init__(self):
        for w, h, name in ((self.global_width, self.global_heads, "global"),
                           (self.local_width, self.local_heads, "local")):
            if w % h:
                raise ConfigurationError(f"{name} width {w} not divisible by {h} heads")

    @classmethod
    def paper(cls, vocab_size: int | None = None) -> "ModelConfig":
        """Full-scale sizes (20 + 6 layers, width 1152). Built for counting, not trained here."""
        return cls(n_q=3, vocab_size=vocab_size or LayoutConfig().vocab_size, embed_dim=192,
                   global_layers=20, global_width=1152, global_heads=16, global_ffn=4608,
                   local_layers=6, local_width=1152, local_heads=8, local_ffn=4608, max_patches=4096)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(embed_dim=16, global_layers=1, global_width=16, global_heads=2, global_ffn=32,
                    local_layers=1, local_width=16, local_heads=2, local_ffn=32, max_patches=256)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def expected_param_count(c: ModelConfig) -> int:
    """Parameter count implied by the config, computed without building the model."""
    n = c.vocab_size * c.embed_dim                                  # global token table
    n += c.n_q * c.embed_dim * c.global_width + c.global_width      # patch projection
    n += c.max_patches * c.global_width                             # global positions
    n += c.global_layers * block_params(c.global_width, c.global_ffn)
    n += 2 * c.global_width                                         # final global LN
    if c.cond_dim:
        n += c.cond_dim * c.embed_dim + c.embed_dim                 # continuous projection
    n += c.global_width * c.local_width + c.local_width             # W
    n += c.vocab_size * c.local_width                               # local token table
    n += c.local_width + c.n_q * c.local_width                      # start + cell positions
    n += c.local_layers * block_params(c.local_width, c.local_ffn)
    n += 2 * c.local_width                                          # final local LN
    n += c.local_width * c.vocab_size + c.vocab_size                # output head
    return n


@dataclass
class Batch:
    ids: torch.Tensor         # (B, P, n_q)
    continuous: torch.Tensor  # (B, P)
    rows: torch.Tensor | None  # (B, P, cond_dim)
    loss_mask: torch.Tensor   # (B, P, n_q)
    lengths: torch.Tensor     # (B,)


def collate(seqs: Sequence[UnifiedSequence], layout: LayoutConfig, dtype=torch.float32) -> Batch:
    """Right-pad to a common length with PAD patches that carry no loss."""
    b, p = len(seqs), max(len(s) for s in seqs)
    ids = torch.full((b, p, layout.n_q), layout.pad, dtype=torch.long)
    cont = torch.zeros(b, p, dtype=torch.bool)
    mask = torch.zeros(b, p, layout.n_q, dtype=torch.bool)
    widths = {s.rows.shape[1] for s in seqs if s.rows is not None}
    rows = torch.zeros(b, p, widths.pop(), dtype=dtype) if widths else None
    for i, s in enumerate(seqs):
        n = len(s)
        ids[i, :n] = torch.from_numpy(s.ids)
        cont[i, :n] = torch.from_numpy(s.continuous)
        mask[i, :n] = torch.from_numpy(s.loss_mask)
        if s.rows is not None:
            rows[i, :n] = torch.from_numpy(s.rows).to(dtype)
    return Batch(ids, cont, rows, mask, torch.tensor([len(s) for s in seqs]))


class MultiScaleTransformer(nn.Module):
    def __init__(self, config: ModelConfig, layout: LayoutConfig | None = None):
        super().__init__()
        c = self.config = config
        self.layout = layout or LayoutConfig(n_q=c.n_q)
        if self.layout.n_q != c.n_q or self.layout.vocab_size != c.vocab_size:
            raise ConfigurationError("model config does not match the sequence layout")
        self.tok_emb = nn.Embedding(c.vocab_size, c.embed_dim)
        self.patch_proj = nn.Linear(c.n_q * c.embed_dim, c.global_width)
        self.global_pos = nn.Parameter(torch.zeros(c.max_patches, c.global_width))
        self.global_blocks = nn.ModuleList(Block(c.global_width, c.global_heads, c.global_ffn)
                                           for _ in range(c.global_layers))
        self.global_ln = nn.LayerNorm(c.global_width)
        self.cond_proj = nn.Linear(c.cond_dim, c.embed_dim) if c.cond_dim else None
        self.to_local = nn.Linear(c.global_width, c.local_width)
        self.local_emb = nn.Embedding(c.vocab_size, c.local_width)
        self.local_start = nn.Parameter(torch.zeros(c.local_width))
        self.local_pos = nn.Parameter(torch.zeros(c.n_q, c.local_width))
        self.local_blocks = nn.ModuleList(Block(c.local_width, c.local_heads, c.local_ffn)
                                          for _ in range(c.local_layers))
        self.local_ln = nn.LayerNorm(c.local_width)
        self.head = nn.Linear(c.local_width, c.vocab_size)
        init_weights(self)
        for p in (self.global_pos, self.local_start, self.local_pos):
            nn.init.normal_(p, std=0.02)

    # -- embeddings --------------------------------------------------------

    def project_condition(self, rows: torch.Tensor) -> torch.Tensor:
        if self.cond_proj is None:
            raise ConfigurationError("model was built without a continuous-condition projection")
        return self.cond_proj(rows)

    def embed_patches(self, ids, continuous=None, rows=None) -> torch.Tensor:
        """(B, P, n_q) ids (+ continuous rows) -> (B, P, global_width)."""
        e = self.tok_emb(ids)
        if continuous is not None and bool(continuous.any()):
            if rows is None:
                raise ValidationError("continuous patches present but no rows supplied")
            r = self.project_condition(rows)[:, :, None, :].expand_as(e)
            e = torch.where(continuous[:, :, None, None], r, e)
        return self.patch_proj(e.flatten(2))

    # -- the two levels ----------------------------------------------------

    def global_forward(self, patch_emb: torch.Tensor) -> torch.Tensor:
        """Causal pass over patches; output ``i`` is the context for predicting patch ``i + 1``."""
        p = patch_emb.shape[1]
        if p < 1:
            raise ValidationError("global model needs at least one patch")
        if p > self.config.max_patches:
            raise CapacityError(f"{p} patches exceed max_patches={self.config.max_patches}")
        h = patch_emb + self.global_pos[:p]
        for blk in self.global_blocks:
            h = blk(h, causal=True)
        return self.global_ln(h)

    def local_forward(self, context: torch.Tensor, cells: torch.Tensor) -> torch.Tensor:
        """context (N, global_width), cells (N, k<=n_q) -> logits (N, k+1 or n_q, V).

        Cell j's input is W·context plus the embedding of cell j-1 (a learned
        start vector for j = 0) plus a cell-position embedding.
        """
        n_q = self.config.n_q
        if cells.shape[1] > n_q:
            raise ValidationError(f"patch has {cells.shape[1]} cells, expected at most {n_q}")
        k = min(cells.shape[1] + 1, n_q)
        prev = self.local_emb(cells[:, : k - 1])
        start = self.local_start.expand(cells.shape[0], 1, -1)
        x = torch.cat([start, prev], dim=1) + self.local_pos[:k] + self.to_local(context)[:, None, :]
        for blk in self.local_blocks:
            x = blk(x, causal=True)
        return self.head(self.local_ln(x))

    # -- training ----------------------------------------------------------

    def target_logits(self, batch: Batch):
        """Logits and targets for every patch that carries loss."""
        emb = self.embed_patches(batch.ids, batch.continuous, batch.rows)
        ctx = self.global_forward(emb[:, :-1])               # predicts patches 1..P-1
        has_loss = batch.loss_mask[:, 1:].any(-1)             # (B, P-1)
        bi, ti = has_loss.nonzero(as_tuple=True)
        cells = batch.ids[:, 1:][bi, ti]                      # (N, n_q)
        logits = self.local_forward(ctx[bi, ti], cells)
        return logits, cells, batch.loss_mask[:, 1:][bi, ti]

    def loss(self, batch: Batch) -> torch.Tensor:
        if not bool(batch.loss_mask.any()):
            raise ValidationError("batch has no loss-bearing cells")
        logits, cells, mask = self.target_logits(batch)
        ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), cells.reshape(-1), reduction="none")
        m = mask.reshape(-1).to(ce.dtype)
        return (ce * m).sum() / m.sum()

    # -- persistence -------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        return save_checkpoint(path, "mstransformer",
                               {"model": self.config.to_dict(), "layout": self.layout.to_dict()},
                               self.state_dict(), extra)

    @classmethod
    def load(cls, path, what: str = "transformer") -> tuple["MultiScaleTransformer", dict]:
        ck = load_checkpoint(path, "mstransformer", what=what)
        m = cls(ModelConfig(**ck["config"]["model"]), LayoutConfig.from_dict(ck["config"]["layout"]))
        m.load_state_dict(ck["tensors"])
        return m.eval(), ck["extra"]


def num_parameters(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    warmup: int = 100
    grad_clip: float = 1.0
    log_every: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                            lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)


def train_step(model: MultiScaleTransformer, batch: Batch, optimizer: torch.optim.Optimizer,
               grad_clip: float = 1.0) -> float:
    model.train()
    loss = model.loss(batch)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss.item()} (batch {tuple(batch.ids.shape)}, "
            f"{int(batch.loss_mask.sum())} target cells)")
    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return loss.item()


def train_transformer(model: MultiScaleTransformer, sequences: Sequence[UnifiedSequence],
                      cfg: TrainConfig | None = None, seed: int = 0, log_path=None,
                      callback=None) -> list[dict]:
    """Mini-batch training with a deterministic shuffled order under ``seed``."""
    cfg = cfg or TrainConfig()
    if not sequences:
        raise ValidationError("no training sequences")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = make_optimizer(model, cfg)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(1, cfg.warmup)))
    order: list[int] = []
    rows = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(sequences)).tolist())
            idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
            batch = collate([sequences[i] for i in idx], model.layout)
            t0 = time.perf_counter()
            loss = train_step(model, batch, opt, cfg.grad_clip)
            dt = time.perf_counter() - t0
            lr = opt.param_groups[0]["lr"]
            sched.step()
            if step % cfg.log_every == 0 or step == cfg.steps:
                row = {"step": step, "loss": loss, "lr": lr,
                       "tokens_per_sec": round(float(batch.loss_mask.sum()) / max(dt, 1e-9), 1)}
                if callback is not None:
                    row.update(callback(step) or {})
                rows.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
    finally:
        if fh:
            fh.close()
    model.eval()
    return rows


@torch.no_grad()
def teacher_forced_accuracy(model: MultiScaleTransformer, sequences: Sequence[UnifiedSequence],
                            batch_size: int = 8) -> float:
    model.eval()
    hit = total = 0
    for i in range(0, len(sequences), batch_size):
        batch = collate(sequences[i: i + batch_size], model.layout)
        logits, cells, mask = model.target_logits(batch)
        pred = logits.argmax(-1)
        hit += int(((pred == cells) & mask).sum())
        total += int(mask.sum())
    return hit / max(total, 1)


# ---------------------------------------------------------------------------
# generation


def _sample(logits: torch.Tensor, allowed: torch.Tensor, top_k: int, temperature: float,
            gen: torch.Generator) -> int:
    logits = logits.masked_fill(~allowed, float("-inf"))
    if top_k == 1:
        return int(logits.argmax())
    scaled = logits / temperature
    k = min(top_k, int(allowed.sum()))
    vals, idx = scaled.topk(k)
    probs = torch.softmax(vals.double(), dim=-1)
    return int(idx[torch.multinomial(probs, 1, generator=gen)])


@torch.no_grad()
def generate(model: MultiScaleTransformer, prefix: UnifiedSequence, max_frames: int,
             top_k: int = 30, temperature: float = 0.8, seed: int = 0,
             min_frames: int = 0, stem: str | None = None) -> AcousticTokenGrid:
    """Autoregressive decoding patch by patch, cell by cell.

    Stops at an EOS patch or after ``max_frames``; EOS is only eligible at the
    first cell of a patch once ``min_frames`` frames exist.
    """
    model.eval()
    lay = model.layout
    n_q = lay.n_q
    if prefix.boundary != len(prefix):
        raise ValidationError("prefix must end at the target boundary")
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    gen = torch.Generator().manual_seed(seed)
    v = model.config.vocab_size
    audio = torch.zeros(v, dtype=torch.bool)
    audio[lay.audio_offset: lay.audio_offset + lay.n_audio] = True
    audio_or_eos = audio.clone()
    audio_or_eos[lay.eos] = True

    ids = torch.from_numpy(prefix.ids)[None]
    cont = torch.from_numpy(prefix.continuous)[None]
    rows = None if prefix.rows is None else torch.from_numpy(prefix.rows)[None]
    base = model.embed_patches(ids, cont, rows)              # (1, P0, Dg)
    frames: list[list[int]] = []
    while len(frames) < max_frames:
        ctx = model.global_forward(base)[0, -1:]
        cells: list[int] = []
        for k in range(n_q):
            logits = model.local_forward(ctx, torch.tensor([cells], dtype=torch.long).reshape(1, -1))[0, k]
            allowed = audio_or_eos if (k == 0 and len(frames) >= min_frames) else audio
            tok = _sample(logits, allowed, top_k, temperature, gen)
            if tok == lay.eos:
                break
            cells.append(tok)
        if len(cells) < n_q:
            break
        frames.append(cells)
        new = model.embed_patches(torch.tensor([[cells]], dtype=torch.long))
        base = torch.cat([base, new], dim=1)
    toks = np.asarray(frames, dtype=np.int64).reshape(-1, n_q) - lay.audio_offset
    return AcousticTokenGrid(toks, stem=stem, codebook_size=lay.n_audio)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)  # (param name, flat index, analytic, numeric, rel err)
    max_rel_error: float = 0.0
    max_abs_grad: float = 0.0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'parameter':40s} {'index':>6s} {'analytic':>14s} {'numeric':>14s} {'rel_err':>10s}"]
        for name, i, a, n, r in self.entries:
            lines.append(f"{name:40s} {i:6d} {a:14.6e} {n:14.6e} {r:10.2e}")
        lines.append(f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _random_sequences(layout: LayoutConfig, rng: np.random.Generator, n: int = 2,
                      cond_dim: int = 0) -> list[UnifiedSequence]:
    from .seqlayout import ConditionSequence, concat_blocks, expand_condition, pack_sequence

    seqs = []
    for _ in range(n):
        cond = expand_condition(ConditionSequence(
            "discrete", tokens=rng.integers(layout.phoneme_offset, layout.special_offset, 3)), layout.n_q)
        if cond_dim:
            rows = expand_condition(ConditionSequence("continuous", rows=rng.normal(size=(2, cond_dim))),
                                    layout.n_q, layout)
            cond = concat_blocks(rows, cond)
        grid = AcousticTokenGrid(rng.integers(0, layout.n_audio, (3, layout.n_q)))
        seqs.append(pack_sequence(cond, grid, layout))
    return seqs


def grad_check(config: ModelConfig | None = None, tolerance: float = 1e-4, n_checks: int = 50,
               step: float = 1e-5, seed: int = 0, zero_loss: bool = False,
               layout: LayoutConfig | None = None) -> GradCheckReport:
    """Autograd vs. central finite differences in float64 on randomly drawn parameter entries.

    Relative error is |a - n| / max(|a|, |n|, 1e-6); the floor keeps finite-difference
    round-off (~1e-11) on near-zero gradients from reading as a large relative error.
    """
    layout = layout or LayoutConfig(n_q=3, n_audio=16, n_phonemes=4, n_pitch=4)
    config = config or ModelConfig.tiny(n_q=layout.n_q, vocab_size=layout.vocab_size, embed_dim=8,
                                        global_width=8, local_width=8, global_ffn=16, local_ffn=16,
                                        cond_dim=4)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = MultiScaleTransformer(config, layout).double()
    seqs = _random_sequences(layout, rng, cond_dim=config.cond_dim)
    if zero_loss:
        # every target cell is audio token 1 and the head is saturated towards it
        for s in seqs:
            s.ids[s.boundary:-1] = 1
            s.loss_mask[-1] = False
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.fill_(-60.0)
            model.head.bias[1] = 60.0
    batch = collate(seqs, layout, dtype=torch.float64)

    model.zero_grad()
    model.loss(batch).backward()
    named = [(n, p) for n, p in model.named_parameters()]
    report = GradCheckReport(tolerance=tolerance)
    for _ in range(n_checks):
        name, p = named[rng.integers(len(named))]
        i = int(rng.integers(p.numel()))
        analytic = float(p.grad.reshape(-1)[i])
        flat = p.data.reshape(-1)
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + step
            up = float(model.loss(batch))
            flat[i] = orig - step
            down = float(model.loss(batch))
            flat[i] = orig
        numeric = (up - down) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        report.entries.append((name, i, analytic, numeric, rel))
        report.max_rel_error = max(report.max_rel_error, rel)
        report.max_abs_grad = max(report.max_abs_grad, abs(analytic), abs(numeric))
    return report
