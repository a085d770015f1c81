"""Residual-vector-quantized audio codec.

One ``CodecModel`` per stem (vocal / accompaniment): a strided convolutional
encoder, a 12-level residual quantizer whose first ``n_q_used`` levels form the
acoustic tokens, and a unit-based decoder that looks the tokens up in the
codebooks and upsamples with transposed convolutions.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Waveform
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, TrainingDivergedError, ValidationError

log = logging.getLogger(__name__)

STEMS = ("vocal", "accompaniment")
TOKEN_MAGIC = b"MTOK"
TOKEN_VERSION = 1


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    latent_dim: int = 64
    n_q: int = 12
    codebook_size: int = 1024
    n_q_used: int = 3
    upsample_rates: tuple = (5, 4, 2, 2, 2, 2)
    upsample_kernel_sizes: tuple = (9, 8, 4, 4, 4, 4)
    encoder_channels: int = 8
    encoder_max_channels: int = 64
    decoder_channels: int = 64
    ema_decay: float = 0.99
    dead_after: int = 200
    commitment_weight: float = 0.25
    stft_sizes: tuple = (256, 512, 1024)
    # training
    segment: int = 8000
    batch_size: int = 4
    steps: int = 2000
    lr: float = 5e-4
    betas: tuple = (0.8, 0.99)
    eps: float = 1e-6
    eval_every: int = 100

    def __post_init__(self):
        self.upsample_rates = tuple(self.upsample_rates)
        self.upsample_kernel_sizes = tuple(self.upsample_kernel_sizes)
        self.stft_sizes = tuple(self.stft_sizes)
        self.betas = tuple(self.betas)
        if len(self.upsample_rates) != len(self.upsample_kernel_sizes):
            raise ConfigurationError("upsample rates and kernel sizes differ in length")
        for s, k in zip(self.upsample_rates, self.upsample_kernel_sizes):
            if k < s or (k - s) % 2:
                raise ConfigurationError(f"kernel {k} incompatible with stride {s}")
        if not 0 < self.n_q_used <= self.n_q:
            raise ConfigurationError("n_q_used must be in [1, n_q]")

    @property
    def hop(self) -> int:
        return math.prod(self.upsample_rates)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AcousticTokenGrid:
    tokens: np.ndarray
    frame_rate: float = 50.0
    stem: str | None = None
    codebook_size: int = 1024

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2:
            raise ValidationError(f"token grid must be 2-D (T, n_q), got {t.shape}")
        t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.codebook_size):
            raise ValidationError(f"tokens outside [0, {self.codebook_size})")
        self.tokens = t

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_q(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other):
        return isinstance(other, AcousticTokenGrid) and np.array_equal(self.tokens, other.tokens)


def save_tokens(path, grid: AcousticTokenGrid) -> None:
    t, n = grid.tokens.shape
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC + struct.pack("<III", TOKEN_VERSION, t, n))
        f.write(grid.tokens.astype("<u2").tobytes(order="C"))


def load_tokens(path, frame_rate: float = 50.0, stem: str | None = None) -> AcousticTokenGrid:
    data = Path(path).read_bytes()
    if data[:4] != TOKEN_MAGIC:
        raise ValidationError(f"{path}: bad magic {data[:4]!r}")
    version, t, n = struct.unpack("<III", data[4:16])
    if version != TOKEN_VERSION:
        raise ValidationError(f"{path}: unsupported token file version {version}")
    body = np.frombuffer(data[16:], dtype="<u2")
    if body.size != t * n:
        raise ValidationError(f"{path}: expected {t * n} tokens, found {body.size}")
    return AcousticTokenGrid(body.reshape(t, n).astype(np.int64), frame_rate=frame_rate, stem=stem)


# ---------------------------------------------------------------------------
# residual vector quantization


class RVQResult(NamedTuple):
    tokens: np.ndarray          # (T, n_levels)
    quantized: np.ndarray       # (T, d), sum of chosen entries
    residual_norms: np.ndarray  # (T, n_levels), norm after each level
    residual: np.ndarray        # (T, d), what is left after the last level


def _nearest(residual: torch.Tensor, codebook: torch.Tensor, shortlist: int = 8) -> torch.Tensor:
    """Index of the nearest entry by squared distance; ties go to the lowest index.

    Large codebooks are shortlisted with the matmul expansion, then every
    candidate (plus the zero entry) is rescored exactly as sum((r - e)**2).
    """
    k = codebook.shape[0]
    if k <= shortlist:
        cand = torch.arange(k).expand(residual.shape[0], k)
    else:
        approx = (codebook * codebook).sum(-1)[None, :] - 2.0 * residual @ codebook.T
        top = approx.topk(shortlist, dim=1, largest=False).indices
        cand = torch.cat([torch.zeros_like(top[:, :1]), top], dim=1)
        cand = cand.sort(dim=1).values
    d2 = ((residual[:, None, :] - codebook[cand]) ** 2).sum(-1)
    pick = d2.argmin(dim=1)  # first minimum: candidates are sorted, so lowest id wins
    return cand.gather(1, pick[:, None]).squeeze(1)


def _quantize_torch(latents: torch.Tensor, codebooks: torch.Tensor, n_levels: int):
    residual = latents
    quantized = torch.zeros_like(latents)
    tokens, norms, residuals = [], [], []
    for level in range(n_levels):
        idx = _nearest(residual, codebooks[level])
        chosen = codebooks[level][idx]
        residuals.append(residual)
        residual = residual - chosen
        quantized = quantized + chosen
        tokens.append(idx)
        norms.append(residual.norm(dim=-1))
    return tokens, quantized, norms, residual, residuals


def rvq_quantize(latents, codebooks, n_levels: int) -> RVQResult:
    lat = torch.as_tensor(np.asarray(latents))
    cb = torch.as_tensor(np.asarray(codebooks), dtype=lat.dtype)
    if n_levels > cb.shape[0]:
        raise ValidationError(f"n_levels={n_levels} exceeds {cb.shape[0]} codebooks")
    if n_levels < 0:
        raise ValidationError("n_levels must be non-negative")
    t = lat.shape[0]
    if n_levels == 0:
        return RVQResult(np.zeros((t, 0), np.int64), np.zeros_like(lat.numpy()),
                         np.zeros((t, 0), lat.numpy().dtype), lat.numpy().copy())
    with torch.no_grad():
        tokens, quantized, norms, residual, _ = _quantize_torch(lat, cb, n_levels)
    return RVQResult(torch.stack(tokens, 1).numpy(), quantized.numpy(),
                     torch.stack(norms, 1).numpy(), residual.numpy())


def rvq_dequantize(grid, codebooks) -> np.ndarray:
    tokens = grid.tokens if isinstance(grid, AcousticTokenGrid) else np.asarray(grid, dtype=np.int64)
    cb = np.asarray(codebooks)
    if tokens.ndim != 2:
        raise ValidationError("tokens must be (T, n_levels)")
    if tokens.shape[1] > cb.shape[0]:
        raise ValidationError("more token levels than codebooks")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cb.shape[1]):
        raise ValidationError(f"token outside codebook range [0, {cb.shape[1]})")
    out = np.zeros((tokens.shape[0], cb.shape[2]), dtype=cb.dtype)
    for level in range(tokens.shape[1]):
        out = out + cb[level][tokens[:, level]]
    return out


class ResidualVQ(nn.Module):
    """Codebooks with EMA learning; entry 0 of every level is pinned to zero."""

    def __init__(self, n_q: int, size: int, dim: int, decay: float = 0.99, dead_after: int = 200):
        super().__init__()
        self.n_q, self.size, self.dim = n_q, size, dim
        self.decay, self.dead_after = decay, dead_after
        self.register_buffer("codebooks", torch.zeros(n_q, size, dim))
        self.register_buffer("cluster_size", torch.ones(n_q, size))
        self.register_buffer("embed_sum", torch.zeros(n_q, size, dim))
        self.register_buffer("unused_steps", torch.zeros(n_q, size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @torch.no_grad()
    def _init_from(self, flat: torch.Tensor, generator: torch.Generator):
        residual = flat
        for level in range(self.n_q):
            pick = torch.randint(0, residual.shape[0], (self.size - 1,), generator=generator)
            self.codebooks[level, 1:] = residual[pick] + 1e-3 * torch.randn(
                self.size - 1, self.dim, generator=generator)
            self.codebooks[level, 0] = 0.0
            self.embed_sum[level] = self.codebooks[level]
            residual = residual - self.codebooks[level][_nearest(residual, self.codebooks[level])]
        self.initialized.fill_(True)

    @torch.no_grad()
    def _ema_update(self, level: int, residual: torch.Tensor, idx: torch.Tensor, generator: torch.Generator):
        onehot = F.one_hot(idx, self.size).to(residual.dtype)
        counts = onehot.sum(0)
        sums = onehot.T @ residual
        d = self.decay
        self.cluster_size[level].mul_(d).add_(counts, alpha=1 - d)
        self.embed_sum[level].mul_(d).add_(sums, alpha=1 - d)
        n = self.cluster_size[level].sum()
        smoothed = (self.cluster_size[level] + 1e-5) / (n + self.size * 1e-5) * n
        self.codebooks[level] = self.embed_sum[level] / smoothed[:, None]
        used = counts > 0
        self.unused_steps[level][used] = 0
        self.unused_steps[level][~used] += 1
        dead = (self.unused_steps[level] > self.dead_after).nonzero().flatten()
        dead = dead[dead != 0]
        if len(dead):
            pick = torch.randint(0, residual.shape[0], (len(dead),), generator=generator)
            self.codebooks[level, dead] = residual[pick]
            self.embed_sum[level, dead] = residual[pick]
            self.cluster_size[level, dead] = 1.0
            self.unused_steps[level, dead] = 0
        self.codebooks[level, 0] = 0.0
        self.embed_sum[level, 0] = 0.0

    def forward(self, flat: torch.Tensor, n_active: int, generator: torch.Generator | None = None):
        """Quantize all levels (learning codebooks in training mode); return the sum of the first n_active."""
        if self.training and not bool(self.initialized):
            self._init_from(flat.detach(), generator)
        tokens, _, _, _, residuals = _quantize_torch(flat.detach(), self.codebooks, self.n_q)
        active = torch.zeros_like(flat)
        for level in range(n_active):
            active = active + self.codebooks[level][tokens[level]]
        if self.training:
            for level in range(self.n_q):
                self._ema_update(level, residuals[level], tokens[level], generator)
        return active, torch.stack(tokens, 1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, dilations=(1, 3), padding_mode: str = "zeros"):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, 3, dilation=d, padding=d, padding_mode=padding_mode)
            for d in dilations
        )

    def forward(self, x):
        for conv in self.convs:
            x = x + conv(F.leaky_relu(x, 0.1))
        return x


class Encoder(nn.Module):
    # replicate padding keeps a constant input constant at the borders
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        pm = "replicate"
        c = cfg.encoder_channels
        layers = [nn.Conv1d(1, c, 7, padding=3, padding_mode=pm)]
        for s, k in zip(reversed(cfg.upsample_rates), reversed(cfg.upsample_kernel_sizes)):
            c_out = min(2 * c, cfg.encoder_max_channels)
            layers += [ResBlock(c, padding_mode=pm), nn.ELU(),
                       nn.Conv1d(c, c_out, k, stride=s, padding=(k - s) // 2, padding_mode=pm)]
            c = c_out
        layers += [nn.ELU(), nn.Conv1d(c, cfg.latent_dim, 3, padding=1, padding_mode=pm)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, N) -> (B, d, T)
        return self.net(x[:, None, :])


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c = cfg.decoder_channels
        layers = [nn.Conv1d(cfg.latent_dim, c, 7, padding=3)]
        for s, k in zip(cfg.upsample_rates, cfg.upsample_kernel_sizes):
            c_out = max(c // 2, 8)
            layers += [nn.LeakyReLU(0.1),
                       nn.ConvTranspose1d(c, c_out, k, stride=s, padding=(k - s) // 2),
                       ResBlock(c_out)]
            c = c_out
        layers += [nn.LeakyReLU(0.1), nn.Conv1d(c, 1, 7, padding=3)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):  # (B, d, T) -> (B, T * hop)
        return self.net(z)[:, 0, :]


class CodecModel(nn.Module):
    def __init__(self, config: CodecConfig | None = None, stem_kind: str = "vocal"):
        super().__init__()
        if stem_kind not in STEMS:
            raise ConfigurationError(f"unknown stem kind {stem_kind!r}")
        self.config = config or CodecConfig()
        self.stem_kind = stem_kind
        self.encoder = Encoder(self.config)
        self.quantizer = ResidualVQ(self.config.n_q, self.config.codebook_size, self.config.latent_dim,
                                    self.config.ema_decay, self.config.dead_after)
        self.decoder = Decoder(self.config)

    @property
    def codebooks(self) -> np.ndarray:
        return self.quantizer.codebooks.detach().cpu().numpy()

    def save(self, path, extra: dict | None = None):
        return save_checkpoint(path, "codec", {"codec": self.config.to_dict(), "stem_kind": self.stem_kind},
                               self.state_dict(), extra)

    @classmethod
    def load(cls, path, stem_kind: str | None = None) -> "CodecModel":
        ck = load_checkpoint(path, "codec", what=f"{stem_kind or ''} codec".strip())
        m = cls(CodecConfig(**ck["config"]["codec"]), ck["config"]["stem_kind"])
        if stem_kind is not None and m.stem_kind != stem_kind:
            raise ConfigurationError(f"{path} is a {m.stem_kind} codec, expected {stem_kind}")
        m.load_state_dict(ck["tensors"])
        return m.eval()


def _check_rate(w: Waveform, m: CodecModel):
    if w.sample_rate != m.config.sample_rate:
        raise ConfigurationError(f"waveform at {w.sample_rate} Hz, codec expects {m.config.sample_rate} Hz")


@torch.no_grad()
def encode_latents(w: Waveform, m: CodecModel) -> np.ndarray:
    """Latent frames (T, d) with T = floor(len(w) / hop)."""
    _check_rate(w, m)
    hop = m.config.hop
    t = len(w) // hop
    if t == 0:
        return np.zeros((0, m.config.latent_dim), np.float32)
    x = torch.from_numpy(w.samples[: t * hop].copy())[None]
    return m.encoder(x)[0].T.contiguous().numpy()


def encode(w: Waveform, m: CodecModel) -> AcousticTokenGrid:
    """Waveform -> acoustic token grid over the first n_q_used levels."""
    res = rvq_quantize(encode_latents(w, m), m.codebooks, m.config.n_q_used)
    return AcousticTokenGrid(res.tokens, m.config.frame_rate, m.stem_kind, m.config.codebook_size)


@torch.no_grad()
def decode_latents(latents: np.ndarray, m: CodecModel) -> np.ndarray:
    if latents.shape[0] == 0:
        return np.zeros(0, np.float32)
    z = torch.as_tensor(latents, dtype=torch.float32).T[None]
    return m.decoder(z)[0].numpy()


def vocode(grid: AcousticTokenGrid, m: CodecModel, n_levels: int | None = None) -> Waveform:
    """Token grid -> waveform of T * hop samples, hard-clamped to [-1, 1]."""
    if grid.stem is not None and grid.stem != m.stem_kind:
        raise ConfigurationError(f"{grid.stem} tokens cannot be vocoded by the {m.stem_kind} codec")
    tokens = grid.tokens if n_levels is None else grid.tokens[:, :n_levels]
    y = decode_latents(rvq_dequantize(tokens, m.codebooks), m)
    return Waveform(np.clip(y, -1.0, 1.0), m.config.sample_rate)


def resynthesize(w: Waveform, m: CodecModel, n_levels: int | None = None) -> Waveform:
    grid = encode(w, m)
    return vocode(grid, m, n_levels)


# ---------------------------------------------------------------------------
# training


def multiscale_spectral_loss(y_hat: torch.Tensor, y: torch.Tensor, sizes=(256, 512, 1024)) -> torch.Tensor:
    loss = y.new_zeros(())
    for n in sizes:
        win = torch.hann_window(n, dtype=y.dtype)
        s = torch.stft(y, n, n // 4, window=win, return_complex=True).abs()
        s_hat = torch.stft(y_hat, n, n // 4, window=win, return_complex=True).abs()
        sc = torch.linalg.norm(s - s_hat) / (torch.linalg.norm(s) + 1e-7)
        mag = (torch.log(s + 1e-5) - torch.log(s_hat + 1e-5)).abs().mean()
        loss = loss + sc + mag
    return loss / len(sizes)


@dataclass
class StemClip:
    stem: str
    wave: Waveform


@torch.no_grad()
def reconstruction_error(m: CodecModel, waves: Sequence[Waveform], n_levels: int | None = None) -> float:
    """Mean multi-scale spectral loss of vocode(encode(w)) against w."""
    n_levels = n_levels or m.config.n_q_used
    errs = []
    for w in waves:
        t = len(w) // m.config.hop
        if t == 0:
            continue
        lat = encode_latents(w, m)
        q = rvq_quantize(lat, m.codebooks, n_levels).quantized
        y_hat = torch.from_numpy(decode_latents(q, m))
        y = torch.from_numpy(w.samples[: t * m.config.hop].copy())
        errs.append(float(multiscale_spectral_loss(y_hat, y, m.config.stft_sizes)))
    return float(np.mean(errs))


def _segments(waves, seg, batch, rng):
    out = np.zeros((batch, seg), np.float32)
    for b in range(batch):
        w = waves[rng.integers(len(waves))].samples
        if len(w) <= seg:
            out[b, : len(w)] = w
        else:
            start = rng.integers(0, len(w) - seg + 1)
            out[b] = w[start: start + seg]
    return torch.from_numpy(out)


def train_codec(clips: Sequence[StemClip], stem_kind: str, config: CodecConfig | None = None,
                seed: int = 0, steps: int | None = None, log_path=None,
                heldout: Sequence[Waveform] | None = None) -> tuple[CodecModel, list[dict]]:
    """Train one stem's codec with spectral reconstruction + commitment loss.

    Returns the model (in eval mode) and the per-step log rows.
    """
    config = config or CodecConfig()
    steps = config.steps if steps is None else steps
    if not clips:
        raise ValidationError("codec corpus is empty")
    kinds = {c.stem for c in clips}
    if kinds != {stem_kind}:
        raise ValidationError(f"codec corpus for {stem_kind!r} contains stems {sorted(kinds)}")
    waves = [c.wave for c in clips]
    for w in waves:
        if w.sample_rate != config.sample_rate:
            raise ValidationError(f"clip at {w.sample_rate} Hz, codec expects {config.sample_rate} Hz")
    seg = max(config.hop, (config.segment // config.hop) * config.hop)

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    m = CodecModel(config, stem_kind)
    m.train()
    opt = torch.optim.Adam(m.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    rows: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    t0 = time.time()
    try:
        for step in range(1, steps + 1):
            ts = time.perf_counter()
            x = _segments(waves, seg, config.batch_size, rng)
            z = m.encoder(x)                          # (B, d, T)
            flat = z.permute(0, 2, 1).reshape(-1, config.latent_dim)
            n_active = int(rng.integers(1, config.n_q_used + 1))
            q, _ = m.quantizer(flat, n_active, gen)
            commit = F.mse_loss(flat, q.detach())
            zq = flat + (q - flat).detach()
            zq = zq.reshape(z.shape[0], z.shape[2], -1).permute(0, 2, 1)
            y_hat = m.decoder(zq)
            recon = multiscale_spectral_loss(y_hat, x, config.stft_sizes)
            loss = recon + config.commitment_weight * commit
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"codec loss became {float(loss)} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            frames = config.batch_size * (seg // config.hop)
            row = {"step": step, "loss": loss.item(), "recon": recon.item(), "commit": commit.item(),
                   "n_active": n_active, "lr": config.lr,
                   "tokens_per_sec": round(frames / max(time.perf_counter() - ts, 1e-9), 1),
                   "elapsed": round(time.time() - t0, 3)}
            if heldout and (step % config.eval_every == 0 or step == steps):
                m.eval()
                row["heldout_recon"] = reconstruction_error(m, heldout)
                m.train()
            rows.append(row)
            if fh:
                fh.write(json.dumps(row) + "\n")
    finally:
        if fh:
            fh.close()
    m.eval()
    return m, rows
