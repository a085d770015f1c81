"""Unified patch sequences for the multi-scale transformer.

A sequence is a list of patches, each holding ``n_q`` cells. Layout:

    [BOS] + condition patches + [SEP] + target frames + [EOS]

Condition cells are either discrete ids or continuous rows (repeated across
the patch). Only target and EOS cells carry loss.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import AcousticTokenGrid
from .errors import ValidationError

LAYOUT_VERSION = 1


@dataclass(frozen=True)
class LayoutConfig:
    n_q: int = 3
    n_audio: int = 1024
    n_phonemes: int = 40
    n_pitch: int = 257  # 256 log-spaced buckets + unvoiced
    version: int = LAYOUT_VERSION

    @property
    def audio_offset(self) -> int:
        return 0

    @property
    def phoneme_offset(self) -> int:
        return self.n_audio

    @property
    def pitch_offset(self) -> int:
        return self.phoneme_offset + self.n_phonemes

    @property
    def special_offset(self) -> int:
        return self.pitch_offset + self.n_pitch

    @property
    def bos(self) -> int:
        return self.special_offset

    @property
    def sep(self) -> int:
        return self.special_offset + 1

    @property
    def eos(self) -> int:
        return self.special_offset + 2

    @property
    def pad(self) -> int:
        return self.special_offset + 3

    @property
    def cont(self) -> int:
        """Placeholder id stored in cells whose content is a continuous row."""
        return self.special_offset + 4

    @property
    def vocab_size(self) -> int:
        return self.special_offset + 5

    def ranges(self) -> dict:
        return {
            "audio": (self.audio_offset, self.audio_offset + self.n_audio),
            "phoneme": (self.phoneme_offset, self.phoneme_offset + self.n_phonemes),
            "pitch": (self.pitch_offset, self.pitch_offset + self.n_pitch),
            "special": (self.special_offset, self.vocab_size),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = self.ranges()
        d["specials"] = {"bos": self.bos, "sep": self.sep, "eos": self.eos, "pad": self.pad, "cont": self.cont}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutConfig":
        if d.get("version", LAYOUT_VERSION) != LAYOUT_VERSION:
            raise ValidationError(f"unsupported layout version {d.get('version')}")
        return cls(n_q=d["n_q"], n_audio=d["n_audio"], n_phonemes=d["n_phonemes"], n_pitch=d["n_pitch"])


@dataclass
class ConditionSequence:
    kind: str  # "discrete" | "continuous"
    tokens: np.ndarray | None = None
    rows: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "discrete":
            if self.tokens is None or self.rows is not None:
                raise ValidationError("discrete condition needs tokens and no rows")
            self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        elif self.kind == "continuous":
            if self.rows is None or self.tokens is not None:
                raise ValidationError("continuous condition needs rows and no tokens")
            self.rows = np.asarray(self.rows, dtype=np.float32)
            if self.rows.ndim != 2:
                raise ValidationError("continuous rows must be (L, width)")
        else:
            raise ValidationError(f"unknown condition kind {self.kind!r}")

    def __len__(self):
        return len(self.tokens) if self.kind == "discrete" else len(self.rows)


@dataclass
class PatchBlock:
    """A run of patches; ``rows`` is present iff some patch is continuous."""

    ids: np.ndarray                     # (L, n_q) int64
    continuous: np.ndarray              # (L,) bool
    rows: np.ndarray | None = None      # (L, width) float32

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class UnifiedSequence:
    ids: np.ndarray          # (P, n_q) int64
    continuous: np.ndarray   # (P,) bool
    rows: np.ndarray | None  # (P, width) float32 or None
    loss_mask: np.ndarray    # (P, n_q) bool
    boundary: int            # index of the first target patch

    def __len__(self):
        return self.ids.shape[0]

    def prefix(self) -> "UnifiedSequence":
        b = self.boundary
        return UnifiedSequence(self.ids[:b].copy(), self.continuous[:b].copy(),
                               None if self.rows is None else self.rows[:b].copy(),
                               np.zeros_like(self.loss_mask[:b]), b)


def expand_condition(c: ConditionSequence, n_q: int, layout: LayoutConfig | None = None) -> PatchBlock:
    """Repeat every condition element ``n_q`` times to fill one patch each."""
    if n_q < 1:
        raise ValidationError("n_q must be >= 1")
    n = len(c)
    if c.kind == "discrete":
        return PatchBlock(np.repeat(c.tokens[:, None], n_q, axis=1), np.zeros(n, bool))
    cont_id = (layout or LayoutConfig(n_q=n_q)).cont
    return PatchBlock(np.full((n, n_q), cont_id, np.int64), np.ones(n, bool), c.rows.copy())


def grid_patches(grid: AcousticTokenGrid, layout: LayoutConfig) -> PatchBlock:
    if grid.n_q != layout.n_q:
        raise ValidationError(f"grid has {grid.n_q} levels, layout expects {layout.n_q}")
    ids = grid.tokens.astype(np.int64) + layout.audio_offset
    return PatchBlock(ids, np.zeros(len(ids), bool))


def special_patch(token: int, n_q: int) -> PatchBlock:
    return PatchBlock(np.full((1, n_q), token, np.int64), np.zeros(1, bool))


def concat_blocks(*blocks: PatchBlock, n_q: int | None = None) -> PatchBlock:
    blocks = [b for b in blocks if b is not None]
    if not blocks:
        return PatchBlock(np.zeros((0, n_q or 1), np.int64), np.zeros(0, bool))
    widths = {b.rows.shape[1] for b in blocks if b.rows is not None}
    if len(widths) > 1:
        raise ValidationError(f"continuous rows of differing widths {sorted(widths)}")
    ids = np.concatenate([b.ids for b in blocks])
    cont = np.concatenate([b.continuous for b in blocks])
    rows = None
    if widths:
        w = widths.pop()
        rows = np.concatenate([b.rows if b.rows is not None else np.zeros((len(b), w), np.float32)
                               for b in blocks]).astype(np.float32)
    return PatchBlock(ids, cont, rows)


def pack_prefix(cond: PatchBlock, layout: LayoutConfig) -> UnifiedSequence:
    """[BOS] + condition + [SEP]; the generation starting point."""
    if len(cond) and cond.ids.shape[1] != layout.n_q:
        raise ValidationError(f"condition patches have {cond.ids.shape[1]} cells, layout expects {layout.n_q}")
    b = concat_blocks(special_patch(layout.bos, layout.n_q), cond, special_patch(layout.sep, layout.n_q))
    return UnifiedSequence(b.ids, b.continuous, b.rows, np.zeros(b.ids.shape, bool), len(b))


def pack_sequence(cond: PatchBlock, target: AcousticTokenGrid, layout: LayoutConfig) -> UnifiedSequence:
    if target.n_q != layout.n_q:
        raise ValidationError(f"target has {target.n_q} levels, layout expects {layout.n_q}")
    pre = pack_prefix(cond, layout)
    b = concat_blocks(PatchBlock(pre.ids, pre.continuous, pre.rows), grid_patches(target, layout),
                      special_patch(layout.eos, layout.n_q))
    mask = np.zeros(b.ids.shape, bool)
    mask[pre.boundary:] = True
    return UnifiedSequence(b.ids, b.continuous, b.rows, mask, pre.boundary)


def unpack_targets(u: UnifiedSequence, layout: LayoutConfig, stem: str | None = None) -> AcousticTokenGrid:
    """Recover the target grid from a packed sequence (condition and specials dropped)."""
    p = len(u)
    if not 1 <= u.boundary < p:
        raise ValidationError(f"boundary {u.boundary} outside sequence of {p} patches")
    if not np.all(u.ids[u.boundary - 1] == layout.sep):
        raise ValidationError("patch before the boundary is not a SEP patch")
    region = u.ids[u.boundary:]
    eos_rows = np.where(np.all(region == layout.eos, axis=1))[0]
    if len(eos_rows) == 0:
        raise ValidationError("no EOS patch after the boundary")
    frames = region[: eos_rows[0]] - layout.audio_offset
    if frames.size and (frames.min() < 0 or frames.max() >= layout.n_audio):
        raise ValidationError("non-audio id inside the target region")
    return AcousticTokenGrid(frames.reshape(-1, layout.n_q), stem=stem, codebook_size=layout.n_audio)
