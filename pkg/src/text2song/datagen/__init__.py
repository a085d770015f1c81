"""Synthetic corpus generation and the data-processing steps around it."""
from .captions import ALL_TAGS, TAXONOMY, generate_caption, validate_tags
from .corpus import CorpusConfig, CorpusManifest, build_corpus, check_manifest, split_counts
from .f0 import extract_f0
from .render import (N_PHONEMES, PHONEMES, NoteEvent, SongSpec, chord_progression, make_song_spec,
                     render_accompaniment, render_vocal)
from .segment import ClipPair, Segment, phrase_boundaries, plan_cuts, segment_by_phrase, segment_clips
