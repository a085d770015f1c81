"""Command-line entry point: corpus synthesis, training, generation and evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .errors import MissingPrerequisiteError, Text2SongError, ValidationError
from .config import resolve_config, write_config

log = logging.getLogger("text2song")

MODEL_FILE = "model.pt"
METRICS_FILE = "metrics.jsonl"


# ---------------------------------------------------------------------------
# helpers

def _prepare_out(out: str, force: bool, owned=("manifest.jsonl", "audio", "scores", "config.json")) -> Path:
    p = Path(out)
    if p.exists() and any(p.iterdir()):
        if not force:
            raise ValidationError(f"output directory {p} is not empty (use --force to overwrite)")
        for name in owned:
            q = p / name
            if q.is_dir():
                shutil.rmtree(q)
            elif q.exists():
                q.unlink()
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require(path: str, what: str) -> Path:
    if not path:
        raise MissingPrerequisiteError(f"missing {what}: no path given")
    p = Path(path)
    if not p.exists():
        raise MissingPrerequisiteError(f"missing {what}: {p} does not exist")
    return p


def _model_path(path: str, what: str) -> Path:
    p = _require(path, what)
    return p / MODEL_FILE if p.is_dir() else p


def _corpus(cfg):
    from .datagen import CorpusManifest
    return CorpusManifest.load(_require(cfg["paths"]["corpus"], "corpus"))


def _train_rows(manifest, overfit: int, need_accomp: bool = False):
    rows = [r for r in manifest.split("train").rows if not need_accomp or r.get("accomp_wav")]
    if overfit:
        rows = rows[:overfit]
    if not rows:
        raise ValidationError("no usable training rows in the corpus")
    return rows


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands

def cmd_data_synth(cfg) -> int:
    from .datagen import CorpusConfig, build_corpus
    d = cfg["data"]
    out = _prepare_out(cfg["run"]["out"], cfg["run"]["force"])
    ccfg = CorpusConfig(song_seconds=d["song_seconds"], seg_min=d["seg_min"], seg_max=d["seg_max"],
                        n_svs_extra=d["n_svs_extra"], exclude_svs_extra=d["exclude_svs_extra"],
                        exclude_song_data=d["exclude_song_data"], workers=d["workers"])
    m = build_corpus(d["songs"], out, ccfg, seed=cfg["run"]["seed"])
    write_config(out, cfg)
    _print(m.summary())
    return 0


def cmd_train_codec(cfg) -> int:
    from .codec import CodecConfig, StemClip, train_codec
    c = cfg["codec"]
    stem = c["stem"]
    if stem not in ("vocal", "accompaniment"):
        raise ValidationError(f"codec stem must be vocal or accompaniment, got {stem!r}")
    m = _corpus(cfg)
    rows = _train_rows(m, 0, need_accomp=stem == "accompaniment")
    clips = [StemClip(stem, m.vocal(r) if stem == "vocal" else m.accomp(r)) for r in rows]
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, cfg)
    ccfg = CodecConfig(lr=c["lr"], batch_size=c["batch_size"], segment=c["segment"], steps=c["steps"])
    model, log_rows = train_codec(clips, stem, ccfg, seed=cfg["run"]["seed"], log_path=out / METRICS_FILE)
    model.save(out / MODEL_FILE)
    _print({"checkpoint": str(out / MODEL_FILE), "final_loss": log_rows[-1]["loss"]})
    return 0


def cmd_train_tritower(cfg) -> int:
    from .tritower import ContrastiveConfig, embed_triplets, train_tritower, triplets_from_manifest, write_embedding_dump
    t = cfg["tritower"]
    m = _corpus(cfg)
    train = triplets_from_manifest(m, _train_rows(m, 0, need_accomp=True))
    held_rows = [r for r in m.rows if r["split"] != "train" and r.get("accomp_wav")]
    held = triplets_from_manifest(m, held_rows) if held_rows else train
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, cfg)
    ccfg = ContrastiveConfig(tau=t["tau"], batch_size=t["batch_size"], steps=t["steps"], lr=t["lr"],
                             text_aug=t["text_aug"], spec_aug=t["spec_aug"], p_text_aug=t["p_text_aug"],
                             crop_min=t["crop_min"])
    model, log_rows = train_tritower(train, ccfg, seed=cfg["run"]["seed"], log_path=out / METRICS_FILE)
    model.save(out / MODEL_FILE)
    write_embedding_dump(out / "embeddings.jsonl", [x.id for x in held], embed_triplets(model, held))
    _print({"checkpoint": str(out / MODEL_FILE), "final_loss": log_rows[-1]["loss"],
            "embeddings": str(out / "embeddings.jsonl")})
    return 0


def _train_stage(cfg, section: str, sequences, cond_dim: int, layout) -> int:
    from .mstransformer import MultiScaleTransformer, TrainConfig, teacher_forced_accuracy, train_transformer
    from .pipeline import stage_model_config
    s = cfg[section]
    longest = max(len(q) for q in sequences)
    if longest > s["max_patches"]:
        raise ValidationError(f"{section}: longest sequence has {longest} patches, max_patches is {s['max_patches']}")
    model = MultiScaleTransformer(stage_model_config(layout, s["max_patches"], cond_dim), layout)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, cfg)
    tcfg = TrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"], warmup=s["warmup"])
    rows = train_transformer(model, sequences, tcfg, seed=cfg["run"]["seed"], log_path=out / METRICS_FILE)
    acc = teacher_forced_accuracy(model, sequences)
    with open(out / METRICS_FILE, "a") as f:
        f.write(json.dumps({"step": tcfg.steps, "teacher_forced_accuracy": acc}) + "\n")
    model.save(out / MODEL_FILE, {"stage": section})
    if not np.isfinite(rows[-1]["loss"]):
        raise Text2SongError(f"{section}: final loss is not finite")
    _print({"checkpoint": str(out / MODEL_FILE), "final_loss": rows[-1]["loss"], "teacher_forced_accuracy": acc})
    return 0


def cmd_train_svs(cfg) -> int:
    from .codec import CodecModel
    from .pipeline import svs_training_sequences
    from .seqlayout import LayoutConfig
    codec = CodecModel.load(_model_path(cfg["paths"]["vocal_codec"], "vocal codec"), "vocal")
    m = _corpus(cfg)
    layout = LayoutConfig(n_q=codec.config.n_q_used, n_audio=codec.config.codebook_size)
    seqs = svs_training_sequences(m, _train_rows(m, cfg["svs"]["overfit"]), codec, layout)
    return _train_stage(cfg, "svs", seqs, 0, layout)


def cmd_train_v2a(cfg) -> int:
    from .codec import CodecModel
    from .pipeline import v2a_training_sequences
    from .seqlayout import LayoutConfig
    from .tritower import FrozenTextEncoder
    enc = FrozenTextEncoder.load(_model_path(cfg["paths"]["tritower"], "text encoder (tri-tower checkpoint)"))
    vc = CodecModel.load(_model_path(cfg["paths"]["vocal_codec"], "vocal codec"), "vocal")
    ac = CodecModel.load(_model_path(cfg["paths"]["accomp_codec"], "accompaniment codec"), "accompaniment")
    m = _corpus(cfg)
    layout = LayoutConfig(n_q=vc.config.n_q_used, n_audio=vc.config.codebook_size)
    rows = _train_rows(m, cfg["v2a"]["overfit"], need_accomp=True)
    seqs = v2a_training_sequences(m, rows, vc, ac, enc, layout)
    return _train_stage(cfg, "v2a", seqs, enc.width, layout)


def cmd_generate(cfg, score_path: str) -> int:
    from .audio import write_wav
    from .pipeline import StageModels, text_to_song
    from .score import MusicScore
    g, p = cfg["generate"], cfg["paths"]
    score = MusicScore.load(_require(score_path, "score file"))
    if not g["prompt"].strip():
        raise ValidationError("a non-empty --prompt is required")
    models = StageModels.load(_model_path(p["svs"], "svs transformer"), _model_path(p["v2a"], "v2a transformer"),
                              _model_path(p["vocal_codec"], "vocal codec"),
                              _model_path(p["accomp_codec"], "accompaniment codec"),
                              _model_path(p["tritower"], "text encoder (tri-tower checkpoint)"))
    song = text_to_song(score, g["prompt"], models, seed=cfg["run"]["seed"], top_k=g["top_k"],
                        temperature=g["temperature"], stage1_top_k=g["stage1_top_k"], normalize=g["normalize"])
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, cfg)
    write_wav(out / "vocal.wav", song.vocal)
    write_wav(out / "accompaniment.wav", song.accompaniment)
    write_wav(out / "mix.wav", song.mix)
    report = {
        "prompt": song.prompt, "top_k": g["top_k"], "temperature": g["temperature"],
        "stage1_top_k": g["stage1_top_k"], "seeds": song.seeds, "frames": song.vocal_tokens.n_frames,
        "samples": len(song.mix), "timings": song.timings,
        "models": {k: {"path": models.paths[k], "sha256": h} for k, h in models.hashes().items()},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _print({"out": str(out), "frames": report["frames"]})
    return 0


def cmd_eval_retrieval(cfg, embeddings: str) -> int:
    from .evalkit import metric_report, retrieval_metrics, write_reports
    from .tritower import read_embedding_dump
    dump = read_embedding_dump(_require(embeddings, "embedding dump"))
    missing = {"p", "v", "a"} - set(dump)
    if missing:
        raise ValidationError(f"embedding dump lacks modalities {sorted(missing)}")
    ids_p, zp = dump["p"]
    reports = []
    for direction, mod in (("text_to_vocal", "v"), ("text_to_accompaniment", "a")):
        ids_c, zc = dump[mod]
        res = retrieval_metrics(ids_p, zp, ids_c, zc, ks=(1, 5, 10))
        for name, value in res.items():
            reports.append(metric_report(f"{direction}/{name}", value, len(ids_p), {"pool": len(ids_c)}))
    out = Path(cfg["run"]["out"])
    write_config(out, cfg)
    write_reports(out / "report.json", reports)
    _print(reports)
    return 0


def _f0_track(path: str):
    from .audio import read_wav
    from .datagen import extract_f0
    from .score import MusicScore
    p = _require(path, "F0 input")
    if p.suffix == ".json":
        return MusicScore.load(p).f0
    return extract_f0(read_wav(p))


def cmd_eval_ffe(cfg, ref: str, hyp: str) -> int:
    from .evalkit import ffe, metric_report, write_reports
    a, b = _f0_track(ref), _f0_track(hyp)
    rep = [metric_report("ffe", ffe(a, b), len(a), {"ref": ref, "hyp": hyp})]
    out = Path(cfg["run"]["out"])
    write_config(out, cfg)
    write_reports(out / "report.json", rep)
    _print(rep)
    return 0


def cmd_eval_melody(cfg, vocal: str, accomp: str) -> int:
    from .audio import read_wav
    from .evalkit import melody_alignment, metric_report, write_reports
    v, a = read_wav(_require(vocal, "vocal wav")), read_wav(_require(accomp, "accompaniment wav"))
    rep = [metric_report("melody_alignment", melody_alignment(v, a), 1, {"vocal": vocal, "accomp": accomp})]
    out = Path(cfg["run"]["out"])
    write_config(out, cfg)
    write_reports(out / "report.json", rep)
    _print(rep)
    return 0


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser, steps_section: str | None = None):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", default=None)
    if steps_section:
        p.add_argument("--steps", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _paths(p: argparse.ArgumentParser, *names):
    for n in names:
        p.add_argument(f"--{n.replace('_', '-')}", dest=f"path_{n}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="text2song", description="Two-stage text-to-song synthesis toolkit.")
    sub = ap.add_subparsers(dest="group", required=True)

    data = sub.add_parser("data", help="corpus generation").add_subparsers(dest="cmd", required=True)
    p = data.add_parser("synth", help="render a synthetic paired-stem corpus")
    _common(p)
    p.add_argument("--songs", type=int)
    p.add_argument("--song-seconds", type=float)
    p.add_argument("--svs-extra", type=int)
    p.add_argument("--exclude-svs-extra", action="store_true", default=None)
    p.add_argument("--exclude-song-data", action="store_true", default=None)

    train = sub.add_parser("train", help="training jobs").add_subparsers(dest="cmd", required=True)
    p = train.add_parser("codec", help="train one stem's codec")
    _common(p, "codec")
    p.add_argument("--stem", choices=("vocal", "accompaniment"))
    _paths(p, "corpus")
    p = train.add_parser("tritower", help="tri-tower contrastive pretraining")
    _common(p, "tritower")
    p.add_argument("--no-text-aug", action="store_true", default=None)
    p.add_argument("--no-spec-aug", action="store_true", default=None)
    _paths(p, "corpus")
    p = train.add_parser("svs", help="stage 1: score -> vocal tokens")
    _common(p, "svs")
    p.add_argument("--overfit", type=int, help="train on only the first N training rows")
    _paths(p, "corpus", "vocal_codec")
    p = train.add_parser("v2a", help="stage 2: vocal tokens + prompt -> accompaniment tokens")
    _common(p, "v2a")
    p.add_argument("--overfit", type=int)
    _paths(p, "corpus", "vocal_codec", "accomp_codec", "tritower")

    p = sub.add_parser("generate", help="synthesize a song from a score and a prompt")
    _common(p)
    p.add_argument("--score", required=True)
    p.add_argument("--prompt")
    p.add_argument("--top-k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--stage1-top-k", type=int)
    _paths(p, "svs", "v2a", "vocal_codec", "accomp_codec", "tritower")

    ev = sub.add_parser("eval", help="objective metrics").add_subparsers(dest="cmd", required=True)
    p = ev.add_parser("retrieval", help="text->vocal and text->accompaniment retrieval")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p = ev.add_parser("ffe", help="F0 frame error between two wavs or scores")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p = ev.add_parser("melody", help="chroma-envelope alignment of two stems")
    _common(p)
    p.add_argument("--vocal", required=True)
    p.add_argument("--accomp", required=True)
    return ap


def flags_from_args(a: argparse.Namespace) -> dict:
    f: dict = {s: {} for s in ("run", "data", "codec", "tritower", "svs", "v2a", "generate", "paths")}
    f["run"] = {"seed": a.seed, "out": a.out, "force": a.force}
    g = getattr
    if a.group == "data":
        f["data"] = {"songs": g(a, "songs", None), "song_seconds": g(a, "song_seconds", None),
                     "n_svs_extra": g(a, "svs_extra", None), "exclude_svs_extra": g(a, "exclude_svs_extra", None),
                     "exclude_song_data": g(a, "exclude_song_data", None)}
    if a.group == "train":
        f[a.cmd]["steps"] = a.steps
        if a.cmd == "codec":
            f["codec"]["stem"] = a.stem
        if a.cmd == "tritower":
            f["tritower"]["text_aug"] = False if a.no_text_aug else None
            f["tritower"]["spec_aug"] = False if a.no_spec_aug else None
        if a.cmd in ("svs", "v2a"):
            f[a.cmd]["overfit"] = a.overfit
    if a.group == "generate":
        f["generate"] = {"prompt": a.prompt, "top_k": a.top_k, "temperature": a.temperature,
                         "stage1_top_k": a.stage1_top_k}
    for k, v in vars(a).items():
        if k.startswith("path_"):
            f["paths"][k[5:]] = v
    return f


def run(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(a.config, flags_from_args(a))
    key = (a.group, getattr(a, "cmd", None))
    if key == ("data", "synth"):
        return cmd_data_synth(cfg)
    if key == ("train", "codec"):
        return cmd_train_codec(cfg)
    if key == ("train", "tritower"):
        return cmd_train_tritower(cfg)
    if key == ("train", "svs"):
        return cmd_train_svs(cfg)
    if key == ("train", "v2a"):
        return cmd_train_v2a(cfg)
    if key[0] == "generate":
        return cmd_generate(cfg, a.score)
    if key == ("eval", "retrieval"):
        return cmd_eval_retrieval(cfg, a.embeddings)
    if key == ("eval", "ffe"):
        return cmd_eval_ffe(cfg, a.ref, a.hyp)
    if key == ("eval", "melody"):
        return cmd_eval_melody(cfg, a.vocal, a.accomp)
    raise ValidationError(f"unknown command {key}")


def main(argv=None) -> int:
    try:
        return run(argv)
    except Text2SongError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
