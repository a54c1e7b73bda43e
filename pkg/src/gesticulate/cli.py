"""Command-line pipeline driver.

Subcommands cover the whole workflow: synthesize a demo corpus, train the
motion and audio tokenizers, tokenize a corpus, train the token language
model in two stages, generate motion for a WAV, and score generated clips
against ground truth.

Every command is a deterministic function of (inputs, config, seed).
Artifacts are stamped with the hash of the fully-resolved config, commands
that consume stamped artifacts refuse hash mismatches unless --force is
given, and an advisory lock file (`<out>.lock`) prevents two commands from
writing the same output path at once.  Errors print as a single
`error: ...` line on stderr with exit status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import contextmanager

import numpy as np

from .audio import (AudioTokens, AudioVqConfig, detect_beats, extract_mfcc,
                    load_audio_vq, read_wav, resample_wave, save_audio_vq,
                    tokenize_audio, train_audio_vq)
from .config import ConfigError, config_hash, load_config, section
from .exceptions import GesticulateError
from .manifest import (TokenRecord, load_manifest, load_pretokenized_audio,
                       load_token_records, save_token_records)
from .metrics import (EvalReport, MetricsConfig, beat_align, diversity,
                      feature_windows, fgd, load_feature_autoencoder,
                      motion_beats, train_feature_autoencoder)
from .motion_features import (FootContactParams, clip_to_features,
                              default_layout, fix_foot_sliding)
from .motion_io import MotionClip, parse_bvh, resample, write_bvh
from .rvq import (RvqConfig, detokenize, load_rvq, save_rvq, tokenize,
                  train_rvq, write_training_log)
from .seq_lm import (LmConfig, TrainingExample, VocabLayout, generate,
                     load_lm, mean_nll, save_lm, serialize_example, train_lm)
from .synth import SynthConfig, generate_corpus

log = logging.getLogger("gesticulate.cli")


# -- shared plumbing --------------------------------------------------------


def _setup_logging():
    name = os.environ.get("GESTICULATE_LOG", "").strip()
    if not name:
        return
    level = getattr(logging, name.upper(), None)
    if not isinstance(level, int):
        raise ConfigError(f"GESTICULATE_LOG: unknown level {name!r}")
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@contextmanager
def output_lock(out_path: str):
    """Advisory lock guarding one output path against concurrent writers."""
    lock_path = out_path.rstrip("/\\") + ".lock"
    parent = os.path.dirname(os.path.abspath(lock_path))
    os.makedirs(parent, exist_ok=True)
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise GesticulateError(
            f"{out_path} is locked ({lock_path} exists); another command may "
            f"be writing it — remove the lock file if no run is active"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        try:
            os.remove(lock_path)
        except FileNotFoundError:
            pass


def _resolve(base_dir: str, path: str) -> str:
    """Manifest paths are relative to the manifest's directory."""
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _seed_for(args, cfg) -> int:
    seed = int(cfg["seed"]) if args.seed is None else args.seed
    if seed < 0:
        raise GesticulateError("seed must be non-negative")
    return seed


def _check_hashes(stamped: dict[str, str], digest: str, force: bool):
    """Refuse inputs whose recorded config hash disagrees with the current one."""
    mismatched = {p: h for p, h in stamped.items() if h and h != digest}
    if mismatched and not force:
        detail = "; ".join(f"{p} was built under {h[:12]}"
                           for p, h in sorted(mismatched.items()))
        raise GesticulateError(
            f"config hash mismatch (current {digest[:12]}): {detail}; "
            f"pass --force to proceed anyway")
    for p, h in sorted(mismatched.items()):
        log.warning("ignoring config hash mismatch for %s (%s)", p, h[:12])


def _load_clip(path: str, fps: float) -> MotionClip:
    with open(path, "r", encoding="utf-8") as fh:
        clip = parse_bvh(fh.read())
    if abs(clip.fps - fps) > 1e-6:
        log.info("resampling %s from %g to %g fps", path, clip.fps, fps)
        clip = resample(clip, fps)
    return clip


def _corpus_features(entries, base_dir: str, fps: float):
    """Load every clip, enforce one shared skeleton, extract features.

    Returns (skeleton, layout, {id: FeatureSequence}) in manifest order.
    """
    skeleton = None
    layout = None
    named = {}
    for entry in entries:
        clip = _load_clip(_resolve(base_dir, entry.bvh_path), fps)
        names = [j.name for j in clip.skeleton.joints]
        if skeleton is None:
            skeleton, layout = clip.skeleton, default_layout(clip.skeleton)
            first_names = names
        elif names != first_names:
            raise GesticulateError(
                f"clip {entry.id!r} has a different skeleton than the rest "
                f"of the corpus")
        named[entry.id] = clip_to_features(clip, layout)
    return skeleton, layout, named


def _split(entries, split: str, manifest_path: str):
    got = [e for e in entries if e.split == split]
    if not got:
        raise GesticulateError(f"{manifest_path}: no {split!r}-split entries")
    return got


def _prompt_text(prompt: str | None, speaker: str | None) -> str | None:
    if prompt is None:
        return None
    return f"{speaker}: {prompt}" if speaker else prompt


def _stage_examples(record: TokenRecord, stage: str,
                    layout: VocabLayout) -> list[TrainingExample]:
    """Pretrain: one completion example per modality.  SFT: audio(+text) -> motion."""
    if stage == "pretrain":
        return [
            serialize_example(layout, "motion_completion",
                              motion=record.motion_codes),
            serialize_example(layout, "audio_completion",
                              audio=record.audio_codes),
        ]
    text = _prompt_text(record.prompt, record.speaker)
    if text is None:
        return [serialize_example(layout, "audio_to_motion",
                                  motion=record.motion_codes,
                                  audio=record.audio_codes)]
    return [serialize_example(layout, "text_audio_to_motion",
                              motion=record.motion_codes,
                              audio=record.audio_codes, text=text)]


def _layout_from_meta(path: str, meta: dict) -> VocabLayout:
    try:
        return VocabLayout(audio_codebook=int(meta["audio_codebook"]),
                           audio_levels=int(meta["audio_levels"]),
                           motion_codebook=int(meta["motion_codebook"]),
                           motion_levels=int(meta["motion_levels"]))
    except KeyError as err:
        raise GesticulateError(
            f"{path}: token file header is missing {err}") from None


def _write_epoch_log(path: str, rows: list[dict]):
    lines = ["epoch,loss"]
    lines += [f"{r['epoch']},{r['loss']!r}" for r in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = _seed_for(args, cfg)
    synth_cfg = SynthConfig(**section(cfg, "synth"))
    with output_lock(args.out):
        manifest_path = generate_corpus(
            args.out, synth_cfg, fps=float(cfg["fps"]),
            sample_rate=int(cfg["audio.sample_rate"]), seed=seed)
    print(manifest_path)
    return 0


def cmd_train_rvq(args) -> int:
    cfg = load_config(args.config)
    digest = config_hash(cfg)
    seed = _seed_for(args, cfg)
    rvq_cfg = RvqConfig(**section(cfg, "rvq"))
    entries = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    train_entries = _split(entries, "train", args.manifest)
    skeleton, _, feats = _corpus_features(train_entries, base, float(cfg["fps"]))
    log.info("training motion tokenizer on %d clips", len(feats))
    model, train_log = train_rvq(list(feats.values()), rvq_cfg, seed, skeleton,
                                 config_hash=digest)
    with output_lock(args.out):
        save_rvq(model, args.out)
        write_training_log(args.out + ".log.csv", train_log)
    print(f"saved {args.out}  final_rec {train_log[-1]['rec']!r}")
    return 0


def cmd_train_audio_vq(args) -> int:
    cfg = load_config(args.config)
    digest = config_hash(cfg)
    seed = _seed_for(args, cfg)
    avq_cfg = AudioVqConfig(**section(cfg, "audio"))
    entries = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    train_entries = _split(entries, "train", args.manifest)
    frames = []
    for entry in train_entries:
        wav = read_wav(_resolve(base, entry.wav_path))
        if wav.sample_rate != avq_cfg.sample_rate:
            wav = resample_wave(wav, avq_cfg.sample_rate)
        frames.append(extract_mfcc(wav, avq_cfg.frame_ms, avq_cfg.hop_ms,
                                   avq_cfg.n_mels, avq_cfg.n_coeffs))
    log.info("training audio tokenizer on %d clips", len(frames))
    model, train_log = train_audio_vq(frames, avq_cfg, seed, config_hash=digest)
    with output_lock(args.out):
        save_audio_vq(model, args.out)
        write_training_log(args.out + ".log.csv", train_log)
    print(f"saved {args.out}  final_rec {train_log[-1]['rec']!r}")
    return 0


def cmd_tokenize(args) -> int:
    cfg = load_config(args.config)
    digest = config_hash(cfg)
    fps = float(cfg["fps"])
    if args.audio_vq is None and args.audio_tokens is None:
        raise GesticulateError("tokenize needs --audio-vq or --audio-tokens")

    rvq_model = load_rvq(args.rvq)
    if abs(rvq_model.fps - fps) > 1e-6:
        raise GesticulateError(
            f"{args.rvq}: model was trained at {rvq_model.fps:g} fps but the "
            f"config says {fps:g}")
    stamped = {args.rvq: rvq_model.config_hash}
    avq_model = None
    pretok = None
    if args.audio_tokens is not None:
        pretok = load_pretokenized_audio(args.audio_tokens)
        audio_codebook = int(cfg["audio.codebook_size"])
        audio_levels = int(cfg["audio.depth"])
    else:
        avq_model = load_audio_vq(args.audio_vq)
        stamped[args.audio_vq] = avq_model.config_hash
        audio_codebook = avq_model.cfg.codebook_size
        audio_levels = avq_model.depth
    _check_hashes(stamped, digest, args.force)

    entries = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    records = []
    for entry in entries:
        clip = _load_clip(_resolve(base, entry.bvh_path), fps)
        motion = tokenize(rvq_model, clip)
        if pretok is not None:
            if entry.id not in pretok:
                raise GesticulateError(
                    f"{args.audio_tokens}: no tokens for clip {entry.id!r}")
            codes, frame_rate = pretok[entry.id]
            if codes.shape[1] != audio_levels:
                raise GesticulateError(
                    f"clip {entry.id!r}: pretokenized audio has "
                    f"{codes.shape[1]} levels but audio.depth is {audio_levels}")
            if int(codes.max()) >= audio_codebook:
                raise GesticulateError(
                    f"clip {entry.id!r}: pretokenized audio code "
                    f"{int(codes.max())} is out of range for "
                    f"audio.codebook_size {audio_codebook}")
            audio = AudioTokens(codes=codes, frame_rate=frame_rate)
        else:
            wav = read_wav(_resolve(base, entry.wav_path))
            audio = tokenize_audio(avq_model, wav, resample=True)
        records.append(TokenRecord(
            id=entry.id, motion_codes=motion.codes,
            fps_latent=motion.fps_latent, root_start=motion.root_start,
            n_frames=clip.n_frames, audio_codes=audio.codes,
            audio_frame_rate=audio.frame_rate, prompt=entry.prompt,
            speaker=entry.speaker, split=entry.split))

    meta = {
        "config_hash": digest,
        "motion_codebook": rvq_model.cfg.codebook_size,
        "motion_levels": rvq_model.depth,
        "audio_codebook": audio_codebook,
        "audio_levels": audio_levels,
        "fps_latent": rvq_model.fps / rvq_model.downsample,
    }
    with output_lock(args.out):
        save_token_records(args.out, records, meta)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train_lm(args) -> int:
    cfg = load_config(args.config)
    digest = config_hash(cfg)
    seed = _seed_for(args, cfg)
    lm_cfg = LmConfig(**section(cfg, "lm"))
    meta, records = load_token_records(args.tokens)
    layout = _layout_from_meta(args.tokens, meta)
    stamped = {args.tokens: str(meta.get("config_hash", ""))}

    init = None
    if args.init is not None:
        init = load_lm(args.init)
        if init.layout != layout:
            raise GesticulateError(
                f"{args.init}: vocabulary layout does not match {args.tokens}")
        stamped[args.init] = init.config_hash
    _check_hashes(stamped, digest, args.force)

    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise GesticulateError(f"{args.tokens}: no train-split records")
    examples = []
    for record in train_records:
        examples.extend(_stage_examples(record, args.stage, layout))
    log.info("training %s stage on %d examples", args.stage, len(examples))
    model, epoch_log = train_lm(examples, args.stage, layout, lm_cfg, seed,
                                init=init, from_scratch=args.from_scratch,
                                config_hash=digest)
    with output_lock(args.out):
        save_lm(model, args.out)
        _write_epoch_log(args.out + ".log.csv", epoch_log)
    print(f"saved {args.out}  train_loss {epoch_log[-1]['loss']!r}")

    val_examples = []
    for record in records:
        if record.split == "test":
            val_examples.extend(_stage_examples(record, args.stage, layout))
    if val_examples:
        print(f"val_nll {mean_nll(model, val_examples)!r}")
    return 0


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    digest = config_hash(cfg)
    seed = _seed_for(args, cfg)
    lm_model = load_lm(args.lm)
    rvq_model = load_rvq(args.rvq)
    avq_model = load_audio_vq(args.audio_vq)
    _check_hashes({args.lm: lm_model.config_hash,
                   args.rvq: rvq_model.config_hash,
                   args.audio_vq: avq_model.config_hash}, digest, args.force)
    expected = VocabLayout(audio_codebook=avq_model.cfg.codebook_size,
                           audio_levels=avq_model.depth,
                           motion_codebook=rvq_model.cfg.codebook_size,
                           motion_levels=rvq_model.depth)
    if lm_model.layout != expected:
        raise GesticulateError(
            f"{args.lm}: vocabulary layout does not match the tokenizers "
            f"({args.rvq}, {args.audio_vq})")

    wav = read_wav(args.wav)
    audio = tokenize_audio(avq_model, wav, resample=True)
    text = _prompt_text(args.prompt, args.speaker)
    fps_latent = rvq_model.fps / rvq_model.downsample
    min_steps = max(1, int(math.ceil(args.min_seconds * fps_latent)))
    tokens = generate(lm_model, audio, text=text, sampling=args.sampling,
                      seed=seed, min_steps=min_steps, fps_latent=fps_latent)
    clip = detokenize(rvq_model, tokens)
    if args.fix_feet:
        feet = section(cfg, "feet")
        substrings = tuple(
            s for s in str(feet.pop("substrings")).split(",") if s)
        params = FootContactParams(
            height_threshold=float(feet["height_threshold"]),
            speed_threshold=float(feet["speed_threshold"]),
            blend_window=int(feet["blend_window"]))
        clip = fix_foot_sliding(clip, params, substrings)

    sidecar = {
        "config_hash": digest,
        "seed": seed,
        "sampling": args.sampling,
        "prompt": args.prompt,
        "speaker": args.speaker,
        "n_frames": clip.n_frames,
    }
    with output_lock(args.out):
        _write_text(args.out, write_bvh(clip))
        _write_text(args.out + ".json",
                    json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(f"wrote {args.out} ({clip.n_frames} frames, "
          f"{clip.n_frames / clip.fps:.2f} s)")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    digest = config_hash(cfg)
    seed = _seed_for(args, cfg)
    fps = float(cfg["fps"])
    mcfg = MetricsConfig(**section(cfg, "metrics"))
    entries = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    test_entries = _split(entries, "test", args.manifest)
    if len(test_entries) < 2:
        raise GesticulateError(
            "evaluate needs at least 2 test-split entries (diversity is a "
            "pairwise statistic)")

    _, layout, gt_feats = _corpus_features(entries, base, fps)

    stamped: dict[str, str] = {}
    gen_clips: dict[str, MotionClip] = {}
    for entry in test_entries:
        path = os.path.join(args.generated, f"{entry.id}.bvh")
        if not os.path.exists(path):
            raise GesticulateError(f"missing generated clip: {path}")
        sidecar = path + ".json"
        if os.path.exists(sidecar):
            with open(sidecar, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            if isinstance(doc, dict) and doc.get("config_hash"):
                stamped[sidecar] = str(doc["config_hash"])
        gen_clips[entry.id] = _load_clip(path, fps)

    if args.ae is not None:
        ae = load_feature_autoencoder(args.ae)
        if ae.window != mcfg.window:
            raise GesticulateError(
                f"{args.ae}: autoencoder window {ae.window} != "
                f"metrics.window {mcfg.window}")
        stamped[args.ae] = ae.config_hash
        _check_hashes(stamped, digest, args.force)
    else:
        _check_hashes(stamped, digest, args.force)
        all_windows = np.concatenate(
            [feature_windows(s.data, mcfg.window) for s in gt_feats.values()])
        log.info("training window autoencoder on %d windows",
                 all_windows.shape[0])
        ae, _ = train_feature_autoencoder(all_windows, mcfg, seed,
                                          config_hash=digest)

    gen_feats = {entry.id: clip_to_features(gen_clips[entry.id], layout)
                 for entry in test_entries}
    real_windows = np.concatenate(
        [feature_windows(gt_feats[e.id].data, mcfg.window)
         for e in test_entries])
    gen_windows = np.concatenate(
        [feature_windows(s.data, mcfg.window) for s in gen_feats.values()])
    fgd_score = fgd(real_windows, gen_windows, ae, mcfg.ridge)

    align_scores = []
    for entry in test_entries:
        clip = gen_clips[entry.id]
        if clip.n_frames / clip.fps < 0.5:
            log.warning("generated clip %s is under 0.5 s; beat score 0",
                        entry.id)
            align_scores.append(0.0)
            continue
        wav = read_wav(_resolve(base, entry.wav_path))
        audio_beats = detect_beats(wav, float(cfg["audio.frame_ms"]),
                                   float(cfg["audio.hop_ms"]),
                                   int(cfg["audio.n_mels"]))
        align_scores.append(
            beat_align(motion_beats(clip), audio_beats, mcfg.sigma))
    align = float(np.mean(align_scores))

    min_frames = min(s.data.shape[0] for s in gen_feats.values())
    spread = diversity([s.data[:min_frames] for s in gen_feats.values()])

    report = EvalReport(fgd=fgd_score, beat_align=align, diversity=spread,
                        sigma=mcfg.sigma, config_hash=digest,
                        n_real_windows=int(real_windows.shape[0]),
                        n_gen_windows=int(gen_windows.shape[0]),
                        n_samples=len(test_entries))
    if args.out is not None:
        with output_lock(args.out):
            _write_text(args.out, report.to_json())
    print(report.to_table())
    return 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gesticulate",
        description="Audio-driven gesture pipeline: tokenize motion and "
                    "audio, train a token language model, generate, and "
                    "evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="key = value lines overriding built-in defaults")
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config's seed")
        return p

    p = command("synth", cmd_synth,
                "write a synthetic demo corpus (BVH + WAV + manifest)")
    p.add_argument("--out", required=True, help="corpus output directory")

    p = command("train-rvq", cmd_train_rvq,
                "train the residual motion tokenizer on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True,
                   help="model archive path (a .log.csv is written next to it)")

    p = command("train-audio-vq", cmd_train_audio_vq,
                "train the audio frame tokenizer on a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True,
                   help="model archive path (a .log.csv is written next to it)")

    p = command("tokenize", cmd_tokenize,
                "tokenize a corpus into a JSONL token file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rvq", required=True, help="motion tokenizer archive")
    p.add_argument("--audio-vq", default=None, help="audio tokenizer archive")
    p.add_argument("--audio-tokens", default=None, metavar="FILE",
                   help="pretokenized audio JSONL used instead of --audio-vq")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="proceed despite config-hash mismatches")

    p = command("train-lm", cmd_train_lm, "train the token language model")
    p.add_argument("--tokens", required=True, help="token file from tokenize")
    p.add_argument("--stage", required=True, choices=("pretrain", "sft"))
    p.add_argument("--init", default=None,
                   help="checkpoint to fine-tune (sft normally requires it)")
    p.add_argument("--from-scratch", action="store_true",
                   help="allow --stage sft without --init")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="proceed despite config-hash mismatches")

    p = command("generate", cmd_generate,
                "generate a motion clip for a WAV (optionally prompted)")
    p.add_argument("--lm", required=True)
    p.add_argument("--rvq", required=True)
    p.add_argument("--audio-vq", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--speaker", default=None)
    p.add_argument("--sampling", choices=("greedy", "top_k"),
                   default="greedy")
    p.add_argument("--min-seconds", type=float, default=0.0,
                   help="suppress end-of-sequence until this much motion")
    p.add_argument("--fix-feet", action=argparse.BooleanOptionalAction,
                   default=True, help="snap planted feet after decoding")
    p.add_argument("--out", required=True,
                   help="output BVH path (a .json sidecar is written too)")
    p.add_argument("--force", action="store_true",
                   help="proceed despite config-hash mismatches")

    p = command("evaluate", cmd_evaluate,
                "score generated clips against a corpus test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generated", required=True,
                   help="directory holding one <id>.bvh per test entry")
    p.add_argument("--ae", default=None,
                   help="pretrained window autoencoder (default: train one "
                        "on the ground-truth clips)")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.add_argument("--force", action="store_true",
                   help="proceed despite config-hash mismatches")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (GesticulateError, ValueError, OSError) as err:
        message = " ".join(str(err).split()) or err.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
