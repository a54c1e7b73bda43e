"""Pipeline acceptance gate: nine criteria, one printed verdict line each.

Run `python3 -m pytest tests/test_acceptance.py -v -s` to watch the verdict
lines stream; without -s they still print, but pytest shows captured output
only for failing tests.

Criteria 7 and 9 are directional multi-seed checks ("does pretraining help",
"do prompts steer amplitude"): their verdict reports a seed tally, and a
tally below the bar raises a warning rather than a failure, because a single
unlucky seed is an expected outcome of a stochastic training run.
"""

import dataclasses
import math
import os
import time
import warnings

import numpy as np
import pytest

from gesticulate import rvq
from gesticulate import autodiff as ad
from gesticulate.audio import (AudioVqConfig, BeatList, detect_beats,
                               extract_mfcc, read_wav, tokenize_audio,
                               train_audio_vq)
from gesticulate.autodiff import Tensor
from gesticulate.cli import main
from gesticulate.manifest import load_manifest
from gesticulate.metrics import (GaussianFit, MetricsConfig, beat_align, fgd,
                                 frechet_distance, mean_angular_speed,
                                 train_feature_autoencoder)
from gesticulate.motion_features import clip_to_features, default_layout
from gesticulate.motion_io import forward_kinematics, parse_bvh, write_bvh
from gesticulate.seq_lm import (LmConfig, LmNet, VocabLayout, generate,
                                mean_nll, serialize_example, train_lm)
from gesticulate.synth import (SynthConfig, click_times, click_waveform,
                               demo_skeleton, generate_corpus,
                               oscillation_clip)

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "data", "golden")


def verdict(criterion: int, ok: bool, detail: str, soft: bool = False):
    word = "PASS" if ok else ("SOFT-FAIL (logged, not fatal)" if soft
                              else "FAIL")
    print(f"\n[criterion {criterion}] {word}: {detail}")


# -- 1: residual quantization telescoping ------------------------------------


def test_1_telescoping_identity_exact():
    rng = np.random.default_rng(0)
    t0 = time.monotonic()
    ok = True
    for _ in range(1000):
        S = int(rng.integers(2, 33))
        C = int(rng.integers(2, 17))
        L = int(rng.integers(1, 5))
        latents = rng.normal(size=(S, C)) * rng.uniform(0.1, 10.0)
        books = [rvq.Codebook.from_entries(
            rng.normal(size=(int(rng.integers(2, 17)), C))) for _ in range(L)]
        codes, quantized, residuals = rvq.quantize_residual(latents, books)
        picked = rvq.chosen_entries(books, codes)
        running = np.zeros_like(latents)
        for level in range(L):
            running = running + picked[:, level, :]
        ok = ok and np.array_equal(running, quantized)
        ok = ok and np.array_equal(latents - running, residuals[-1])
    elapsed = time.monotonic() - t0
    verdict(1, ok and elapsed < 10.0,
            f"level-ordered sum and final residual bitwise-exact on 1000 "
            f"random batches in {elapsed:.1f} s (budget 10 s)")
    assert ok
    assert elapsed < 10.0


# -- 2: toy tokenizer training ------------------------------------------------


def test_2_toy_rvq_training():
    from conftest import build_chain_skeleton
    from gesticulate.motion_io import MotionClip
    from gesticulate.rotations import quat_canonical

    def constant_clip(skeleton, rng, n_frames=64, fps=30.0):
        n_rot = len(skeleton.rotated_joints)
        q = rng.normal(size=(1, n_rot, 4))
        q = quat_canonical(q / np.linalg.norm(q, axis=-1, keepdims=True))
        return MotionClip(skeleton=skeleton, fps=fps,
                          root_pos=np.tile(rng.normal(size=(1, 3)),
                                           (n_frames, 1)),
                          quats=np.repeat(q, n_frames, axis=0))

    t0 = time.monotonic()
    skeleton = build_chain_skeleton()
    layout = default_layout(skeleton)
    rng = np.random.default_rng(11)
    clips = [constant_clip(skeleton, rng) for _ in range(4)]
    corpus = [clip_to_features(c, layout) for c in clips]

    def config(depth):
        return rvq.RvqConfig(codebook_size=8, latent_channels=16, depth=depth,
                             downsample=8, attn_blocks=1, learning_rate=1e-3,
                             total_steps=2000, batch_sequences=4,
                             batch_frames=64)

    model1, _ = rvq.train_rvq(corpus, config(1), seed=0, skeleton=skeleton)
    mse1 = float(np.mean([rvq.reconstruction_mse(model1, f) for f in corpus]))
    level0 = np.concatenate([rvq.tokenize(model1, c).codes[:, 0]
                             for c in clips])
    active = len(np.unique(level0))

    model4, _ = rvq.train_rvq(corpus, config(4), seed=0, skeleton=skeleton)
    mse4 = float(np.mean([rvq.reconstruction_mse(model4, f) for f in corpus]))
    elapsed = time.monotonic() - t0

    ok = mse1 < 1e-2 and active >= 4 and mse4 <= mse1 and elapsed < 300.0
    verdict(2, ok,
            f"4-pose corpus, K=8: depth-1 MSE {mse1:.2e} (< 1e-2) with "
            f"{active} active codes (>= 4); depth-4 MSE {mse4:.2e} <= "
            f"depth-1; {elapsed:.0f} s (budget 300 s)")
    assert mse1 < 1e-2
    assert active >= 4
    assert mse4 <= mse1
    assert elapsed < 300.0


# -- 3: analytic gradients -----------------------------------------------------


def test_3_gradchecks():
    t0 = time.monotonic()
    rng = np.random.default_rng(5)
    results = []

    enc = rvq.ConvEncoder(3, 8, (2,), 3, 1, rng)
    x_enc = rng.normal(size=(1, 8, 3))
    results.append(("encoder", enc,
                    lambda: (enc(Tensor(x_enc)) ** 2.0).mean(), 1e-4))

    dec = rvq.ConvDecoder(3, 8, (2,), 3, 1, rng)
    x_dec = rng.normal(size=(1, 4, 8))
    results.append(("decoder", dec,
                    lambda: (dec(Tensor(x_dec)) ** 2.0).mean(), 1e-4))

    net = LmNet(11, LmConfig(layers=1, heads=2, width=8, context=8), rng)
    ids = rng.integers(0, 11, size=(2, 8))
    targets = np.roll(ids, -1, axis=1).reshape(-1)
    mask = np.ones(ids.size, dtype=bool)

    def lm_loss():
        logits = net(ids)
        B, T, V = logits.shape
        return ad.masked_nll(ad.reshape(logits, (B * T, V)), targets, mask)

    results.append(("transformer", net, lm_loss, 1e-3))

    measured, ok = [], True
    for name, module, loss_fn, tol in results:
        n = module.n_params()
        assert n <= 2000, f"{name} has {n} params, over the 2k budget"
        worst = ad.gradcheck(loss_fn, module.parameters())
        measured.append((name, worst, tol, n))
        ok = ok and worst < tol
    elapsed = time.monotonic() - t0
    ok = ok and elapsed < 60.0
    verdict(3, ok, "max relative gradient error vs central differences: "
            + "; ".join(f"{name} {worst:.2e} (tol {tol:g}, {n} params)"
                        for name, worst, tol, n in measured)
            + f"; {elapsed:.0f} s (budget 60 s)")
    for name, worst, tol, _ in measured:
        assert worst < tol, f"{name} gradcheck {worst} over {tol}"
    assert elapsed < 60.0


# -- 4: distribution distance ---------------------------------------------------


def test_4_frechet_closed_forms():
    rng = np.random.default_rng(7)
    worst = 0.0
    for case in range(100):
        dim = 1 if case % 2 == 0 else int(rng.integers(2, 7))
        mean_a, mean_b = rng.normal(size=(2, dim)) * 3.0
        var_a = rng.uniform(0.1, 4.0, size=dim)
        var_b = rng.uniform(0.1, 4.0, size=dim)
        closed = float(((mean_a - mean_b) ** 2).sum()
                       + ((np.sqrt(var_a) - np.sqrt(var_b)) ** 2).sum())
        got = frechet_distance(GaussianFit(mean_a, np.diag(var_a)),
                               GaussianFit(mean_b, np.diag(var_b)))
        worst = max(worst, abs(got - closed))

    self_distances = []
    for seed, (n, window, dim) in enumerate(
            [(120, 3, 4), (150, 2, 6), (200, 4, 2)]):
        r = np.random.default_rng(seed)
        windows = r.normal(size=(n, window, dim))
        cfg = MetricsConfig(window=window, latent_dim=2, ae_hidden=8,
                            ae_steps=1)
        ae, _ = train_feature_autoencoder(windows, cfg, seed=seed)
        self_distances.append(fgd(windows, windows, ae))
    worst_self = max(self_distances)

    ok = worst < 1e-8 and worst_self < 1e-6
    verdict(4, ok,
            f"closed-form agreement on 100 diagonal cases within "
            f"{worst:.1e} (tol 1e-8); self-distance on 3 window sets "
            f"<= {worst_self:.1e} (tol 1e-6)")
    assert worst < 1e-8
    assert worst_self < 1e-6


# -- 5: beat alignment ----------------------------------------------------------


def test_5_beat_alignment_and_detection():
    rng = np.random.default_rng(9)
    identical_exact = True
    for _ in range(20):
        times = np.sort(rng.uniform(0.0, 10.0, size=rng.integers(1, 12)))
        times = np.unique(times)
        beats = BeatList(times)
        identical_exact = identical_exact and beat_align(beats, beats) == 1.0

    sigma = 0.1
    offset = beat_align(BeatList([1.0 + sigma]), BeatList([1.0]), sigma)
    offset_err = abs(offset - math.exp(-0.5))

    seconds, beat_hz = 4.0, 2.0
    wav = click_waveform(seconds, beat_hz)
    found = detect_beats(wav)
    clicks = click_times(seconds, beat_hz)
    count_ok = len(found) == len(clicks)
    mean_err = float(np.mean([np.abs(clicks - t).min()
                              for t in found.times])) if len(found) else 1.0

    ok = identical_exact and offset_err <= 1e-9 and count_ok and \
        mean_err <= 0.020
    verdict(5, ok,
            f"identical lists score exactly 1.0; sigma-offset beat scores "
            f"exp(-1/2) within {offset_err:.1e} (tol 1e-9); 2 Hz clicks: "
            f"{len(found)}/{len(clicks)} beats, mean error "
            f"{mean_err * 1000:.1f} ms (tol 20 ms)")
    assert identical_exact
    assert offset_err <= 1e-9
    assert count_ok
    assert mean_err <= 0.020


# -- 6: end-to-end memorization ---------------------------------------------------


def test_6_memorization_end_to_end():
    t0 = time.monotonic()
    fps = 30.0
    skeleton = demo_skeleton()
    clip = oscillation_clip(skeleton, seconds=2.0, fps=fps, beat_hz=2.0,
                            hand="left", amplitude_deg=25.0)
    wav = click_waveform(2.0, 2.0)
    feats = clip_to_features(clip, default_layout(skeleton))

    rvq_cfg = rvq.RvqConfig(codebook_size=8, latent_channels=16, depth=1,
                            downsample=4, attn_blocks=1, learning_rate=1e-3,
                            total_steps=300, batch_sequences=2,
                            batch_frames=16)
    rvq_model, _ = rvq.train_rvq([feats], rvq_cfg, seed=0, skeleton=skeleton)

    avq_cfg = AudioVqConfig(codebook_size=8, depth=1, latent_channels=8,
                            frame_ms=40.0, hop_ms=40.0, total_steps=100,
                            batch_frames=32)
    frames = extract_mfcc(wav, avq_cfg.frame_ms, avq_cfg.hop_ms,
                          avq_cfg.n_mels, avq_cfg.n_coeffs)
    avq_model, _ = train_audio_vq([frames], avq_cfg, seed=0)
    audio = tokenize_audio(avq_model, wav)
    tokens = rvq.tokenize(rvq_model, clip)

    layout = VocabLayout(audio_codebook=8, audio_levels=1, motion_codebook=8,
                         motion_levels=1)
    example = serialize_example(layout, "audio_to_motion",
                                motion=tokens.codes, audio=audio.codes)
    lm_cfg = LmConfig(layers=2, heads=2, width=64, context=128,
                      learning_rate=1e-3, epochs=200, batch_size=1)
    model, _ = train_lm([example], "sft", layout, lm_cfg, seed=0,
                        from_scratch=True)

    produced = generate(model, audio, sampling="greedy", fps_latent=fps / 4)
    tokens_match = np.array_equal(produced.codes, tokens.codes)

    # Tokens encode root motion as deltas; the world anchor travels as
    # producer-side metadata, so decode at the training clip's anchor.
    anchored = dataclasses.replace(produced, root_start=tokens.root_start)
    decoded = rvq.detokenize(rvq_model, anchored)
    reference = rvq.detokenize(rvq_model, tokens)
    decode_identical = (np.array_equal(decoded.quats, reference.quats)
                        and np.array_equal(decoded.root_pos,
                                           reference.root_pos))
    # with identical tokens, the end-to-end error IS the tokenizer's own
    recon_mse = rvq.reconstruction_mse(rvq_model, feats)
    elapsed = time.monotonic() - t0

    ok = tokens_match and decode_identical and elapsed < 600.0
    verdict(6, ok,
            f"greedy decoding reproduces all {tokens.codes.shape[0]} motion "
            f"tokens exactly; detokenized clip matches the tokenizer "
            f"round-trip bitwise (tokenizer MSE {recon_mse:.2e}); "
            f"{elapsed:.0f} s (budget 600 s)")
    assert tokens_match
    assert decode_identical
    assert elapsed < 600.0


# -- shared corpus for the directional checks -------------------------------------


@pytest.fixture(scope="module")
def synth_pipeline(tmp_path_factory):
    """Corpus + tokenizers + token grids shared by criteria 7 and 9."""
    root = tmp_path_factory.mktemp("acceptance")
    fps = 30.0
    manifest = generate_corpus(
        str(root), SynthConfig(n_clips=10, seconds=4.0, beat_hz=2.0,
                               test_fraction=0.2),
        fps=fps, sample_rate=16000, seed=0)
    entries = load_manifest(manifest)
    clips, wavs = {}, {}
    for entry in entries:
        with open(os.path.join(str(root), entry.bvh_path)) as fh:
            clips[entry.id] = parse_bvh(fh.read())
        wavs[entry.id] = read_wav(os.path.join(str(root), entry.wav_path))
    skeleton = clips[entries[0].id].skeleton
    feat_layout = default_layout(skeleton)
    feats = {i: clip_to_features(c, feat_layout) for i, c in clips.items()}
    train_entries = [e for e in entries if e.split == "train"]
    test_entries = [e for e in entries if e.split == "test"]

    rvq_cfg = rvq.RvqConfig(codebook_size=16, latent_channels=16, depth=1,
                            downsample=4, attn_blocks=1, learning_rate=1e-3,
                            total_steps=400, batch_sequences=4,
                            batch_frames=32)
    rvq_model, _ = rvq.train_rvq([feats[e.id] for e in train_entries],
                                 rvq_cfg, seed=0, skeleton=skeleton)
    avq_cfg = AudioVqConfig(codebook_size=16, depth=1, latent_channels=8,
                            frame_ms=40.0, hop_ms=40.0, total_steps=150,
                            batch_frames=64)
    frame_corpus = [extract_mfcc(wavs[e.id], avq_cfg.frame_ms, avq_cfg.hop_ms,
                                 avq_cfg.n_mels, avq_cfg.n_coeffs)
                    for e in train_entries]
    avq_model, _ = train_audio_vq(frame_corpus, avq_cfg, seed=0)

    layout = VocabLayout(audio_codebook=16, audio_levels=1,
                         motion_codebook=16, motion_levels=1)
    motion_tokens = {e.id: rvq.tokenize(rvq_model, clips[e.id])
                     for e in entries}
    audio_tokens = {e.id: tokenize_audio(avq_model, wavs[e.id])
                    for e in entries}

    def sft_examples(which):
        return [serialize_example(layout, "text_audio_to_motion",
                                  motion=motion_tokens[e.id].codes,
                                  audio=audio_tokens[e.id].codes,
                                  text=e.prompt) for e in which]

    def pretrain_examples(which):
        out = []
        for e in which:
            out.append(serialize_example(layout, "motion_completion",
                                         motion=motion_tokens[e.id].codes))
            out.append(serialize_example(layout, "audio_completion",
                                         audio=audio_tokens[e.id].codes))
        return out

    return {
        "fps": fps, "layout": layout, "rvq_model": rvq_model,
        "audio_tokens": audio_tokens, "test_entries": test_entries,
        "train_sft": sft_examples(train_entries),
        "val_sft": sft_examples(test_entries),
        "train_pretrain": pretrain_examples(train_entries),
    }


# -- 7: does pretraining help? ------------------------------------------------------


def test_7_pretraining_gap_across_seeds(synth_pipeline):
    p = synth_pipeline
    base = dict(layers=2, heads=2, width=48, context=256, learning_rate=1e-3,
                batch_size=8)
    wins, gaps = [], []
    for seed in range(5):
        pretrained, _ = train_lm(p["train_pretrain"], "pretrain", p["layout"],
                                 LmConfig(epochs=16, **base), seed=seed)
        warm, _ = train_lm(p["train_sft"], "sft", p["layout"],
                           LmConfig(epochs=3, **base), seed=seed,
                           init=pretrained)
        cold, _ = train_lm(p["train_sft"], "sft", p["layout"],
                           LmConfig(epochs=3, **base), seed=seed,
                           from_scratch=True)
        nll_warm = mean_nll(warm, p["val_sft"])
        nll_cold = mean_nll(cold, p["val_sft"])
        assert math.isfinite(nll_warm) and math.isfinite(nll_cold)
        wins.append(nll_warm <= nll_cold)
        gaps.append(nll_cold - nll_warm)
    tally = sum(wins)
    ok = tally >= 4
    detail = (f"validation NLL with pretraining <= from-scratch in {tally}/5 "
              f"seeds (bar: 4/5); NLL gaps "
              f"{', '.join(f'{g:+.3f}' for g in gaps)}")
    verdict(7, ok, detail, soft=True)
    if not ok:
        warnings.warn(f"soft criterion 7 below the bar: {detail}")


# -- 8: round trips and determinism ---------------------------------------------------


def test_8_bvh_round_trip_and_deterministic_generation(tmp_path):
    channel_worst = 0.0
    for name in sorted(os.listdir(GOLDEN_DIR)):
        with open(os.path.join(GOLDEN_DIR, name), encoding="utf-8",
                  newline="") as fh:
            first = parse_bvh(fh.read())
        second = parse_bvh(write_bvh(first))
        channel_worst = max(channel_worst, float(
            np.abs(second.root_pos - first.root_pos).max()))
        dots = np.abs((second.quats * first.quats).sum(axis=-1))
        channel_worst = max(channel_worst, float((1.0 - dots).max()))
        pos_a, _ = forward_kinematics(first)
        pos_b, _ = forward_kinematics(second)
        channel_worst = max(channel_worst,
                            float(np.abs(pos_b - pos_a).max()))

    cfg = tmp_path / "toy.cfg"
    cfg.write_text(
        "synth.n_clips = 4\nsynth.seconds = 2.0\nsynth.test_fraction = 0.5\n"
        "rvq.codebook_size = 8\nrvq.latent_channels = 16\nrvq.depth = 1\n"
        "rvq.downsample = 4\nrvq.attn_blocks = 1\nrvq.total_steps = 60\n"
        "rvq.batch_sequences = 2\nrvq.batch_frames = 16\n"
        "audio.codebook_size = 8\naudio.depth = 1\n"
        "audio.latent_channels = 8\naudio.total_steps = 50\n"
        "audio.batch_frames = 64\n"
        "lm.layers = 1\nlm.heads = 2\nlm.width = 32\nlm.context = 512\n"
        "lm.learning_rate = 1e-3\nlm.epochs = 2\nlm.batch_size = 4\n")
    d = tmp_path
    pipeline = [
        ["synth", "--out", f"{d}/corpus"],
        ["train-rvq", "--manifest", f"{d}/corpus/manifest.jsonl",
         "--out", f"{d}/rvq.npz"],
        ["train-audio-vq", "--manifest", f"{d}/corpus/manifest.jsonl",
         "--out", f"{d}/avq.npz"],
        ["tokenize", "--manifest", f"{d}/corpus/manifest.jsonl",
         "--rvq", f"{d}/rvq.npz", "--audio-vq", f"{d}/avq.npz",
         "--out", f"{d}/tokens.jsonl"],
        ["train-lm", "--tokens", f"{d}/tokens.jsonl", "--stage", "sft",
         "--from-scratch", "--out", f"{d}/lm.npz"],
    ]
    for step in pipeline:
        assert main(step + ["--config", str(cfg)]) == 0, step[0]
    blobs = []
    for out in (f"{d}/a.bvh", f"{d}/b.bvh"):
        rc = main(["generate", "--lm", f"{d}/lm.npz", "--rvq", f"{d}/rvq.npz",
                   "--audio-vq", f"{d}/avq.npz",
                   "--wav", f"{d}/corpus/wav/clip_00.wav",
                   "--sampling", "top_k", "--seed", "3",
                   "--min-seconds", "1.0", "--out", out,
                   "--config", str(cfg)])
        assert rc == 0
        with open(out, "rb") as fh:
            body = fh.read()
        with open(out + ".json", "rb") as fh:
            side = fh.read()
        blobs.append((body, side))
    deterministic = blobs[0] == blobs[1]

    ok = channel_worst <= 1e-4 and deterministic
    verdict(8, ok,
            f"golden BVH parse->write->parse within {channel_worst:.1e} "
            f"(tol 1e-4) over {len(os.listdir(GOLDEN_DIR))} files; repeated "
            f"generation under one seed is byte-identical: {deterministic}")
    assert channel_worst <= 1e-4
    assert deterministic


# -- 9: prompts steer amplitude --------------------------------------------------------


def test_9_prompt_conditioning_across_seeds(synth_pipeline):
    p = synth_pipeline
    lm_cfg = LmConfig(layers=2, heads=2, width=64, context=256,
                      learning_rate=1e-3, epochs=60, batch_size=8)
    model, _ = train_lm(p["train_sft"], "sft", p["layout"], lm_cfg, seed=0,
                        from_scratch=True)
    audio = p["audio_tokens"][p["test_entries"][0].id]
    fps_latent = p["fps"] / p["rvq_model"].downsample
    wins, pairs = [], []
    for seed in range(5):
        speeds = {}
        for size in ("large", "small"):
            tokens = generate(model, audio,
                              text=f"wave the left hand with {size} swings",
                              sampling="top_k", seed=seed,
                              fps_latent=fps_latent, min_steps=4)
            clip = rvq.detokenize(p["rvq_model"], tokens)
            speeds[size] = mean_angular_speed(clip)
        assert all(math.isfinite(v) for v in speeds.values())
        wins.append(speeds["large"] > speeds["small"])
        pairs.append(f"{speeds['large']:.3f}>{speeds['small']:.3f}")
    tally = sum(wins)
    ok = tally >= 4
    detail = (f"mean joint angular speed higher under 'large' than 'small' "
              f"prompts in {tally}/5 sampling seeds (bar: 4/5); "
              f"large>small rad/s per seed: {', '.join(pairs)}")
    verdict(9, ok, detail, soft=True)
    if not ok:
        warnings.warn(f"soft criterion 9 below the bar: {detail}")
