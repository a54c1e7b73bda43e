"""Residual quantizer: hand-worked quantization cases, EMA dynamics,
dead-code reseeding, gradient checks, toy training, and archive round trips.
"""

import numpy as np
import pytest

from conftest import build_chain_skeleton

from gesticulate import autodiff as ad
from gesticulate import rvq
from gesticulate.autodiff import Tensor, gradcheck
from gesticulate.exceptions import GesticulateError
from gesticulate.motion_features import (FeatureSequence, clip_to_features,
                                         default_layout)
from gesticulate.motion_io import MotionClip
from gesticulate.rotations import quat_canonical


def make_codebook(entries):
    return rvq.Codebook.from_entries(np.asarray(entries, dtype=np.float64))


# -- quantize_residual ---------------------------------------------------------


def test_two_level_scalar_by_hand():
    cb1 = make_codebook([[0.0], [4.0]])
    cb2 = make_codebook([[0.0], [1.0]])
    latents = np.array([[4.9]])
    codes, quantized, residuals = rvq.quantize_residual(latents, [cb1, cb2])
    assert codes.tolist() == [[1, 1]]
    assert quantized[0, 0] == pytest.approx(5.0)
    assert residuals[-1][0, 0] == pytest.approx(-0.1)
    assert len(residuals) == 3
    assert np.array_equal(residuals[0], latents)


def test_exact_match_zero_residual():
    rng = np.random.default_rng(0)
    entries = rng.normal(size=(9, 5))
    cb = make_codebook(entries)
    latents = entries[7:8].copy()
    codes, quantized, residuals = rvq.quantize_residual(latents, [cb])
    assert codes.tolist() == [[7]]
    assert np.array_equal(quantized, latents)
    assert np.all(residuals[-1] == 0.0)


def test_tie_goes_to_lowest_index():
    cb = make_codebook([[0.0], [1.0]])
    codes, _, _ = rvq.quantize_residual(np.array([[0.5]]), [cb])
    assert codes[0, 0] == 0


def test_telescoping_identity_is_bitwise():
    rng = np.random.default_rng(7)
    latents = rng.normal(size=(40, 6))
    books = [make_codebook(rng.normal(size=(5, 6))) for _ in range(4)]
    _, quantized, residuals = rvq.quantize_residual(latents, books)
    assert np.array_equal(latents - quantized, residuals[-1])


def test_channel_mismatch_rejected():
    cb = make_codebook(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        rvq.quantize_residual(np.zeros((2, 5)), [cb])


# -- rvq_loss --------------------------------------------------------------------


def test_loss_zero_when_perfect():
    m = np.arange(12.0).reshape(3, 4)
    latents = np.array([[0.5], [1.5]])
    entries = latents.copy()
    residuals = [latents, np.zeros_like(latents)]
    total, rec, commit, terms = rvq.rvq_loss(
        m, m.copy(), residuals, entries[:, None, :], beta=0.25)
    assert total == 0.0 and rec == 0.0 and commit == 0.0
    assert terms == [0.0]


def test_rec_is_elementwise_mse():
    m = np.zeros((5, 7))
    _, rec, _, _ = rvq.rvq_loss(m, m + 1.0, [np.zeros((1, 1)), np.zeros((1, 1))],
                                np.zeros((1, 1, 1)), beta=0.25)
    assert rec == pytest.approx(1.0)


def test_commit_scalar_by_hand():
    residuals = [np.array([[0.5]]), np.array([[0.5]])]
    chosen = np.array([[[0.0]]])
    _, _, commit, terms = rvq.rvq_loss(
        np.zeros((1, 1)), np.zeros((1, 1)), residuals, chosen, beta=0.25)
    assert commit == pytest.approx(0.0625)
    assert terms[0] == pytest.approx(0.25)


def test_loss_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        rvq.rvq_loss(np.zeros((2, 2)), np.zeros((3, 2)),
                     [np.zeros((1, 1))], np.zeros((1, 0, 1)), beta=0.25)


# -- ema_update --------------------------------------------------------------------


def test_ema_converges_to_constant_latent():
    cb = make_codebook(np.array([[3.0], [-2.0]]))
    v = np.array([[0.75]])
    codes = np.array([0])
    for _ in range(1000):
        rvq.ema_update(cb, codes, v, decay=0.99)
    assert abs(cb.entries[0, 0] - 0.75) < 1e-4


def test_ema_zero_hit_entry_unchanged():
    cb = make_codebook(np.array([[3.0], [-2.0]]))
    for _ in range(50):
        rvq.ema_update(cb, np.array([0]), np.array([[1.0]]), decay=0.99)
    # code 1 never hit: counts decay but sums/counts stays put
    assert cb.entries[1, 0] == pytest.approx(-2.0)
    assert cb.ema_counts[1] == pytest.approx(0.99 ** 50)


def test_ema_decay_zero_gives_batch_mean():
    cb = make_codebook(np.array([[10.0], [20.0]]))
    latents = np.array([[1.0], [3.0], [100.0]])
    rvq.ema_update(cb, np.array([0, 0, 1]), latents, decay=0.0)
    assert cb.entries[0, 0] == pytest.approx(2.0)
    assert cb.entries[1, 0] == pytest.approx(100.0)


def test_ema_entries_stay_finite():
    cb = make_codebook(np.array([[1.0], [2.0]]))
    for _ in range(5000):  # starve both codes
        rvq.ema_update(cb, np.array([], dtype=np.int64).reshape(0),
                       np.zeros((0, 1)), decay=0.5)
    assert np.all(np.isfinite(cb.entries))


def test_ema_bad_decay_rejected():
    cb = make_codebook(np.array([[1.0], [2.0]]))
    with pytest.raises(ValueError):
        rvq.ema_update(cb, np.array([0]), np.array([[1.0]]), decay=1.0)


# -- reinit_dead_codes ----------------------------------------------------------------


def test_reinit_leaves_live_codes_alone():
    cb = make_codebook(np.array([[1.0], [2.0]]))
    cb.usage = np.array([5.0, 9.0])
    before = cb.entries.copy()
    n = rvq.reinit_dead_codes(cb, np.array([[77.0]]), threshold=1.0,
                              rng=np.random.default_rng(0))
    assert n == 0
    assert np.array_equal(cb.entries, before)


def test_reinit_forced_choice_and_stat_reset():
    cb = make_codebook(np.array([[1.0], [2.0]]))
    cb.usage = np.array([5.0, 0.0])
    n = rvq.reinit_dead_codes(cb, np.array([[77.0]]), threshold=1.0,
                              rng=np.random.default_rng(0))
    assert n == 1
    assert cb.entries[1, 0] == 77.0
    assert cb.ema_counts[1] == 1.0
    assert cb.ema_sums[1, 0] == 77.0
    assert cb.entries[0, 0] == 1.0  # live code untouched


def test_reinit_deterministic_given_seed():
    batch = np.random.default_rng(3).normal(size=(50, 2))
    results = []
    for _ in range(2):
        cb = make_codebook(np.zeros((6, 2)))
        cb.usage = np.zeros(6)
        rvq.reinit_dead_codes(cb, batch, threshold=1.0,
                              rng=np.random.default_rng(42))
        results.append(cb.entries.copy())
    assert np.array_equal(results[0], results[1])


# -- networks ------------------------------------------------------------------------


def test_encoder_gradcheck_small():
    rng = np.random.default_rng(5)
    enc = rvq.ConvEncoder(2, 4, (2,), 3, 1, rng)
    assert enc.n_params() <= 1000
    x = Tensor(rng.normal(size=(1, 8, 2)))

    def loss():
        out = enc(x)
        return (out * out).sum()

    assert gradcheck(loss, enc.parameters()) < 1e-4


def test_decoder_gradcheck_small():
    rng = np.random.default_rng(6)
    dec = rvq.ConvDecoder(2, 4, (2,), 3, 1, rng)
    assert dec.n_params() <= 1000
    x = Tensor(rng.normal(size=(1, 4, 4)))

    def loss():
        out = dec(x)
        return (out * out).sum()

    assert gradcheck(loss, dec.parameters()) < 1e-4


def test_zero_network_maps_zero_to_zero():
    rng = np.random.default_rng(0)
    enc = rvq.ConvEncoder(3, 8, (2, 2, 2), 3, 2, rng)
    for p in enc.parameters():
        p.data = np.zeros_like(p.data)
    with ad.no_grad():
        out = enc(Tensor(np.zeros((1, 16, 3))))
    assert np.all(out.data == 0.0)


def test_encoder_shapes_and_determinism():
    rng = np.random.default_rng(1)
    enc = rvq.ConvEncoder(5, 8, (2, 2, 2), 3, 1, rng)
    x = np.random.default_rng(2).normal(size=(2, 64, 5))
    with ad.no_grad():
        a = enc(Tensor(x)).data
        b = enc(Tensor(x)).data
    assert a.shape == (2, 8, 8)
    assert np.array_equal(a, b)


def test_decoder_mirrors_shape():
    rng = np.random.default_rng(1)
    dec = rvq.ConvDecoder(5, 8, (2, 2, 2), 3, 1, rng)
    with ad.no_grad():
        out = dec(Tensor(np.random.default_rng(2).normal(size=(2, 8, 8)))).data
    assert out.shape == (2, 64, 5)


# -- toy training ------------------------------------------------------------------------


def constant_clip(skeleton, rng, n_frames=64, fps=30.0):
    """One frozen pose held for n_frames (a single cluster in feature space)."""
    n_rot = len(skeleton.rotated_joints)
    q = rng.normal(size=(1, n_rot, 4))
    q = quat_canonical(q / np.linalg.norm(q, axis=-1, keepdims=True))
    quats = np.repeat(q, n_frames, axis=0)
    root = np.tile(rng.normal(size=(1, 3)), (n_frames, 1))
    return MotionClip(skeleton=skeleton, fps=fps, root_pos=root, quats=quats)


def toy_config(**overrides):
    base = dict(codebook_size=8, latent_channels=16, depth=1, downsample=8,
                commitment_weight=0.25, ema_decay=0.99, dead_code_threshold=1.0,
                dead_code_interval=100, attn_blocks=1, learning_rate=1e-3,
                weight_decay=0.01, warmup_frac=0.05, total_steps=400,
                batch_sequences=4, batch_frames=32)
    base.update(overrides)
    return rvq.RvqConfig(**base)


@pytest.fixture(scope="module")
def toy_setup():
    skeleton = build_chain_skeleton()
    layout = default_layout(skeleton)
    rng = np.random.default_rng(11)
    clips = [constant_clip(skeleton, rng) for _ in range(4)]
    corpus = [clip_to_features(c, layout) for c in clips]
    return skeleton, layout, clips, corpus


@pytest.fixture(scope="module")
def toy_model(toy_setup):
    skeleton, _, clips, corpus = toy_setup
    model, log = rvq.train_rvq(corpus, toy_config(), seed=0, skeleton=skeleton)
    return model, log, clips, corpus


def test_toy_training_reduces_loss(toy_model):
    _, log, _, _ = toy_model
    assert log[-1]["rec"] < log[0]["rec"]
    assert log[-1]["rec"] < 0.05


def test_toy_training_deterministic(toy_setup):
    skeleton, _, _, corpus = toy_setup
    cfg = toy_config(total_steps=40)
    runs = [rvq.train_rvq(corpus, cfg, seed=9, skeleton=skeleton) for _ in range(2)]
    assert runs[0][1][-1] == runs[1][1][-1]
    assert np.array_equal(runs[0][0].codebooks[0].entries,
                          runs[1][0].codebooks[0].entries)
    a = runs[0][0].encoder.state_dict()
    b = runs[1][0].encoder.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_non_finite_loss_aborts_with_step():
    rng = np.random.default_rng(0)
    enc = rvq.ConvEncoder(2, 4, (2,), 3, 0, rng)
    dec = rvq.ConvDecoder(2, 4, (2,), 3, 0, rng)
    books = [rvq.Codebook.from_entries(rng.normal(size=(4, 4)))]

    def bad_batch(r):
        out = np.ones((1, 8, 2))
        out[0, 0, 0] = np.nan
        return out

    with pytest.raises(GesticulateError, match="step 0"):
        rvq.train_quantizer_core(
            enc, dec, books, bad_batch, commitment_weight=0.25, ema_decay=0.99,
            dead_code_threshold=1.0, dead_code_interval=100, learning_rate=1e-3,
            weight_decay=0.0, warmup_steps=1, total_steps=3,
            rng=np.random.default_rng(1))


def test_empty_corpus_rejected(toy_setup):
    skeleton = toy_setup[0]
    with pytest.raises(ValueError):
        rvq.train_rvq([], toy_config(), seed=0, skeleton=skeleton)


def test_training_log_csv_columns(tmp_path, toy_model):
    _, log, _, _ = toy_model
    path = tmp_path / "log.csv"
    rvq.write_training_log(str(path), log)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,rec,commit,usage_entropy_l1"
    assert len(lines) == len(log) + 1
    first = lines[1].split(",")
    assert first[0] == "0"
    assert float(first[1]) == log[0]["rec"]


# -- tokenize / detokenize --------------------------------------------------------------


def test_token_shapes_64_frames(toy_setup):
    skeleton, layout, clips, corpus = toy_setup
    cfg = toy_config(depth=4, total_steps=8)
    model, _ = rvq.train_rvq(corpus, cfg, seed=1, skeleton=skeleton)
    tokens = rvq.tokenize(model, clips[0])
    assert tokens.codes.shape == (8, 4)
    assert tokens.fps_latent == pytest.approx(30.0 / 8)
    assert np.array_equal(tokens.root_start, clips[0].root_pos[0])


def test_tokenize_fps_mismatch_rejected(toy_model):
    model, _, clips, _ = toy_model
    clip = clips[0]
    wrong = MotionClip(skeleton=clip.skeleton, fps=25.0,
                       root_pos=clip.root_pos, quats=clip.quats)
    with pytest.raises(GesticulateError, match="fps"):
        rvq.tokenize(model, wrong)


def test_detokenize_out_of_range_code_rejected(toy_model):
    model, _, clips, _ = toy_model
    tokens = rvq.tokenize(model, clips[0])
    bad = rvq.MotionTokens(codes=tokens.codes.copy(), fps_latent=tokens.fps_latent,
                           root_start=tokens.root_start, n_frames=tokens.n_frames)
    bad.codes[0, 0] = model.cfg.codebook_size
    with pytest.raises(GesticulateError, match="range"):
        rvq.detokenize(model, bad)


def test_padding_stored_and_stripped(toy_model):
    model, _, clips, _ = toy_model
    short = MotionClip(skeleton=clips[0].skeleton, fps=clips[0].fps,
                       root_pos=clips[0].root_pos[:50], quats=clips[0].quats[:50])
    tokens = rvq.tokenize(model, short)
    assert tokens.codes.shape[0] == 7  # ceil(50 / 8)
    assert tokens.n_frames == 50
    back = rvq.detokenize(model, tokens)
    assert back.root_pos.shape == (50, 3)
    assert back.quats.shape[0] == 50
    assert back.fps == short.fps


def test_round_trip_reconstructs_training_pose(toy_model):
    model, _, clips, corpus = toy_model
    back = rvq.detokenize(model, rvq.tokenize(model, clips[0]))
    orig = corpus[0].data
    recon = clip_to_features(back, model.layout).data
    err = np.mean((orig - recon) ** 2) / max(np.mean(orig ** 2), 1e-12)
    assert err < 0.1


def test_tokenize_idempotent_on_reconstruction(toy_model):
    model, _, clips, _ = toy_model
    tokens = rvq.tokenize(model, clips[0])
    again = rvq.tokenize(model, rvq.detokenize(model, tokens))
    assert np.array_equal(tokens.codes, again.codes)


def test_active_codes_cover_poses(toy_model):
    model, _, clips, _ = toy_model
    seen = set()
    for clip in clips:
        seen.update(rvq.tokenize(model, clip).codes[:, 0].tolist())
    assert len(seen) >= 2


# -- multi-level invariants ------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_model_l2(toy_setup):
    skeleton, _, _, corpus = toy_setup
    cfg = toy_config(depth=2, total_steps=300)
    model, log = rvq.train_rvq(corpus, cfg, seed=2, skeleton=skeleton)
    return model, log, corpus


def test_residual_norms_non_increasing(toy_model_l2):
    model, _, corpus = toy_model_l2
    from gesticulate.motion_features import apply_normalization
    data = apply_normalization(corpus[0], model.norm, "forward").data
    latents = model.encode(data)
    _, _, residuals = rvq.quantize_residual(latents, model.codebooks)
    norms = [np.linalg.norm(r, axis=1).mean() for r in residuals]
    assert norms[1] <= norms[0]
    assert norms[2] <= norms[1]


def test_every_level_has_active_codes(toy_model_l2):
    model, _, corpus = toy_model_l2
    from gesticulate.motion_features import apply_normalization
    for level in range(model.depth):
        seen = set()
        for seq in corpus:
            data = apply_normalization(seq, model.norm, "forward").data
            codes, _, _ = rvq.quantize_residual(model.encode(data),
                                                model.codebooks)
            seen.update(codes[:, level].tolist())
        assert len(seen) >= 2, f"level {level} collapsed"


def test_deeper_truncation_not_worse(toy_model_l2):
    model, _, corpus = toy_model_l2
    full = np.mean([rvq.reconstruction_mse(model, s) for s in corpus])
    trunc = np.mean([rvq.reconstruction_mse(model, s, depth=1) for s in corpus])
    assert full <= trunc + 1e-12


# -- persistence ----------------------------------------------------------------------


def test_save_load_round_trip(tmp_path, toy_model):
    model, _, clips, _ = toy_model
    path = str(tmp_path / "model.rvq")
    rvq.save_rvq(model, path)
    loaded = rvq.load_rvq(path)
    assert loaded.cfg == model.cfg
    assert loaded.layout == model.layout
    assert loaded.fps == model.fps
    assert np.array_equal(loaded.codebooks[0].entries, model.codebooks[0].entries)
    a = rvq.detokenize(model, rvq.tokenize(model, clips[1]))
    b = rvq.detokenize(loaded, rvq.tokenize(loaded, clips[1]))
    assert np.array_equal(a.root_pos, b.root_pos)
    assert np.array_equal(a.quats, b.quats)


def test_save_is_byte_deterministic(tmp_path, toy_model):
    model = toy_model[0]
    p1, p2 = str(tmp_path / "a.rvq"), str(tmp_path / "b.rvq")
    rvq.save_rvq(model, p1)
    rvq.save_rvq(model, p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_load_rejects_wrong_tag(tmp_path, toy_model):
    from gesticulate.archive import save_archive
    from gesticulate.exceptions import FormatError
    path = str(tmp_path / "bogus.rvq")
    save_archive(path, "other-v1", {"x": 1}, {})
    with pytest.raises(FormatError):
        rvq.load_rvq(path)
