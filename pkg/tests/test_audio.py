"""Audio front end: WAV round trips, MFCC properties, beat detection on
synthetic click tracks, and the framewise quantizer's toy-corpus behavior.
"""

import numpy as np
import pytest

from gesticulate import audio
from gesticulate.audio import (AudioVqConfig, BeatList, Waveform, detect_beats,
                               extract_mfcc, read_wav, resample_wave,
                               tokenize_audio, train_audio_vq, write_wav)
from gesticulate.exceptions import FormatError, GesticulateError

SR = 16000


def sine(freq, seconds=1.0, sr=SR, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def silence(seconds=1.0, sr=SR):
    return Waveform(np.zeros(int(round(seconds * sr))), sr)


def click_track(times, seconds, sr=SR, amp=0.9):
    s = np.zeros(int(round(seconds * sr)))
    for t in times:
        i = int(round(t * sr))
        s[i] = amp
        if i + 1 < s.size:
            s[i + 1] = -2 * amp / 3
    return Waveform(s, sr)


# -- waveform type and I/O ---------------------------------------------------------


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 1.5]), SR)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 0)
    with pytest.raises(ValueError):
        Waveform(np.array([np.nan]), SR)
    assert silence(2.0).duration == pytest.approx(2.0)


def test_wav_round_trip(tmp_path):
    wav = sine(440.0)
    path = str(tmp_path / "tone.wav")
    write_wav(path, wav)
    back = read_wav(path)
    assert back.sample_rate == SR
    assert back.samples.shape == wav.samples.shape
    assert np.max(np.abs(back.samples - wav.samples)) < 1.0 / 32000


def test_stereo_downmix(tmp_path):
    import wave as wave_mod
    left = (np.sin(2 * np.pi * 220 * np.arange(SR) / SR) * 16000).astype("<i2")
    right = np.zeros(SR, dtype="<i2")
    inter = np.empty(2 * SR, dtype="<i2")
    inter[0::2], inter[1::2] = left, right
    path = str(tmp_path / "stereo.wav")
    with wave_mod.open(path, "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(SR)
        fh.writeframes(inter.tobytes())
    mono = read_wav(path)
    assert mono.samples.shape == (SR,)
    assert np.allclose(mono.samples, left / 32768.0 / 2.0, atol=1e-9)


def test_read_rejects_8_bit(tmp_path):
    import wave as wave_mod
    path = str(tmp_path / "low.wav")
    with wave_mod.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(1)
        fh.setframerate(SR)
        fh.writeframes(bytes(100))
    with pytest.raises(FormatError):
        read_wav(path)


def test_resample_changes_length_and_keeps_shape():
    wav = sine(100.0, seconds=1.0)
    down = resample_wave(wav, 8000)
    assert down.sample_rate == 8000
    assert down.samples.size == 8000
    t = np.arange(8000) / 8000
    assert np.max(np.abs(down.samples - 0.5 * np.sin(2 * np.pi * 100 * t))) < 1e-3
    same = resample_wave(wav, SR)
    assert np.array_equal(same.samples, wav.samples)
    assert same.samples is not wav.samples


# -- MFCC ----------------------------------------------------------------------------


def test_mfcc_silence_constant_frames():
    frames = extract_mfcc(silence())
    assert frames.shape[1] == 13
    assert np.allclose(frames, frames[0])


def test_mfcc_separates_octaves():
    a = extract_mfcc(sine(440.0)).mean(axis=0)
    b = extract_mfcc(sine(880.0)).mean(axis=0)
    assert np.linalg.norm(a - b) > 0.1


def test_mfcc_frame_count():
    frames = extract_mfcc(sine(440.0, seconds=1.0), frame_ms=40.0, hop_ms=20.0)
    assert abs(frames.shape[0] - 50) <= 1


def test_mfcc_too_short_rejected():
    with pytest.raises(ValueError):
        extract_mfcc(Waveform(np.zeros(100), SR))  # < one 640-sample frame


def test_dct_matches_reference():
    from scipy.fft import dct
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 40))
    ours = x @ audio._dct_matrix(13, 40).T
    ref = dct(x, type=2, norm="ortho", axis=1)[:, :13]
    assert np.allclose(ours, ref, atol=1e-12)


def test_mfcc_suffix_property():
    tone = sine(440.0, seconds=1.0)
    lead = silence(seconds=0.5)
    concat = Waveform(np.concatenate([lead.samples, tone.samples]), SR)
    all_frames = extract_mfcc(concat)
    tone_frames = extract_mfcc(tone)
    offset = 25  # 0.5 s of 20 ms hops
    n = tone_frames.shape[0]
    assert np.allclose(all_frames[offset + 2: offset + n],
                       tone_frames[2:], atol=1e-9)


# -- beats ----------------------------------------------------------------------------


def test_beats_silence_empty():
    assert len(detect_beats(silence(3.0))) == 0


def test_beats_click_track_2hz():
    times = [0.25 + 0.5 * k for k in range(10)]
    beats = detect_beats(click_track(times, seconds=5.0))
    assert abs(len(beats) - 10) <= 1
    gaps = np.diff(beats.times)
    assert np.all(np.abs(gaps - 0.5) <= 0.02)


def test_beats_single_click_at_one_second():
    beats = detect_beats(click_track([1.0], seconds=1.5))
    assert len(beats) == 1
    assert abs(beats.times[0] - 1.0) <= 0.03


def test_beats_amplitude_invariant():
    times = [0.3 + 0.4 * k for k in range(7)]
    loud = detect_beats(click_track(times, seconds=3.2, amp=0.9))
    soft = detect_beats(click_track(times, seconds=3.2, amp=0.09))
    assert len(loud) == len(soft)
    assert np.max(np.abs(loud.times - soft.times)) <= 0.02


def test_beats_too_short_rejected():
    with pytest.raises(ValueError):
        detect_beats(silence(0.4))


def test_beatlist_validation():
    with pytest.raises(ValueError):
        BeatList(times=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        BeatList(times=np.array([-0.1, 0.5]))
    assert len(BeatList(times=np.array([]))) == 0


# -- framewise VQ ------------------------------------------------------------------------


def toy_audio_config(**overrides):
    base = dict(sample_rate=SR, frame_ms=40.0, hop_ms=20.0, n_mels=40,
                n_coeffs=13, codebook_size=4, depth=1, latent_channels=8,
                commitment_weight=0.25, ema_decay=0.99, dead_code_threshold=1.0,
                dead_code_interval=100, learning_rate=1e-3, weight_decay=0.01,
                warmup_frac=0.05, total_steps=1000, batch_frames=64)
    base.update(overrides)
    return AudioVqConfig(**base)


@pytest.fixture(scope="module")
def alternating_frames():
    rng = np.random.default_rng(4)
    f1, f2 = rng.normal(size=(2, 13)) * 3.0
    return np.tile(np.stack([f1, f2]), (100, 1))


@pytest.fixture(scope="module")
def toy_audio_model(alternating_frames):
    model, log = train_audio_vq([alternating_frames], toy_audio_config(), seed=0)
    return model, log


def test_audio_vq_two_frame_corpus(toy_audio_model, alternating_frames):
    model, _ = toy_audio_model
    assert audio.audio_eval_mse(model, alternating_frames) < 1e-3


def test_audio_vq_deterministic(alternating_frames):
    cfg = toy_audio_config(total_steps=50)
    a = train_audio_vq([alternating_frames], cfg, seed=3)
    b = train_audio_vq([alternating_frames], cfg, seed=3)
    assert a[1][-1] == b[1][-1]
    assert np.array_equal(a[0].codebooks[0].entries, b[0].codebooks[0].entries)


def test_audio_vq_depth_monotone(alternating_frames):
    cfg = toy_audio_config(depth=2, total_steps=600)
    model, _ = train_audio_vq([alternating_frames], cfg, seed=1)
    full = audio.audio_eval_mse(model, alternating_frames)
    trunc = audio.audio_eval_mse(model, alternating_frames, depth=1)
    assert full <= trunc + 1e-12


def test_tokenize_audio_shapes(toy_audio_model):
    model, _ = toy_audio_model
    tokens = tokenize_audio(model, sine(300.0, seconds=1.0))
    assert tokens.codes.shape == (50, 1)
    assert tokens.frame_rate == pytest.approx(50.0)
    again = tokenize_audio(model, sine(300.0, seconds=1.0))
    assert np.array_equal(tokens.codes, again.codes)


def test_tokenize_length_independent_of_content(toy_audio_model):
    model, _ = toy_audio_model
    a = tokenize_audio(model, silence(1.3))
    rng = np.random.default_rng(0)
    noisy = Waveform(rng.uniform(-0.5, 0.5, size=int(1.3 * SR)), SR)
    b = tokenize_audio(model, noisy)
    assert a.codes.shape[0] == b.codes.shape[0]


def test_silence_collapses_to_one_code(toy_audio_model):
    model, _ = toy_audio_model
    tokens = tokenize_audio(model, silence(2.0))
    for level in range(tokens.codes.shape[1]):
        assert len(set(tokens.codes[:, level].tolist())) <= 2


def test_tokenize_sample_rate_mismatch(toy_audio_model):
    model, _ = toy_audio_model
    wav = sine(200.0, seconds=1.0, sr=8000)
    with pytest.raises(GesticulateError, match="Hz"):
        tokenize_audio(model, wav)
    tokens = tokenize_audio(model, wav, resample=True)
    assert tokens.codes.shape[0] == 50


def test_audio_vq_save_load(tmp_path, toy_audio_model, alternating_frames):
    model, _ = toy_audio_model
    path = str(tmp_path / "audio.vq")
    audio.save_audio_vq(model, path)
    loaded = audio.load_audio_vq(path)
    assert loaded.cfg == model.cfg
    wav = sine(523.0, seconds=0.8)
    assert np.array_equal(tokenize_audio(model, wav).codes,
                          tokenize_audio(loaded, wav).codes)
    audio.save_audio_vq(loaded, str(tmp_path / "again.vq"))
    with open(path, "rb") as f1, open(str(tmp_path / "again.vq"), "rb") as f2:
        assert f1.read() == f2.read()


def test_empty_audio_corpus_rejected():
    with pytest.raises(ValueError):
        train_audio_vq([], toy_audio_config(), seed=0)
