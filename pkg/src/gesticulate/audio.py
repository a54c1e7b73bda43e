"""Audio front end: WAV I/O, MFCC features, onset-based beat detection,
and a framewise residual VQ that turns waveforms into discrete token grids.

The token interface (integer matrix + frame rate) is codec-agnostic, so
token streams produced elsewhere can be ingested from JSONL instead
(see manifest.load_pretokenized_audio).
"""

from __future__ import annotations

import math
import wave
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .archive import load_archive, save_archive
from .autodiff import Tensor
from .exceptions import FormatError, GesticulateError
from .rvq import (Codebook, ConvDecoder, ConvEncoder, _quantize_levels,
                  train_quantizer_core)

FORMAT_TAG = "audiovq-v1"
PRE_EMPHASIS = 0.97
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-6


# -- waveforms -----------------------------------------------------------------------

@dataclass
class Waveform:
    samples: np.ndarray   # (N,) float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-6:
            raise ValueError("samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.samples * factor, self.sample_rate)


def read_wav(path: str) -> Waveform:
    """RIFF PCM 16-bit; stereo is downmixed by averaging the channels."""
    with wave.open(path, "rb") as fh:
        if fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, "
                              f"got {8 * fh.getsampwidth()}-bit")
        if fh.getcomptype() != "NONE":
            raise FormatError(f"{path}: compressed WAV not supported")
        n_channels = fh.getnchannels()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return Waveform(samples=data, sample_rate=rate)


def write_wav(path: str, wav: Waveform):
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


def resample_wave(wav: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resample; identity (copy) at equal rates."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == wav.sample_rate:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    n_out = int(round(wav.samples.size * target_rate / wav.sample_rate))
    src_t = np.arange(wav.samples.size) / wav.sample_rate
    out_t = np.arange(n_out) / target_rate
    return Waveform(np.interp(out_t, src_t, wav.samples), target_rate)


# -- MFCC front end -------------------------------------------------------------------

def _frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Frames start every `hop` samples while the start is inside the signal;
    the tail of the last frames is zero-padded."""
    n = samples.size
    if n < frame_len:
        raise ValueError(f"waveform has {n} samples, shorter than one "
                         f"{frame_len}-sample frame")
    n_frames = 1 + (n - 1) // hop
    padded = np.concatenate([samples, np.zeros(frame_len)])
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    return padded[idx]


def _mel_of_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _hz_of_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters, mel-spaced from 0 to Nyquist."""
    points = _hz_of_mel(np.linspace(0.0, _mel_of_hz(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = points[m], points[m + 1], points[m + 2]
        up = (bins - lo) / max(mid - lo, 1e-12)
        down = (hi - bins) / max(hi - mid, 1e-12)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def _dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II rows (n_out, n_in)."""
    n = np.arange(n_in)
    k = np.arange(n_out)[:, None]
    mat = np.cos(np.pi * (2 * n[None, :] + 1) * k / (2 * n_in))
    mat *= math.sqrt(2.0 / n_in)
    mat[0] *= math.sqrt(0.5)
    return mat


def log_mel_energies(wav: Waveform, frame_ms: float = 40.0, hop_ms: float = 20.0,
                     n_mels: int = 40) -> np.ndarray:
    """(frames, n_mels) log mel magnitudes: pre-emphasis, Hann window,
    magnitude FFT, mel filterbank, log with a 1e-10 floor."""
    sr = wav.sample_rate
    frame_len = int(round(sr * frame_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    if frame_len < 2 or hop < 1:
        raise ValueError("frame and hop must span at least a couple of samples")
    emphasized = np.concatenate([wav.samples[:1],
                                 wav.samples[1:] - PRE_EMPHASIS * wav.samples[:-1]])
    frames = _frame_signal(emphasized, frame_len, hop) * np.hanning(frame_len)
    magnitude = np.abs(np.fft.rfft(frames, axis=1))
    mel = magnitude @ mel_filterbank(n_mels, frame_len, sr).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def extract_mfcc(wav: Waveform, frame_ms: float = 40.0, hop_ms: float = 20.0,
                 n_mels: int = 40, n_coeffs: int = 13) -> np.ndarray:
    """(frames, n_coeffs) cepstra: log-mel energies through an orthonormal
    DCT-II, keeping the first n_coeffs coefficients."""
    if n_coeffs > n_mels:
        raise ValueError("n_coeffs cannot exceed n_mels")
    logmel = log_mel_energies(wav, frame_ms, hop_ms, n_mels)
    return logmel @ _dct_matrix(n_coeffs, n_mels).T


# -- beats ------------------------------------------------------------------------------

@dataclass
class BeatList:
    times: np.ndarray   # seconds, strictly increasing, >= 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1:
            raise ValueError("times must be 1-D")
        if self.times.size:
            if self.times[0] < 0:
                raise ValueError("beat times must be non-negative")
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("beat times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size


MIN_BEAT_GAP_S = 0.1


def detect_beats(wav: Waveform, frame_ms: float = 40.0, hop_ms: float = 20.0,
                 n_mels: int = 40) -> BeatList:
    """Onset peaks: half-wave-rectified frame-to-frame log-mel increase,
    3-frame moving average, local maxima above mean + std, 100 ms min gap."""
    if wav.duration < 0.5:
        raise ValueError(f"need at least 0.5 s of audio, got {wav.duration:.3f} s")
    logmel = log_mel_energies(wav, frame_ms, hop_ms, n_mels)
    flux = np.zeros(logmel.shape[0])
    rise = np.clip(np.diff(logmel, axis=0), 0.0, None)
    flux[1:] = rise.sum(axis=1)
    envelope = np.convolve(flux, np.ones(3) / 3.0, mode="same")
    threshold = envelope.mean() + envelope.std()

    sr = wav.sample_rate
    frame_len = int(round(sr * frame_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    times = []
    last = -np.inf
    for i in range(1, envelope.size - 1):
        if envelope[i] <= threshold:
            continue
        if envelope[i] > envelope[i - 1] and envelope[i] >= envelope[i + 1]:
            t = (i * hop + frame_len / 2.0) / sr
            if t - last >= MIN_BEAT_GAP_S:
                times.append(t)
                last = t
    return BeatList(times=np.asarray(times))


# -- framewise residual VQ ------------------------------------------------------------------

@dataclass
class AudioTokens:
    codes: np.ndarray     # (S_a, L_a) ints in [0, K_a)
    frame_rate: float     # tokens per second

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError(f"codes must be (S>=1, L), got {self.codes.shape}")
        if self.codes.min() < 0:
            raise ValueError("codes must be non-negative")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")


@dataclass
class AudioVqConfig:
    sample_rate: int = 16000
    frame_ms: float = 40.0
    hop_ms: float = 20.0
    n_mels: int = 40
    n_coeffs: int = 13
    codebook_size: int = 64
    depth: int = 2
    latent_channels: int = 16
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    dead_code_threshold: float = 1.0
    dead_code_interval: int = 100
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    total_steps: int = 1000
    batch_frames: int = 256

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.dead_code_threshold < 1:
            raise ValueError("dead_code_threshold must be >= 1")
        if self.n_coeffs > self.n_mels:
            raise ValueError("n_coeffs cannot exceed n_mels")

    @property
    def frame_rate(self) -> float:
        return 1000.0 / self.hop_ms

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_frac * self.total_steps))


@dataclass
class AudioVqModel:
    encoder: ConvEncoder
    decoder: ConvDecoder
    codebooks: list[Codebook]
    cfg: AudioVqConfig
    mean: np.ndarray   # (n_coeffs,)
    std: np.ndarray    # (n_coeffs,)
    config_hash: str = ""

    @property
    def depth(self) -> int:
        return len(self.codebooks)

    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        """Raw (F, n_coeffs) MFCC frames -> (F, C) latents (normalizes first)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.n_coeffs:
            raise ValueError(
                f"frames must be (F, {self.cfg.n_coeffs}), got {frames.shape}")
        normed = (frames - self.mean) / self.std
        with ad.no_grad():
            out = self.encoder(Tensor(normed[None]))
        return out.data[0]

    def decode_frames(self, latents: np.ndarray) -> np.ndarray:
        """(F, C) latents -> raw (F, n_coeffs) MFCC frames (denormalizes)."""
        latents = np.asarray(latents, dtype=np.float64)
        with ad.no_grad():
            out = self.decoder(Tensor(latents[None]))
        return out.data[0] * self.std + self.mean


def build_audio_vq_model(cfg: AudioVqConfig, mean: np.ndarray, std: np.ndarray,
                         rng: np.random.Generator,
                         config_hash: str = "") -> AudioVqModel:
    # framewise nets: kernel 1, no temporal downsampling, no attention
    encoder = ConvEncoder(cfg.n_coeffs, cfg.latent_channels, (), 1, 0, rng)
    decoder = ConvDecoder(cfg.n_coeffs, cfg.latent_channels, (), 1, 0, rng)
    entries = rng.normal(0.0, 1.0, size=(cfg.depth, cfg.codebook_size,
                                         cfg.latent_channels))
    codebooks = [Codebook.from_entries(entries[l]) for l in range(cfg.depth)]
    return AudioVqModel(encoder=encoder, decoder=decoder, codebooks=codebooks,
                        cfg=cfg, mean=np.asarray(mean, dtype=np.float64),
                        std=np.asarray(std, dtype=np.float64),
                        config_hash=config_hash)


def train_audio_vq(frame_corpus: list[np.ndarray], cfg: AudioVqConfig, seed: int,
                   config_hash: str = "") -> tuple[AudioVqModel, list[dict]]:
    """Train the framewise audio quantizer on raw MFCC frame matrices."""
    if not frame_corpus:
        raise ValueError("corpus is empty")
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in frame_corpus])
    if stacked.ndim != 2 or stacked.shape[1] != cfg.n_coeffs:
        raise ValueError(f"corpus frames must be (F, {cfg.n_coeffs})")
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    normalized = (stacked - mean) / std

    rng = np.random.default_rng(seed)
    model = build_audio_vq_model(cfg, mean, std, rng, config_hash=config_hash)

    def sample_batch(r: np.random.Generator) -> np.ndarray:
        rows = r.integers(0, normalized.shape[0], size=cfg.batch_frames)
        return normalized[rows][None]

    log = train_quantizer_core(
        model.encoder, model.decoder, model.codebooks, sample_batch,
        commitment_weight=cfg.commitment_weight, ema_decay=cfg.ema_decay,
        dead_code_threshold=cfg.dead_code_threshold,
        dead_code_interval=cfg.dead_code_interval,
        learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_steps, total_steps=cfg.total_steps, rng=rng)
    return model, log


def tokenize_audio(model: AudioVqModel, wav: Waveform,
                   resample: bool = False) -> AudioTokens:
    """Waveform -> MFCC -> quantized code grid at 1000/hop_ms tokens/s."""
    if wav.sample_rate != model.cfg.sample_rate:
        if not resample:
            raise GesticulateError(
                f"waveform is {wav.sample_rate} Hz but the model expects "
                f"{model.cfg.sample_rate} Hz; pass resample=True")
        wav = resample_wave(wav, model.cfg.sample_rate)
    frames = extract_mfcc(wav, model.cfg.frame_ms, model.cfg.hop_ms,
                          model.cfg.n_mels, model.cfg.n_coeffs)
    latents = model.encode_frames(frames)
    codes, _, _ = _quantize_levels(latents, model.codebooks)
    return AudioTokens(codes=codes, frame_rate=model.cfg.frame_rate)


def audio_eval_mse(model: AudioVqModel, frames: np.ndarray,
                   depth: int | None = None) -> float:
    """Normalized-space reconstruction MSE, optionally truncating levels."""
    frames = np.asarray(frames, dtype=np.float64)
    normed = (frames - model.mean) / model.std
    latents = model.encode_frames(frames)
    books = model.codebooks if depth is None else model.codebooks[:depth]
    _, partials, _ = _quantize_levels(latents, books)
    with ad.no_grad():
        recon = model.decoder(Tensor(partials[-1][None])).data[0]
    return float(np.mean((recon - normed) ** 2))


# -- persistence ------------------------------------------------------------------------------

def save_audio_vq(model: AudioVqModel, path: str):
    meta = {"config": asdict(model.cfg), "config_hash": model.config_hash}
    arrays: dict[str, np.ndarray] = {"norm/mean": model.mean, "norm/std": model.std}
    for name, value in model.encoder.state_dict().items():
        arrays[f"enc/{name}"] = value
    for name, value in model.decoder.state_dict().items():
        arrays[f"dec/{name}"] = value
    for l, cb in enumerate(model.codebooks):
        arrays[f"cb{l}/entries"] = cb.entries
        arrays[f"cb{l}/ema_counts"] = cb.ema_counts
        arrays[f"cb{l}/ema_sums"] = cb.ema_sums
    save_archive(path, FORMAT_TAG, meta, arrays)


def load_audio_vq(path: str) -> AudioVqModel:
    meta, arrays = load_archive(path, FORMAT_TAG)
    cfg = AudioVqConfig(**meta["config"])
    model = build_audio_vq_model(cfg, arrays["norm/mean"], arrays["norm/std"],
                                 np.random.default_rng(0),
                                 config_hash=meta.get("config_hash", ""))
    model.encoder.load_state_dict(
        {k[len("enc/"):]: v for k, v in arrays.items() if k.startswith("enc/")})
    model.decoder.load_state_dict(
        {k[len("dec/"):]: v for k, v in arrays.items() if k.startswith("dec/")})
    for l, cb in enumerate(model.codebooks):
        cb.entries = arrays[f"cb{l}/entries"].astype(np.float64)
        cb.ema_counts = arrays[f"cb{l}/ema_counts"].astype(np.float64)
        cb.ema_sums = arrays[f"cb{l}/ema_sums"].astype(np.float64)
        cb.usage = np.zeros(cb.size)
    return model
