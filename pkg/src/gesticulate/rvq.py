"""Residual vector-quantized motion tokenizer.

Encoder: strided 1-D convolutions (stride-2 each) plus self-attention
blocks; decoder mirrors with nearest-neighbor upsampling. Quantization is
per latent timestep through a stack of codebooks: each level quantizes the
residual left by the levels before it, summed in level order so
`latents - quantized == final residual` holds bitwise. Codebooks train by
exponential moving averages with Laplace smoothing; codes that fall idle
are re-seeded from batch latents.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad, kernels, nn
from .archive import load_archive, save_archive
from .autodiff import Tensor
from .exceptions import GesticulateError
from .motion_features import (FeatureLayout, FeatureSequence, NormStats,
                              apply_normalization, clip_to_features,
                              compute_norm_stats, features_to_clip)
from .motion_io import MotionClip, Skeleton

FORMAT_TAG = "rvq-v1"
EMA_EPS = 1e-5


@dataclass
class RvqConfig:
    codebook_size: int = 64
    latent_channels: int = 64
    depth: int = 4
    downsample: int = 8
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    dead_code_threshold: float = 1.0
    dead_code_interval: int = 100
    attn_blocks: int = 2
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    total_steps: int = 2000
    batch_sequences: int = 8
    batch_frames: int = 64

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.commitment_weight <= 0:
            raise ValueError("commitment_weight must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.dead_code_threshold < 1:
            raise ValueError("dead_code_threshold must be >= 1")
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ValueError("downsample must be a power of two")
        if self.batch_frames % self.downsample != 0:
            raise ValueError("batch_frames must be divisible by downsample")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def strides(self) -> tuple[int, ...]:
        return (2,) * int(math.log2(self.downsample))

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_frac * self.total_steps))


@dataclass
class Codebook:
    entries: np.ndarray      # (K, C)
    ema_counts: np.ndarray   # (K,)
    ema_sums: np.ndarray     # (K, C)
    usage: np.ndarray        # (K,) hits in the current monitoring window

    @classmethod
    def from_entries(cls, entries: np.ndarray) -> "Codebook":
        entries = np.asarray(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ValueError("codebook needs a (K>=2, C) entry matrix")
        return cls(entries=entries.copy(),
                   ema_counts=np.ones(entries.shape[0]),
                   ema_sums=entries.copy(),
                   usage=np.zeros(entries.shape[0]))

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass
class MotionTokens:
    codes: np.ndarray        # (S, L) ints in [0, K)
    fps_latent: float
    root_start: np.ndarray   # (3,)
    n_frames: int | None = None   # original frame count before padding

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.root_start = np.asarray(self.root_start, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ValueError(f"codes must be (S>=1, L), got {self.codes.shape}")
        if self.fps_latent <= 0:
            raise ValueError("fps_latent must be positive")
        if self.root_start.shape != (3,):
            raise ValueError("root_start must be a 3-vector")


# -- quantization ---------------------------------------------------------------

def _quantize_levels(latents: np.ndarray, codebooks: list[Codebook]):
    """Residual quantization with level-ordered partial sums.

    Returns codes (S, L), partial sums [Q_1..Q_L], residuals [e_1..e_{L+1}]
    where e_{l+1} = latents - Q_l, so the telescoping identity is bitwise.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise ValueError(f"latents must be (S, C), got {latents.shape}")
    if not codebooks:
        raise ValueError("need at least one codebook")
    S = latents.shape[0]
    codes = np.empty((S, len(codebooks)), dtype=np.int64)
    partials: list[np.ndarray] = []
    residuals: list[np.ndarray] = [latents]
    running = np.zeros_like(latents)
    for l, cb in enumerate(codebooks):
        if cb.entries.shape[1] != latents.shape[1]:
            raise ValueError(f"codebook {l} channel count != latent channels")
        codes[:, l] = kernels.nearest_codes(residuals[-1], cb.entries)
        running = running + cb.entries[codes[:, l]]
        partials.append(running)
        residuals.append(latents - running)
    return codes, partials, residuals


def quantize_residual(latents: np.ndarray, codebooks: list[Codebook]):
    """(codes S×L, quantized S×C, residuals [e_1..e_{L+1}]).

    latents - quantized equals residuals[-1] exactly (level-ordered sums);
    nearest-entry ties go to the lowest index.
    """
    codes, partials, residuals = _quantize_levels(latents, codebooks)
    return codes, partials[-1], residuals


def chosen_entries(codebooks: list[Codebook], codes: np.ndarray) -> np.ndarray:
    """Selected codebook rows per level: (S, L, C)."""
    codes = np.asarray(codes)
    return np.stack([cb.entries[codes[:, l]] for l, cb in enumerate(codebooks)], axis=1)


def rvq_loss(m: np.ndarray, m_bar: np.ndarray, residuals: list[np.ndarray],
             quantized_per_level: np.ndarray, beta: float):
    """(total, rec, commit, codebook_terms) — the Eq. set used for logging.

    rec is the element mean squared error; commit is beta * sum over levels
    of the mean squared residual-to-entry distance (stop-gradient on the
    entry); the codebook terms carry the same distances, reported per level
    because entries are trained by EMA rather than this gradient.
    """
    m = np.asarray(m, dtype=np.float64)
    m_bar = np.asarray(m_bar, dtype=np.float64)
    if m.shape != m_bar.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {m_bar.shape}")
    quantized_per_level = np.asarray(quantized_per_level, dtype=np.float64)
    L = quantized_per_level.shape[1]
    if len(residuals) != L + 1:
        raise ValueError(f"expected {L + 1} residuals for {L} levels, got {len(residuals)}")
    rec = float(np.mean((m - m_bar) ** 2))
    codebook_terms = []
    for l in range(L):
        q_l = quantized_per_level[:, l, :]
        codebook_terms.append(float(np.mean((residuals[l] - q_l) ** 2)))
    commit = beta * float(np.sum(codebook_terms))
    total = rec + commit
    return total, rec, commit, codebook_terms


def ema_update(codebook: Codebook, codes: np.ndarray, latents: np.ndarray,
               decay: float):
    """EMA codebook step: counts and sums decay toward this batch's stats;
    entries = sums / max(counts, 1e-5) (Laplace smoothing)."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0, 1)")
    hits, sums = kernels.code_stats(codes, latents, codebook.size)
    codebook.ema_counts = decay * codebook.ema_counts + (1.0 - decay) * hits
    codebook.ema_sums = decay * codebook.ema_sums + (1.0 - decay) * sums
    codebook.entries = codebook.ema_sums / np.maximum(
        codebook.ema_counts, EMA_EPS)[:, None]


def reinit_dead_codes(codebook: Codebook, batch_latents: np.ndarray,
                      threshold: float, rng: np.random.Generator):
    """Replace codes with window usage < threshold by random batch latents,
    resetting their EMA stats (count = 1, sum = the new entry)."""
    batch_latents = np.asarray(batch_latents, dtype=np.float64)
    if batch_latents.shape[0] < 1:
        raise ValueError("need a nonempty batch to re-seed dead codes")
    dead = np.flatnonzero(codebook.usage < threshold)
    if dead.size:
        picks = rng.integers(0, batch_latents.shape[0], size=dead.size)
        codebook.entries[dead] = batch_latents[picks]
        codebook.ema_counts[dead] = 1.0
        codebook.ema_sums[dead] = codebook.entries[dead]
    return dead.size


def usage_entropy(hits: np.ndarray) -> float:
    """Natural-log entropy of a code-usage histogram."""
    total = hits.sum()
    if total <= 0:
        return 0.0
    p = hits[hits > 0] / total
    return float(-(p * np.log(p)).sum())


# -- networks ---------------------------------------------------------------------

def _heads_for(width: int) -> int:
    for h in (4, 2, 1):
        if width % h == 0:
            return h
    return 1


class ConvEncoder(nn.Module):
    """Conv stem -> stride-2 conv stack -> attention blocks -> conv head."""

    def __init__(self, in_dim: int, width: int, strides: tuple[int, ...],
                 kernel: int, attn_blocks: int, rng: np.random.Generator):
        self.inp = nn.Conv1d(in_dim, width, kernel, 1, rng)
        self.downs = [nn.Conv1d(width, width, 2 * s, s, rng) for s in strides]
        self.blocks = [nn.TransformerBlock(width, _heads_for(width), rng)
                       for _ in range(attn_blocks)]
        self.out = nn.Conv1d(width, width, kernel, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = nn.gelu(self.inp(x))
        for conv in self.downs:
            h = nn.gelu(conv(h))
        for block in self.blocks:
            h = block(h)
        return self.out(h)


class ConvDecoder(nn.Module):
    """Mirror of ConvEncoder: attention, nearest-neighbor upsample + conv."""

    def __init__(self, out_dim: int, width: int, strides: tuple[int, ...],
                 kernel: int, attn_blocks: int, rng: np.random.Generator):
        self.inp = nn.Conv1d(width, width, kernel, 1, rng)
        self.blocks = [nn.TransformerBlock(width, _heads_for(width), rng)
                       for _ in range(attn_blocks)]
        up_kernel = kernel if kernel % 2 == 1 else kernel + 1
        self.ups = [nn.Conv1d(width, width, up_kernel, 1, rng)
                    for _ in strides]
        self.factors = tuple(reversed(strides))
        self.out = nn.Conv1d(width, out_dim, kernel, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = nn.gelu(self.inp(x))
        for block in self.blocks:
            h = block(h)
        for factor, conv in zip(self.factors, self.ups):
            h = nn.gelu(conv(ad.repeat_time(h, factor)))
        return self.out(h)


# -- model ------------------------------------------------------------------------

@dataclass
class RvqModel:
    encoder: ConvEncoder
    decoder: ConvDecoder
    codebooks: list[Codebook]
    cfg: RvqConfig
    layout: FeatureLayout
    norm: NormStats
    skeleton: Skeleton
    fps: float
    config_hash: str = ""

    @property
    def depth(self) -> int:
        return len(self.codebooks)

    @property
    def downsample(self) -> int:
        return self.cfg.downsample

    def encode(self, features: np.ndarray) -> np.ndarray:
        """Normalized (T, D) features -> (T/downsample, C) latents."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.layout.dim:
            raise ValueError(
                f"features must be (T, {self.layout.dim}), got {features.shape}")
        if features.shape[0] % self.cfg.downsample != 0:
            raise ValueError("frame count must be a multiple of downsample")
        with ad.no_grad():
            out = self.encoder(Tensor(features[None]))
        return out.data[0]

    def decode(self, quantized: np.ndarray) -> np.ndarray:
        """(S, C) quantized latents -> normalized (S*downsample, D) features."""
        quantized = np.asarray(quantized, dtype=np.float64)
        if quantized.ndim != 2 or quantized.shape[1] != self.cfg.latent_channels:
            raise ValueError(
                f"latents must be (S, {self.cfg.latent_channels}), got {quantized.shape}")
        with ad.no_grad():
            out = self.decoder(Tensor(quantized[None]))
        return out.data[0]


def build_rvq_model(cfg: RvqConfig, layout: FeatureLayout, norm: NormStats,
                    skeleton: Skeleton, fps: float, rng: np.random.Generator,
                    config_hash: str = "") -> RvqModel:
    encoder = ConvEncoder(layout.dim, cfg.latent_channels, cfg.strides, 3,
                          cfg.attn_blocks, rng)
    decoder = ConvDecoder(layout.dim, cfg.latent_channels, cfg.strides, 3,
                          cfg.attn_blocks, rng)
    entries = rng.normal(0.0, 1.0, size=(cfg.depth, cfg.codebook_size,
                                         cfg.latent_channels))
    codebooks = [Codebook.from_entries(entries[l]) for l in range(cfg.depth)]
    return RvqModel(encoder=encoder, decoder=decoder, codebooks=codebooks,
                    cfg=cfg, layout=layout, norm=norm, skeleton=skeleton,
                    fps=fps, config_hash=config_hash)


# -- shared VQ training loop ---------------------------------------------------------

def train_quantizer_core(encoder: nn.Module, decoder: nn.Module,
                         codebooks: list[Codebook], sample_batch,
                         *, commitment_weight: float, ema_decay: float,
                         dead_code_threshold: float, dead_code_interval: int,
                         learning_rate: float, weight_decay: float,
                         warmup_steps: int, total_steps: int,
                         rng: np.random.Generator) -> list[dict]:
    """Gradient steps on rec+commit with EMA codebooks and dead-code reseeding.

    sample_batch(rng) must yield a float64 (B, T, D) array. Codebooks are
    (re)initialized from the first batch's latent residuals. Returns one log
    row per step: {step, rec, commit, entropy: [per level]}.
    """
    params = encoder.parameters() + decoder.parameters()
    opt = nn.AdamW(params, lr=learning_rate, weight_decay=weight_decay)
    beta = commitment_weight
    L = len(codebooks)

    first = sample_batch(rng)
    B, T, D = first.shape
    with ad.no_grad():
        latents0 = encoder(Tensor(first)).data.reshape(-1, codebooks[0].entries.shape[1])
    residual = latents0
    for cb in codebooks:
        k = cb.size
        picks = rng.integers(0, residual.shape[0], size=k)
        cb.entries = residual[picks].copy()
        cb.ema_counts = np.ones(k)
        cb.ema_sums = cb.entries.copy()
        cb.usage = np.zeros(k)
        codes_l = kernels.nearest_codes(residual, cb.entries)
        residual = residual - cb.entries[codes_l]

    log: list[dict] = []
    for step in range(total_steps):
        batch = sample_batch(rng)
        x = Tensor(batch)
        latents = encoder(x)
        Bc, S, C = latents.shape
        flat = ad.reshape(latents, (Bc * S, C))
        codes, partials, residuals = _quantize_levels(flat.data, codebooks)

        # straight-through: decoder sees quantized values, encoder gets the grads
        quantized = partials[-1]
        dec_in = ad.reshape(flat + Tensor(quantized - flat.data), (Bc, S, C))
        recon = decoder(dec_in)
        diff = recon - x
        rec = (diff * diff).mean()
        commit = rec * 0.0
        for partial in partials:
            delta = flat - Tensor(partial)
            commit = commit + (delta * delta).mean()
        commit = commit * beta
        total = rec + commit
        if not np.isfinite(total.data):
            raise GesticulateError(f"non-finite loss at step {step}")

        opt.zero_grad()
        total.backward()
        opt.step(nn.cosine_warmup_scale(step, total_steps, warmup_steps))

        entropies = []
        for l, cb in enumerate(codebooks):
            ema_update(cb, codes[:, l], residuals[l], ema_decay)
            hits, _ = kernels.code_stats(codes[:, l], residuals[l], cb.size)
            cb.usage += hits
            entropies.append(usage_entropy(hits))

        if dead_code_interval > 0 and (step + 1) % dead_code_interval == 0:
            for l, cb in enumerate(codebooks):
                reinit_dead_codes(cb, residuals[l], dead_code_threshold, rng)
                cb.usage[:] = 0.0

        log.append({"step": step, "rec": float(rec.data),
                    "commit": float(commit.data), "entropy": entropies})
    return log


def write_training_log(path: str, log: list[dict]):
    """CSV with columns step,rec,commit,usage_entropy_l1..lL."""
    if not log:
        raise ValueError("empty training log")
    depth = len(log[0]["entropy"])
    header = "step,rec,commit," + ",".join(
        f"usage_entropy_l{l + 1}" for l in range(depth))
    lines = [header]
    for row in log:
        lines.append(",".join(
            [str(row["step"]), repr(row["rec"]), repr(row["commit"])]
            + [repr(e) for e in row["entropy"]]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def train_rvq(corpus: list[FeatureSequence], cfg: RvqConfig, seed: int,
              skeleton: Skeleton, config_hash: str = "") -> tuple[RvqModel, list[dict]]:
    """Train the motion tokenizer on unnormalized feature sequences."""
    if not corpus:
        raise ValueError("corpus is empty")
    layout = corpus[0].layout
    fps = corpus[0].fps
    for seq in corpus:
        if seq.layout != layout:
            raise ValueError("corpus sequences disagree on feature layout")
        if abs(seq.fps - fps) > 1e-9:
            raise ValueError("corpus sequences disagree on fps")

    rng = np.random.default_rng(seed)
    norm = compute_norm_stats(corpus)
    normalized = [apply_normalization(s, norm, "forward").data for s in corpus]
    model = build_rvq_model(cfg, layout, norm, skeleton, fps, rng,
                            config_hash=config_hash)

    def sample_batch(r: np.random.Generator) -> np.ndarray:
        out = np.empty((cfg.batch_sequences, cfg.batch_frames, layout.dim))
        for i in range(cfg.batch_sequences):
            seq = normalized[r.integers(len(normalized))]
            if seq.shape[0] >= cfg.batch_frames:
                start = r.integers(seq.shape[0] - cfg.batch_frames + 1)
                out[i] = seq[start:start + cfg.batch_frames]
            else:
                reps = int(np.ceil(cfg.batch_frames / seq.shape[0]))
                out[i] = np.tile(seq, (reps, 1))[:cfg.batch_frames]
        return out

    log = train_quantizer_core(
        model.encoder, model.decoder, model.codebooks, sample_batch,
        commitment_weight=cfg.commitment_weight, ema_decay=cfg.ema_decay,
        dead_code_threshold=cfg.dead_code_threshold,
        dead_code_interval=cfg.dead_code_interval,
        learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_steps, total_steps=cfg.total_steps, rng=rng)
    return model, log


# -- tokenize / detokenize -------------------------------------------------------------

def tokenize(model: RvqModel, clip: MotionClip) -> MotionTokens:
    """normalize -> encode -> quantize; frames right-padded (last frame
    repeated) to a multiple of downsample, with the true count recorded."""
    if abs(clip.fps - model.fps) > 1e-6:
        raise GesticulateError(
            f"clip fps {clip.fps:.6g} != model fps {model.fps:.6g}; resample first")
    feats = clip_to_features(clip, model.layout)
    data = apply_normalization(feats, model.norm, "forward").data
    T = data.shape[0]
    ds = model.cfg.downsample
    pad = (-T) % ds
    if pad:
        data = np.concatenate([data, np.repeat(data[-1:], pad, axis=0)], axis=0)
    latents = model.encode(data)
    codes, _, _ = _quantize_levels(latents, model.codebooks)
    return MotionTokens(codes=codes, fps_latent=model.fps / ds,
                        root_start=clip.root_pos[0].copy(), n_frames=T)


def detokenize(model: RvqModel, tokens: MotionTokens) -> MotionClip:
    """lookup-sum -> decode -> denormalize -> clip (padding stripped)."""
    codes = tokens.codes
    if codes.shape[1] != model.depth:
        raise GesticulateError(
            f"tokens have {codes.shape[1]} levels, model has {model.depth}")
    for l, cb in enumerate(model.codebooks):
        level = codes[:, l]
        if level.min() < 0 or level.max() >= cb.size:
            raise GesticulateError(f"code out of range at level {l + 1}")
    quantized = np.zeros((codes.shape[0], model.cfg.latent_channels))
    for l, cb in enumerate(model.codebooks):
        quantized = quantized + cb.entries[codes[:, l]]
    data = model.decode(quantized)
    if tokens.n_frames is not None:
        if not 0 < tokens.n_frames <= data.shape[0]:
            raise GesticulateError(
                f"n_frames {tokens.n_frames} outside decoded range {data.shape[0]}")
        data = data[:tokens.n_frames]
    feats = FeatureSequence(data=data, fps=model.fps, layout=model.layout)
    denorm = apply_normalization(feats, model.norm, "inverse")
    return features_to_clip(denorm, model.skeleton, tokens.root_start)


def reconstruction_mse(model: RvqModel, features: FeatureSequence,
                       depth: int | None = None) -> float:
    """Eval-time normalized-space MSE, optionally truncating to fewer levels."""
    data = apply_normalization(features, model.norm, "forward").data
    T = data.shape[0]
    pad = (-T) % model.cfg.downsample
    if pad:
        data = np.concatenate([data, np.repeat(data[-1:], pad, axis=0)], axis=0)
    latents = model.encode(data)
    books = model.codebooks if depth is None else model.codebooks[:depth]
    _, partials, _ = _quantize_levels(latents, books)
    recon = model.decode(partials[-1])
    return float(np.mean((recon[:T] - data[:T]) ** 2))


# -- persistence ---------------------------------------------------------------------

def save_rvq(model: RvqModel, path: str):
    meta = {
        "config": asdict(model.cfg),
        "layout": model.layout.to_dict(),
        "norm": model.norm.to_dict(),
        "skeleton": model.skeleton.to_dict(),
        "fps": model.fps,
        "config_hash": model.config_hash,
    }
    arrays: dict[str, np.ndarray] = {}
    for name, value in model.encoder.state_dict().items():
        arrays[f"enc/{name}"] = value
    for name, value in model.decoder.state_dict().items():
        arrays[f"dec/{name}"] = value
    for l, cb in enumerate(model.codebooks):
        arrays[f"cb{l}/entries"] = cb.entries
        arrays[f"cb{l}/ema_counts"] = cb.ema_counts
        arrays[f"cb{l}/ema_sums"] = cb.ema_sums
    save_archive(path, FORMAT_TAG, meta, arrays)


def load_rvq(path: str) -> RvqModel:
    meta, arrays = load_archive(path, FORMAT_TAG)
    cfg = RvqConfig(**meta["config"])
    layout = FeatureLayout.from_dict(meta["layout"])
    norm = NormStats.from_dict(meta["norm"])
    skeleton = Skeleton.from_dict(meta["skeleton"])
    rng = np.random.default_rng(0)  # layouts overwritten below
    model = build_rvq_model(cfg, layout, norm, skeleton, float(meta["fps"]), rng,
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
