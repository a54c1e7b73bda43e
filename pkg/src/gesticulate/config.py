"""Flat key=value run configuration: defaults, file parsing, hashing.

Config files are plain text, one `section.key = value` per line, with `#`
comments. Unknown keys are rejected so typos fail loudly. Every artifact
embeds the sha256 hash of the fully resolved configuration.
"""

from __future__ import annotations

import hashlib

from .exceptions import ConfigError

DEFAULTS: dict[str, object] = {
    # global
    "seed": 0,
    "fps": 30.0,                      # working frame rate all clips resample to
    # motion tokenizer
    "rvq.codebook_size": 64,          # desk-scale; raise for real corpora
    "rvq.latent_channels": 64,
    "rvq.depth": 4,
    "rvq.downsample": 8,
    "rvq.commitment_weight": 0.25,
    "rvq.ema_decay": 0.99,
    "rvq.dead_code_threshold": 1.0,
    "rvq.dead_code_interval": 100,
    "rvq.attn_blocks": 2,
    "rvq.learning_rate": 2e-4,
    "rvq.weight_decay": 0.01,
    "rvq.warmup_frac": 0.05,
    "rvq.total_steps": 2000,
    "rvq.batch_sequences": 8,
    "rvq.batch_frames": 64,
    # audio features + audio tokenizer
    "audio.sample_rate": 16000,
    "audio.frame_ms": 40.0,
    "audio.hop_ms": 20.0,
    "audio.n_mels": 40,
    "audio.n_coeffs": 13,
    "audio.codebook_size": 64,
    "audio.depth": 2,
    "audio.latent_channels": 16,
    "audio.commitment_weight": 0.25,
    "audio.ema_decay": 0.99,
    "audio.dead_code_threshold": 1.0,
    "audio.dead_code_interval": 100,
    "audio.learning_rate": 2e-4,
    "audio.weight_decay": 0.01,
    "audio.warmup_frac": 0.05,
    "audio.total_steps": 1000,
    "audio.batch_frames": 256,
    # token language model
    "lm.layers": 4,
    "lm.heads": 4,
    "lm.width": 128,
    "lm.context": 1024,
    "lm.learning_rate": 2e-5,
    "lm.weight_decay": 0.01,
    "lm.warmup_frac": 0.05,
    "lm.epochs": 3,
    "lm.batch_size": 8,
    "lm.top_k": 8,
    "lm.temperature": 0.9,
    "lm.max_len_factor": 1.2,
    # evaluation
    "metrics.window": 30,
    "metrics.sigma": 0.1,
    "metrics.ridge": 1e-6,
    "metrics.latent_dim": 32,
    "metrics.ae_hidden": 128,
    "metrics.ae_steps": 1500,
    "metrics.ae_learning_rate": 1e-3,
    "metrics.ae_weight_decay": 0.0,
    # foot-contact post-processing
    "feet.height_threshold": 5.0,
    "feet.speed_threshold": 5.0,
    "feet.blend_window": 3,
    "feet.substrings": "Foot,Toe",
    # synthetic corpus generator
    "synth.n_clips": 10,
    "synth.seconds": 12.0,
    "synth.beat_hz": 2.0,
    "synth.test_fraction": 0.2,
}


def _parse_value(text: str, default: object) -> object:
    """Parse with the default's type; ints stay ints, floats stay floats."""
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}") from None
    return text


def parse_config_text(text: str) -> dict[str, object]:
    """Merge `key = value` lines over DEFAULTS; unknown keys are errors."""
    cfg = dict(DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            cfg[key] = _parse_value(value, DEFAULTS[key])
        except ConfigError as err:
            raise ConfigError(f"config line {lineno}: {key}: {err}") from None
    return cfg


def load_config(path: str | None) -> dict[str, object]:
    if path is None:
        return dict(DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def resolved_text(cfg: dict[str, object]) -> str:
    """Canonical rendering: sorted keys, repr values (round-trip exact)."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict[str, object]) -> str:
    return hashlib.sha256(resolved_text(cfg).encode("utf-8")).hexdigest()


def section(cfg: dict[str, object], prefix: str) -> dict[str, object]:
    """Sub-dict of one section with the `prefix.` stripped from keys."""
    dot = prefix + "."
    return {k[len(dot):]: v for k, v in cfg.items() if k.startswith(dot)}
