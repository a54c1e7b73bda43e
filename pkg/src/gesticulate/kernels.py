"""Hot-loop kernels with a compiled core and a numpy fallback.

The Cython extension is picked automatically when it imported cleanly; set
GESTICULATE_KERNELS=python or GESTICULATE_KERNELS=compiled to force a
backend. Both backends share semantics: nearest-entry ties resolve to the
lowest index, and scatter accumulation runs in row order.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels as _ext
except ImportError:
    _ext = None


def _nearest_codes_np(latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    if latents.shape[1] != entries.shape[1]:
        raise ValueError("latents and entries disagree on channel count")
    # ||x - c||^2 expanded so the inner product runs through BLAS.
    dists = (
        (latents * latents).sum(axis=1)[:, None]
        - 2.0 * latents @ entries.T
        + (entries * entries).sum(axis=1)[None, :]
    )
    return np.argmin(dists, axis=1).astype(np.int64)


def _code_stats_np(codes: np.ndarray, latents: np.ndarray, k: int):
    if codes.shape[0] != latents.shape[0]:
        raise ValueError("codes and latents disagree on row count")
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise ValueError("code id out of range")
    counts = np.bincount(codes, minlength=k).astype(np.float64)
    sums = np.zeros((k, latents.shape[1]), dtype=np.float64)
    np.add.at(sums, codes, latents)
    return counts, sums


_forced = os.environ.get("GESTICULATE_KERNELS", "").strip().lower()
if _forced not in ("", "python", "compiled"):
    raise RuntimeError(f"GESTICULATE_KERNELS must be 'python' or 'compiled', got {_forced!r}")
if _forced == "compiled" and _ext is None:
    raise RuntimeError("GESTICULATE_KERNELS=compiled but the extension is not built")

BACKEND = "compiled" if (_ext is not None and _forced != "python") else "python"


def nearest_codes(latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the squared-distance-nearest codebook entry per latent row."""
    latents = np.ascontiguousarray(latents, dtype=np.float64)
    entries = np.ascontiguousarray(entries, dtype=np.float64)
    if entries.shape[0] == 0:
        raise ValueError("codebook has no entries")
    if BACKEND == "compiled":
        return _ext.nearest_codes(latents, entries)
    return _nearest_codes_np(latents, entries)


def code_stats(codes: np.ndarray, latents: np.ndarray, k: int):
    """Hit counts and summed latents per code, for EMA codebook updates."""
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    latents = np.ascontiguousarray(latents, dtype=np.float64)
    if BACKEND == "compiled":
        return _ext.code_stats(codes, latents, k)
    return _code_stats_np(codes, latents, k)
