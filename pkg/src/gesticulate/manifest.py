"""Dataset manifest and token-file I/O (JSONL)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import GesticulateError

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    bvh_path: str
    wav_path: str
    prompt: str | None
    speaker: str | None
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise GesticulateError(
                f"manifest entry {self.id!r}: split must be one of {SPLITS}, "
                f"got {self.split!r}")


def load_manifest(path: str) -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as err:
                raise GesticulateError(f"{path}:{lineno}: bad JSON: {err}") from None
            try:
                entry = ManifestEntry(
                    id=str(doc["id"]),
                    bvh_path=str(doc["bvh_path"]),
                    wav_path=str(doc["wav_path"]),
                    prompt=doc.get("prompt"),
                    speaker=doc.get("speaker"),
                    split=str(doc["split"]),
                )
            except KeyError as err:
                raise GesticulateError(
                    f"{path}:{lineno}: missing manifest field {err}") from None
            if entry.id in seen:
                raise GesticulateError(f"{path}:{lineno}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    if not entries:
        raise GesticulateError(f"{path}: manifest is empty")
    return entries


def save_manifest(path: str, entries: list[ManifestEntry]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(json.dumps({
                "id": e.id,
                "bvh_path": e.bvh_path,
                "wav_path": e.wav_path,
                "prompt": e.prompt,
                "speaker": e.speaker,
                "split": e.split,
            }, sort_keys=True) + "\n")


@dataclass
class TokenRecord:
    """One clip's tokenized modalities, ready for LM training."""

    id: str
    motion_codes: np.ndarray        # (S, L) ints
    fps_latent: float
    root_start: np.ndarray          # (3,)
    n_frames: int
    audio_codes: np.ndarray         # (S_a, L_a) ints
    audio_frame_rate: float
    prompt: str | None
    speaker: str | None
    split: str


TOKENS_FORMAT = "tokens-v1"


def save_token_records(path: str, records: list[TokenRecord],
                       meta: dict | None = None):
    """JSONL: one header line {"format", ...meta}, then one line per record."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"format": TOKENS_FORMAT}
        header.update(meta or {})
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps({
                "id": r.id,
                "motion_codes": np.asarray(r.motion_codes).astype(int).tolist(),
                "fps_latent": r.fps_latent,
                "root_start": np.asarray(r.root_start).astype(float).tolist(),
                "n_frames": r.n_frames,
                "audio_codes": np.asarray(r.audio_codes).astype(int).tolist(),
                "audio_frame_rate": r.audio_frame_rate,
                "prompt": r.prompt,
                "speaker": r.speaker,
                "split": r.split,
            }, sort_keys=True) + "\n")


def load_token_records(path: str) -> tuple[dict, list[TokenRecord]]:
    """Returns (header meta, records); rejects files without the format header."""
    meta: dict | None = None
    records: list[TokenRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if meta is None:
                try:
                    header = json.loads(line)
                except json.JSONDecodeError as err:
                    raise GesticulateError(f"{path}:{lineno}: bad JSON: {err}") from None
                if not isinstance(header, dict) or header.get("format") != TOKENS_FORMAT:
                    raise GesticulateError(
                        f"{path}: not a {TOKENS_FORMAT} token file")
                meta = {k: v for k, v in header.items() if k != "format"}
                continue
            try:
                doc = json.loads(line)
                records.append(TokenRecord(
                    id=str(doc["id"]),
                    motion_codes=np.asarray(doc["motion_codes"], dtype=np.int64),
                    fps_latent=float(doc["fps_latent"]),
                    root_start=np.asarray(doc["root_start"], dtype=np.float64),
                    n_frames=int(doc["n_frames"]),
                    audio_codes=np.asarray(doc["audio_codes"], dtype=np.int64),
                    audio_frame_rate=float(doc["audio_frame_rate"]),
                    prompt=doc.get("prompt"),
                    speaker=doc.get("speaker"),
                    split=str(doc.get("split", "train")),
                ))
            except (json.JSONDecodeError, KeyError, ValueError) as err:
                raise GesticulateError(f"{path}:{lineno}: bad token record: {err}") from None
    if meta is None or not records:
        raise GesticulateError(f"{path}: no token records")
    return meta, records


def load_pretokenized_audio(path: str) -> dict[str, tuple[np.ndarray, float]]:
    """External codec tokens: JSONL of {"id", "frame_rate", "codes": [[...]]}.

    Returns id -> (codes (S_a, L_a), frame_rate).
    """
    out: dict[str, tuple[np.ndarray, float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                codes = np.asarray(doc["codes"], dtype=np.int64)
                if codes.ndim != 2:
                    raise ValueError(f"codes must be 2-D, got shape {codes.shape}")
                out[str(doc["id"])] = (codes, float(doc["frame_rate"]))
            except (json.JSONDecodeError, KeyError, ValueError) as err:
                raise GesticulateError(
                    f"{path}:{lineno}: bad pre-tokenized audio record: {err}") from None
    if not out:
        raise GesticulateError(f"{path}: no audio token records")
    return out
