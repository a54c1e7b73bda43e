"""Procedural demo corpus: clip/audio/prompt triples on a small humanoid.

Each clip swings one arm in a cosine arc whose direction reversals land
exactly on the click track's beats, so audio beats and motion beats agree
by construction.  The prompt names the moving hand and the swing size
("small" or "large"), which sets the oscillation amplitude.  This gives the
whole pipeline a corpus with learnable audio->motion and text->amplitude
structure, without any licensed data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .audio import Waveform, write_wav
from .exceptions import GesticulateError
from .manifest import ManifestEntry, save_manifest
from .motion_io import Joint, MotionClip, Skeleton, write_bvh
from .rotations import quat_from_axis_angle

CLICK_AMPLITUDE = 0.8
ROOT_HEIGHT = (0.0, 90.0, 0.0)   # resting hip position, cm
SWING_DEGREES = {"small": 10.0, "large": 35.0}
AMPLITUDE_JITTER = 0.2          # per-clip relative spread within a size class
HANDS = ("left", "right")
CLIP_KINDS = tuple((hand, size) for hand in HANDS for size in SWING_DEGREES)


@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 10
    seconds: float = 12.0
    beat_hz: float = 2.0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValueError(f"n_clips must be >= 1, got {self.n_clips}")
        if self.seconds <= 0:
            raise ValueError(f"seconds must be positive, got {self.seconds}")
        if self.beat_hz <= 0:
            raise ValueError(f"beat_hz must be positive, got {self.beat_hz}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(
                f"test_fraction must be in [0, 1), got {self.test_fraction}")


def demo_skeleton() -> Skeleton:
    """Ten-joint humanoid; both feet rest about 4 cm above the ground."""
    zxy = ("Zrotation", "Xrotation", "Yrotation")
    return Skeleton(joints=(
        Joint("Hips", None, (0.0, 0.0, 0.0),
              ("Xposition", "Yposition", "Zposition") + zxy),
        Joint("Spine", 0, (0.0, 20.0, 0.0), zxy),
        Joint("LeftArm", 1, (15.0, 8.0, 0.0), zxy),
        Joint("LeftArm_End", 2, (22.0, 0.0, 0.0), (), is_end_site=True),
        Joint("RightArm", 1, (-15.0, 8.0, 0.0), zxy),
        Joint("RightArm_End", 4, (-22.0, 0.0, 0.0), (), is_end_site=True),
        Joint("LeftUpLeg", 0, (9.0, -4.0, 0.0), zxy),
        Joint("LeftFoot", 6, (0.0, -82.0, 0.0), zxy),
        Joint("LeftToe", 7, (0.0, -2.0, 12.0), zxy),
        Joint("LeftToe_End", 8, (0.0, 0.0, 5.0), (), is_end_site=True),
        Joint("RightUpLeg", 0, (-9.0, -4.0, 0.0), zxy),
        Joint("RightFoot", 10, (0.0, -82.0, 0.0), zxy),
        Joint("RightToe", 11, (0.0, -2.0, 12.0), zxy),
        Joint("RightToe_End", 12, (0.0, 0.0, 5.0), (), is_end_site=True),
    ))


def click_waveform(seconds: float, beat_hz: float, sample_rate: int = 16000,
                   amplitude: float = CLICK_AMPLITUDE) -> Waveform:
    """Click track with bipolar impulses at t = (k + 0.5) / beat_hz."""
    samples = np.zeros(int(round(seconds * sample_rate)))
    for t in click_times(seconds, beat_hz):
        i = int(round(t * sample_rate))
        if i + 1 >= samples.size:
            break
        samples[i] = amplitude
        samples[i + 1] = -2.0 * amplitude / 3.0
    return Waveform(samples=samples, sample_rate=sample_rate)


def click_times(seconds: float, beat_hz: float) -> np.ndarray:
    """The beat grid used by both the click track and the arm swings."""
    n = int(np.ceil(seconds * beat_hz)) + 1
    times = (np.arange(n) + 0.5) / beat_hz
    return times[times < seconds]


def oscillation_clip(skeleton: Skeleton, seconds: float, fps: float,
                     beat_hz: float, hand: str, amplitude_deg: float,
                     sign: float = 1.0) -> MotionClip:
    """One arm swings about z at beat_hz / 2, reversing on every beat.

    The swing angle is sign * amplitude_deg * cos(2*pi*(beat_hz/2)*(t - t0))
    with t0 the first beat, so angular speed dips to zero exactly on the
    click grid.  Everything else stays in the rest pose; the root is static.
    """
    if hand not in HANDS:
        raise GesticulateError(f"hand must be one of {HANDS}, got {hand!r}")
    joint_name = "LeftArm" if hand == "left" else "RightArm"
    slot = skeleton.rotated_joints.index(skeleton.index(joint_name))
    frames = int(round(seconds * fps))
    if frames < 2:
        raise GesticulateError(f"clip too short: {frames} frame(s)")
    t = np.arange(frames) / fps
    t0 = 0.5 / beat_hz
    angles = sign * amplitude_deg * np.cos(2.0 * np.pi * (beat_hz / 2.0) * (t - t0))
    quats = np.zeros((frames, len(skeleton.rotated_joints), 4))
    quats[..., 0] = 1.0
    for i, angle in enumerate(angles):
        quats[i, slot] = quat_from_axis_angle((0.0, 0.0, 1.0), float(angle))
    root = np.tile(np.asarray(ROOT_HEIGHT), (frames, 1))
    return MotionClip(skeleton=skeleton, fps=fps, root_pos=root, quats=quats)


def prompt_text(hand: str, size: str) -> str:
    return f"wave the {hand} hand with {size} swings"


def generate_corpus(out_dir: str, cfg: SynthConfig, fps: float = 30.0,
                    sample_rate: int = 16000, seed: int = 0) -> str:
    """Write BVH clips, click WAVs, and a manifest; returns the manifest path.

    Clips cycle through (hand, size) combinations; each clip's amplitude is
    jittered around its size class so the corpus is not four exact copies.
    The last clips become the test split (at least one stays in train).
    """
    skeleton = demo_skeleton()
    rng = np.random.default_rng(seed)
    bvh_dir = os.path.join(out_dir, "bvh")
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(bvh_dir, exist_ok=True)
    os.makedirs(wav_dir, exist_ok=True)

    n_test = int(round(cfg.n_clips * cfg.test_fraction))
    n_test = min(max(n_test, 1 if cfg.n_clips > 1 else 0), cfg.n_clips - 1)

    wav = click_waveform(cfg.seconds, cfg.beat_hz, sample_rate)
    entries: list[ManifestEntry] = []
    for i in range(cfg.n_clips):
        hand, size = CLIP_KINDS[i % len(CLIP_KINDS)]
        jitter = 1.0 + AMPLITUDE_JITTER * rng.uniform(-1.0, 1.0)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        clip = oscillation_clip(skeleton, cfg.seconds, fps, cfg.beat_hz,
                                hand, SWING_DEGREES[size] * jitter, sign)
        clip_id = f"clip_{i:02d}"
        bvh_rel = os.path.join("bvh", f"{clip_id}.bvh")
        wav_rel = os.path.join("wav", f"{clip_id}.wav")
        with open(os.path.join(out_dir, bvh_rel), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(write_bvh(clip))
        write_wav(os.path.join(out_dir, wav_rel), wav)
        entries.append(ManifestEntry(
            id=clip_id, bvh_path=bvh_rel, wav_path=wav_rel,
            prompt=prompt_text(hand, size), speaker=None,
            split="test" if i >= cfg.n_clips - n_test else "train"))

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    save_manifest(manifest_path, entries)
    return manifest_path
