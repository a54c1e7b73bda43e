"""Per-frame motion features: 6D joint rotations + root-translation deltas.

A feature row is [joint_0 sixd | joint_1 sixd | ... | root delta], one slice
per rotated joint followed by a 3-wide root block. Normalization statistics
use the population (divide-by-N) convention with the std floored at 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotations
from .motion_io import MotionClip, Skeleton, forward_kinematics

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureLayout:
    """Names of the rotated joints, in feature order; root block is last."""

    joints: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.joints)) != len(self.joints):
            raise ValueError("layout joints must be unique")
        if not self.joints:
            raise ValueError("layout needs at least one joint")

    @property
    def dim(self) -> int:
        return 6 * len(self.joints) + 3

    def block(self, joint: str) -> slice:
        i = self.joints.index(joint)
        return slice(6 * i, 6 * i + 6)

    @property
    def root_block(self) -> slice:
        return slice(6 * len(self.joints), 6 * len(self.joints) + 3)

    def to_dict(self) -> dict:
        return {"joints": list(self.joints)}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureLayout":
        return cls(joints=tuple(data["joints"]))


def default_layout(skeleton: Skeleton) -> FeatureLayout:
    """All joints with rotation channels, in skeleton order."""
    return FeatureLayout(
        joints=tuple(skeleton.joints[i].name for i in skeleton.rotated_joints))


@dataclass
class FeatureSequence:
    data: np.ndarray  # (T, D)
    fps: float
    layout: FeatureLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.layout.dim:
            raise ValueError(
                f"features must be (T, {self.layout.dim}), got {self.data.shape}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if not np.isfinite(self.data).all():
            raise ValueError("features must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D and the same shape")
        if (self.std < STD_FLOOR - 1e-18).any():
            raise ValueError(f"std components must be >= {STD_FLOOR}")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(mean=np.asarray(data["mean"]), std=np.asarray(data["std"]))


def clip_to_features(clip: MotionClip, layout: FeatureLayout) -> FeatureSequence:
    """Encode each layout joint as the first two rotation-matrix columns and
    the root as frame-to-frame translation deltas (first delta = 0)."""
    skeleton = clip.skeleton
    qi_of = {skeleton.joints[ji].name: qi
             for qi, ji in enumerate(skeleton.rotated_joints)}
    T = clip.n_frames
    out = np.zeros((T, layout.dim), dtype=np.float64)
    for name in layout.joints:
        if name not in qi_of:
            raise ValueError(f"layout joint {name!r} has no rotation channels "
                             "in this skeleton")
        m = rotations.quat_to_matrix(clip.quats[:, qi_of[name], :])
        out[:, layout.block(name)] = rotations.matrix_to_sixd(m)
    out[1:, layout.root_block] = np.diff(clip.root_pos, axis=0)
    return FeatureSequence(data=out, fps=clip.fps, layout=layout)


def features_to_clip(features: FeatureSequence, skeleton: Skeleton,
                     root_start: np.ndarray) -> MotionClip:
    """Inverse of clip_to_features: Gram-Schmidt each 6D block back into a
    rotation, integrate root deltas from root_start. Joints absent from the
    layout stay at identity."""
    layout = features.layout
    root_start = np.asarray(root_start, dtype=np.float64)
    if root_start.shape != (3,):
        raise ValueError(f"root_start must be a 3-vector, got {root_start.shape}")
    rotated = skeleton.rotated_joints
    name_to_qi = {skeleton.joints[ji].name: qi for qi, ji in enumerate(rotated)}
    T = features.n_frames
    quats = np.zeros((T, len(rotated), 4), dtype=np.float64)
    quats[..., 0] = 1.0
    for name in layout.joints:
        if name not in name_to_qi:
            raise ValueError(f"layout joint {name!r} not in skeleton")
        block = features.data[:, layout.block(name)]
        m = rotations.sixd_to_matrix(block)
        quats[:, name_to_qi[name], :] = rotations.matrix_to_quat(m)
    deltas = features.data[:, layout.root_block].copy()
    deltas[0] = 0.0
    root = root_start + np.cumsum(deltas, axis=0)
    return MotionClip(skeleton=skeleton, fps=features.fps, root_pos=root, quats=quats)


def compute_norm_stats(corpus: list[FeatureSequence]) -> NormStats:
    """Per-dimension mean/std over all frames of all sequences (population)."""
    if not corpus:
        raise ValueError("corpus is empty")
    dim = corpus[0].layout.dim
    for seq in corpus:
        if seq.layout.dim != dim:
            raise ValueError("corpus sequences disagree on feature dimension")
    stacked = np.concatenate([seq.data for seq in corpus], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def apply_normalization(seq: FeatureSequence, stats: NormStats,
                        direction: str) -> FeatureSequence:
    if stats.mean.shape[0] != seq.layout.dim:
        raise ValueError("normalization stats do not match feature dimension")
    if direction == "forward":
        data = (seq.data - stats.mean) / stats.std
    elif direction == "inverse":
        data = seq.data * stats.std + stats.mean
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return FeatureSequence(data=data, fps=seq.fps, layout=seq.layout)


@dataclass(frozen=True)
class FootContactParams:
    height_threshold: float = 5.0   # cm above ground
    speed_threshold: float = 5.0    # cm/s of world foot speed
    blend_window: int = 3           # frames of linear blend after a run

    def __post_init__(self):
        if self.height_threshold <= 0 or self.speed_threshold <= 0 or self.blend_window <= 0:
            raise ValueError("foot-contact parameters must be positive")


DEFAULT_FOOT_SUBSTRINGS = ("Foot", "Toe")


def _contact_runs(contact: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, stop) runs of True."""
    runs = []
    t = 0
    T = contact.shape[0]
    while t < T:
        if contact[t]:
            start = t
            while t < T and contact[t]:
                t += 1
            runs.append((start, t))
        else:
            t += 1
    return runs


def fix_foot_sliding(clip: MotionClip, params: FootContactParams,
                     foot_substrings: tuple[str, ...] = DEFAULT_FOOT_SUBSTRINGS
                     ) -> MotionClip:
    """Pin planted feet by adjusting root translation only.

    A frame is a contact for a foot when the foot is below the height
    threshold and moving slower than the speed threshold. Each maximal
    contact run at least as long as the blend window is pinned to its
    first-frame world position; the accumulated correction fades linearly
    over the blend window after the run. Joint rotations are untouched.
    """
    foot_ids = [i for i, j in enumerate(clip.skeleton.joints)
                if any(s in j.name for s in foot_substrings)]
    if not foot_ids:
        raise ValueError(
            f"no foot joints found (name substrings: {', '.join(foot_substrings)})")

    out = clip.copy()
    T = clip.n_frames
    for foot in foot_ids:
        positions, _ = forward_kinematics(out)
        pos = positions[:, foot, :]
        height = pos[:, 1]
        if T > 1:
            step = np.linalg.norm(np.diff(pos, axis=0), axis=1) * out.fps
            speed = np.concatenate([step[:1], step])
        else:
            speed = np.zeros(1)
        contact = (height < params.height_threshold) & (speed < params.speed_threshold)

        correction = np.zeros((T, 3), dtype=np.float64)
        for start, stop in _contact_runs(contact):
            if stop - start < params.blend_window:
                continue  # too short: likely a false contact
            correction[start:stop] = pos[start] - pos[start:stop]
            tail = correction[stop - 1]
            for j in range(1, params.blend_window + 1):
                t = stop - 1 + j
                if t >= T:
                    break
                fade = 1.0 - j / (params.blend_window + 1)
                correction[t] += tail * fade
        out.root_pos = out.root_pos + correction
    return out
