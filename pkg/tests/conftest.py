"""Shared fixtures: a small rig and random clips built on it."""

import numpy as np
import pytest

from gesticulate import rotations
from gesticulate.motion_io import Joint, MotionClip, Skeleton


def build_chain_skeleton() -> Skeleton:
    """Root + spine + arm + end site, with mixed rotation orders."""
    return Skeleton(
        joints=(
            Joint("Hips", None, (0.0, 90.0, 0.0),
                  ("Xposition", "Yposition", "Zposition",
                   "Zrotation", "Xrotation", "Yrotation")),
            Joint("Spine", 0, (0.0, 20.0, 0.0), ("Zrotation", "Xrotation", "Yrotation")),
            Joint("LeftArm", 1, (15.0, 10.0, 0.0), ("Xrotation", "Yrotation", "Zrotation")),
            Joint("LeftArm_End", 2, (25.0, 0.0, 0.0), (), is_end_site=True),
        )
    )


def random_clip(skeleton: Skeleton, n_frames: int = 12, fps: float = 30.0,
                seed: int = 0, max_angle: float = 60.0) -> MotionClip:
    rng = np.random.default_rng(seed)
    n_rot = len(skeleton.rotated_joints)
    angles = rng.uniform(-max_angle, max_angle, size=(n_frames, n_rot, 3))
    quats = np.stack(
        [
            rotations.euler_to_quat(
                skeleton.joints[ji].rotation_order, angles[:, qi, :])
            for qi, ji in enumerate(skeleton.rotated_joints)
        ],
        axis=1,
    )
    root = rng.uniform(-5, 5, size=(n_frames, 3)) + np.array([0.0, 90.0, 0.0])
    return MotionClip(skeleton=skeleton, fps=fps, root_pos=root, quats=quats)


@pytest.fixture
def chain_skeleton() -> Skeleton:
    return build_chain_skeleton()


@pytest.fixture
def chain_clip(chain_skeleton) -> MotionClip:
    return random_clip(chain_skeleton, n_frames=16, fps=30.0, seed=3)
