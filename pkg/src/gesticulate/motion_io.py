"""BVH motion-capture I/O: skeleton model, parser, writer, resampling, FK.

Conventions:
- Angles in BVH files are degrees; rotations are intrinsic, applied in the
  joint's channel order.
- Internally every rotated joint stores a unit quaternion (w, x, y, z).
- End sites are kept as pseudo-joints (no channels) named "<parent>_End".
- Output uses tab indentation, "%.6f" floats, and LF line endings; input
  accepts CRLF and arbitrary whitespace indentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import BvhParseError
from . import rotations

_POSITION_CHANNELS = {"Xposition": 0, "Yposition": 1, "Zposition": 2}
_ROTATION_CHANNELS = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
_VALID_CHANNELS = set(_POSITION_CHANNELS) | set(_ROTATION_CHANNELS)


@dataclass(frozen=True)
class Joint:
    """One node of the skeleton tree (end sites included, with no channels)."""

    name: str
    parent: int | None
    offset: tuple[float, float, float]
    channels: tuple[str, ...]
    is_end_site: bool = False

    @property
    def rotation_order(self) -> str:
        """Channel order of the rotation channels, e.g. "ZXY"; "" if none."""
        return "".join(_ROTATION_CHANNELS[c] for c in self.channels if c in _ROTATION_CHANNELS)

    @property
    def has_position(self) -> bool:
        return any(c in _POSITION_CHANNELS for c in self.channels)


@dataclass(frozen=True)
class Skeleton:
    """A rig: joints in depth-first order, each pointing at its parent."""

    joints: tuple[Joint, ...]

    def __post_init__(self):
        if not self.joints:
            raise ValueError("skeleton needs at least one joint")
        if self.joints[0].parent is not None:
            raise ValueError("first joint must be the root (parent=None)")
        names = set()
        for i, joint in enumerate(self.joints):
            if i > 0 and (joint.parent is None or not 0 <= joint.parent < i):
                raise ValueError(f"joint {joint.name!r}: parent must precede it")
            if joint.name in names:
                raise ValueError(f"duplicate joint name {joint.name!r}")
            names.add(joint.name)
            order = joint.rotation_order
            if order and sorted(order) != ["X", "Y", "Z"]:
                raise ValueError(f"joint {joint.name!r}: rotation channels must cover X, Y, Z once")
            for c in joint.channels:
                if c not in _VALID_CHANNELS:
                    raise ValueError(f"joint {joint.name!r}: unknown channel {c!r}")

    @property
    def rotated_joints(self) -> tuple[int, ...]:
        """Indices of joints that carry rotation channels, in skeleton order."""
        return tuple(i for i, j in enumerate(self.joints) if j.rotation_order)

    @property
    def children(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.joints]
        for i, joint in enumerate(self.joints):
            if joint.parent is not None:
                out[joint.parent].append(i)
        return tuple(tuple(c) for c in out)

    def index(self, name: str) -> int:
        for i, joint in enumerate(self.joints):
            if joint.name == name:
                return i
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "joints": [
                {
                    "name": j.name,
                    "parent": j.parent,
                    "offset": list(j.offset),
                    "channels": list(j.channels),
                    "is_end_site": j.is_end_site,
                }
                for j in self.joints
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        return cls(
            joints=tuple(
                Joint(
                    name=j["name"],
                    parent=j["parent"],
                    offset=tuple(float(x) for x in j["offset"]),
                    channels=tuple(j["channels"]),
                    is_end_site=bool(j["is_end_site"]),
                )
                for j in data["joints"]
            )
        )


@dataclass
class MotionClip:
    """A motion: skeleton + per-frame root translation and joint quaternions.

    quats has shape (n_frames, len(skeleton.rotated_joints), 4) in (w, x, y, z)
    order; root_pos has shape (n_frames, 3).
    """

    skeleton: Skeleton
    fps: float
    root_pos: np.ndarray
    quats: np.ndarray

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.quats = np.asarray(self.quats, dtype=np.float64)
        n_rot = len(self.skeleton.rotated_joints)
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.root_pos.ndim != 2 or self.root_pos.shape[1] != 3:
            raise ValueError(f"root_pos must be (n_frames, 3), got {self.root_pos.shape}")
        if self.quats.shape != (self.root_pos.shape[0], n_rot, 4):
            raise ValueError(
                f"quats must be ({self.root_pos.shape[0]}, {n_rot}, 4), got {self.quats.shape}"
            )
        if self.n_frames < 1:
            raise ValueError("clip needs at least one frame")
        norms = np.linalg.norm(self.quats, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("quaternions must be unit length")

    @property
    def n_frames(self) -> int:
        return self.root_pos.shape[0]

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) / self.fps

    def copy(self) -> "MotionClip":
        return MotionClip(self.skeleton, self.fps, self.root_pos.copy(), self.quats.copy())


class _TokenStream:
    """Line-oriented token cursor over BVH text, tracking line numbers."""

    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0  # next line index

    def next_tokens(self) -> tuple[list[str], int]:
        """Return (tokens, 1-based line number) of the next non-blank line."""
        while self.pos < len(self.lines):
            self.pos += 1
            tokens = self.lines[self.pos - 1].split()
            if tokens:
                return tokens, self.pos
        raise BvhParseError("unexpected end of file")

    def peek_tokens(self) -> tuple[list[str], int] | None:
        saved = self.pos
        try:
            out = self.next_tokens()
        except BvhParseError:
            return None
        self.pos = saved
        return out


def _parse_offset(tokens: list[str], line: int) -> tuple[float, float, float]:
    if tokens[0] != "OFFSET" or len(tokens) != 4:
        raise BvhParseError(f"expected 'OFFSET x y z', got {' '.join(tokens)!r}", line)
    try:
        return (float(tokens[1]), float(tokens[2]), float(tokens[3]))
    except ValueError:
        raise BvhParseError(f"bad OFFSET values {' '.join(tokens[1:])!r}", line) from None


def _expect(tokens: list[str], line: int, want: str):
    if tokens != [want] and tokens[0] != want:
        raise BvhParseError(f"expected {want!r}, got {' '.join(tokens)!r}", line)


def _parse_joint_body(stream: _TokenStream, joints: list[Joint], parent: int | None,
                      name: str, is_end_site: bool):
    """Parse the '{ OFFSET [CHANNELS] [children] }' body of one node."""
    tokens, line = stream.next_tokens()
    _expect(tokens, line, "{")
    tokens, line = stream.next_tokens()
    offset = _parse_offset(tokens, line)

    channels: tuple[str, ...] = ()
    if not is_end_site:
        tokens, line = stream.next_tokens()
        if tokens[0] != "CHANNELS":
            raise BvhParseError(f"expected CHANNELS, got {' '.join(tokens)!r}", line)
        try:
            count = int(tokens[1])
        except (IndexError, ValueError):
            raise BvhParseError("CHANNELS needs a count", line) from None
        names = tokens[2:]
        if len(names) != count:
            raise BvhParseError(f"CHANNELS declares {count} but lists {len(names)}", line)
        for c in names:
            if c not in _VALID_CHANNELS:
                raise BvhParseError(f"unknown channel {c!r}", line)
        channels = tuple(names)

    index = len(joints)
    joints.append(Joint(name=name, parent=parent, offset=offset, channels=channels,
                        is_end_site=is_end_site))

    while True:
        tokens, line = stream.next_tokens()
        if tokens[0] == "}":
            return
        if is_end_site:
            raise BvhParseError(f"end site may not contain {' '.join(tokens)!r}", line)
        if tokens[0] == "JOINT":
            if len(tokens) < 2:
                raise BvhParseError("JOINT needs a name", line)
            _parse_joint_body(stream, joints, index, " ".join(tokens[1:]), False)
        elif tokens[0] == "End" and len(tokens) >= 2 and tokens[1] == "Site":
            end_name = joints[index].name + "_End"
            existing = {j.name for j in joints}
            suffix = 2
            while end_name in existing:
                end_name = f"{joints[index].name}_End{suffix}"
                suffix += 1
            _parse_joint_body(stream, joints, index, end_name, True)
        else:
            raise BvhParseError(f"expected JOINT, End Site or '}}', got {' '.join(tokens)!r}", line)


def parse_bvh(text: str) -> MotionClip:
    """Parse BVH text into a MotionClip.

    Non-root position channels are read and discarded (the rig's offsets win);
    root position channels become the clip's root translation. Raises
    BvhParseError with a line number on malformed input.
    """
    stream = _TokenStream(text)
    tokens, line = stream.next_tokens()
    _expect(tokens, line, "HIERARCHY")
    tokens, line = stream.next_tokens()
    if tokens[0] != "ROOT" or len(tokens) < 2:
        raise BvhParseError(f"expected 'ROOT <name>', got {' '.join(tokens)!r}", line)

    joints: list[Joint] = []
    _parse_joint_body(stream, joints, None, " ".join(tokens[1:]), False)
    skeleton = Skeleton(joints=tuple(joints))

    tokens, line = stream.next_tokens()
    _expect(tokens, line, "MOTION")
    tokens, line = stream.next_tokens()
    if tokens[0] != "Frames:" or len(tokens) != 2:
        raise BvhParseError(f"expected 'Frames: <n>', got {' '.join(tokens)!r}", line)
    try:
        n_frames = int(tokens[1])
    except ValueError:
        raise BvhParseError(f"bad frame count {tokens[1]!r}", line) from None
    if n_frames < 1:
        raise BvhParseError(f"frame count must be >= 1, got {n_frames}", line)
    tokens, line = stream.next_tokens()
    if tokens[:2] != ["Frame", "Time:"] or len(tokens) != 3:
        raise BvhParseError(f"expected 'Frame Time: <s>', got {' '.join(tokens)!r}", line)
    try:
        frame_time = float(tokens[2])
    except ValueError:
        raise BvhParseError(f"bad frame time {tokens[2]!r}", line) from None
    if frame_time <= 0:
        raise BvhParseError(f"frame time must be positive, got {frame_time}", line)

    # Flat channel layout in document order.
    layout: list[tuple[int, str]] = []
    for ji, joint in enumerate(skeleton.joints):
        for c in joint.channels:
            layout.append((ji, c))
    width = len(layout)

    values = np.zeros((n_frames, width), dtype=np.float64)
    row = 0
    while True:
        item = stream.peek_tokens()
        if item is None:
            break
        tokens, line = stream.next_tokens()
        if row >= n_frames:
            raise BvhParseError(
                f"frame count mismatch: header declares {n_frames}, found more rows", line)
        if len(tokens) != width:
            raise BvhParseError(
                f"frame {row} has {len(tokens)} values, expected {width}", line)
        try:
            values[row] = [float(t) for t in tokens]
        except ValueError:
            raise BvhParseError(f"bad numeric value in frame {row}", line) from None
        row += 1
    if row != n_frames:
        raise BvhParseError(
            f"frame count mismatch: header declares {n_frames}, found {row} rows")

    rotated = skeleton.rotated_joints
    root_pos = np.zeros((n_frames, 3), dtype=np.float64)
    quats = np.zeros((n_frames, len(rotated), 4), dtype=np.float64)
    quats[..., 0] = 1.0

    col = 0
    angle_cols: dict[int, list[int]] = {ji: [] for ji in rotated}
    for ji, channel in layout:
        if channel in _POSITION_CHANNELS:
            if ji == 0:
                root_pos[:, _POSITION_CHANNELS[channel]] = values[:, col]
            # non-root positions: parsed and dropped
        else:
            angle_cols[ji].append(col)
        col += 1

    for qi, ji in enumerate(rotated):
        cols = angle_cols[ji]
        angles = values[:, cols]  # (T, 3) in channel order
        quats[:, qi, :] = rotations.euler_to_quat(skeleton.joints[ji].rotation_order, angles)

    return MotionClip(skeleton=skeleton, fps=1.0 / frame_time, root_pos=root_pos, quats=quats)


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_bvh(clip: MotionClip) -> str:
    """Serialize a MotionClip to BVH text (tabs, %.6f, LF line endings)."""
    skeleton = clip.skeleton
    children = skeleton.children
    lines: list[str] = ["HIERARCHY"]

    def emit(ji: int, depth: int):
        joint = skeleton.joints[ji]
        tab = "\t" * depth
        if joint.is_end_site:
            lines.append(f"{tab}End Site")
        elif joint.parent is None:
            lines.append(f"{tab}ROOT {joint.name}")
        else:
            lines.append(f"{tab}JOINT {joint.name}")
        lines.append(f"{tab}{{")
        off = " ".join(_fmt(v) for v in joint.offset)
        lines.append(f"{tab}\tOFFSET {off}")
        if joint.channels:
            lines.append(f"{tab}\tCHANNELS {len(joint.channels)} {' '.join(joint.channels)}")
        for ci in children[ji]:
            emit(ci, depth + 1)
        lines.append(f"{tab}}}")

    emit(0, 0)
    lines.append("MOTION")
    lines.append(f"Frames: {clip.n_frames}")
    lines.append(f"Frame Time: {_fmt(1.0 / clip.fps)}")

    rotated = skeleton.rotated_joints
    qi_of = {ji: qi for qi, ji in enumerate(rotated)}
    eulers: dict[int, np.ndarray] = {}
    for ji in rotated:
        order = skeleton.joints[ji].rotation_order
        eulers[ji] = rotations.quat_to_euler(order, clip.quats[:, qi_of[ji], :])

    for t in range(clip.n_frames):
        row: list[str] = []
        for ji, joint in enumerate(skeleton.joints):
            for c in joint.channels:
                if c in _POSITION_CHANNELS:
                    if ji == 0:
                        row.append(_fmt(clip.root_pos[t, _POSITION_CHANNELS[c]]))
                    else:
                        # Positions of non-root joints are rig constants here.
                        row.append(_fmt(joint.offset[_POSITION_CHANNELS[c]]))
            angles = eulers.get(ji)
            if angles is not None:
                row.extend(_fmt(a) for a in angles[t])
        lines.append(" ".join(row))

    return "\n".join(lines) + "\n"


def resample(clip: MotionClip, target_fps: float) -> MotionClip:
    """Resample to target_fps: linear root interpolation, slerp for joints.

    Output frame count is round(duration * target_fps) + 1; same-fps input
    reproduces translations bitwise.
    """
    if target_fps <= 0:
        raise ValueError(f"target_fps must be positive, got {target_fps}")
    if clip.n_frames == 1:
        return MotionClip(clip.skeleton, target_fps, clip.root_pos.copy(), clip.quats.copy())

    n_out = int(round(clip.duration * target_fps)) + 1
    # (i * fps) / target_fps is exact for integer frame indices at equal rates.
    src = (np.arange(n_out, dtype=np.float64) * clip.fps) / target_fps
    src = np.minimum(src, float(clip.n_frames - 1))
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, clip.n_frames - 1)

    root = clip.root_pos[i0] * (1.0 - frac)[:, None] + clip.root_pos[i1] * frac[:, None]
    exact = frac == 0.0
    root[exact] = clip.root_pos[i0[exact]]
    quats = rotations.slerp(clip.quats[i0], clip.quats[i1], frac[:, None])
    quats[exact] = clip.quats[i0[exact]]
    return MotionClip(clip.skeleton, target_fps, root, quats)


def forward_kinematics(clip: MotionClip) -> tuple[np.ndarray, np.ndarray]:
    """World positions (T, J, 3) and orientations (T, J, 4) for every joint."""
    skeleton = clip.skeleton
    T = clip.n_frames
    J = len(skeleton.joints)
    qi_of = {ji: qi for qi, ji in enumerate(skeleton.rotated_joints)}

    positions = np.zeros((T, J, 3), dtype=np.float64)
    orientations = np.zeros((T, J, 4), dtype=np.float64)
    identity = np.zeros((T, 4), dtype=np.float64)
    identity[:, 0] = 1.0

    for ji, joint in enumerate(skeleton.joints):
        local_q = clip.quats[:, qi_of[ji], :] if ji in qi_of else identity
        offset = np.asarray(joint.offset, dtype=np.float64)
        if joint.parent is None:
            positions[:, ji] = offset + clip.root_pos
            orientations[:, ji] = local_q
        else:
            p_pos = positions[:, joint.parent]
            p_ori = orientations[:, joint.parent]
            positions[:, ji] = p_pos + rotations.quat_rotate(p_ori, offset)
            orientations[:, ji] = rotations.quat_canonical(rotations.quat_mul(p_ori, local_q))

    return positions, orientations
