"""Whole-body motion representation and its binary file format.

A motion frame is the flat concatenation of: root rotation (axis-angle, 3),
root translation (world meters, 3), per-joint rotations (axis-angle, 3 per
joint), face shape coefficients (100), face expression coefficients (50),
jaw rotation (axis-angle, 3), and body shape coefficients (10). With the
default 52-joint whole-body skeleton the frame is 325 channels wide.

Sequences carry a per-channel validity mask: channels that were zero- or
average-filled rather than observed stay flagged invalid so evaluation can
exclude them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, UsageError

FACE_SHAPE_DIM = 100
FACE_EXPR_DIM = 50
BODY_SHAPE_DIM = 10

# Whole-body skeleton: pelvis + 21 body joints + 2x15 hand joints. The same
# 52 names exist in SMPL-H, which is what makes the direct retarget a pure
# name-table copy.
BODY_JOINTS = (
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
)

_FINGERS = ("index", "middle", "pinky", "ring", "thumb")

HAND_JOINTS = tuple(
    f"{side}_{finger}{i}" for side in ("left", "right") for finger in _FINGERS for i in (1, 2, 3)
)

DEFAULT_JOINTS = BODY_JOINTS + HAND_JOINTS

FIELD_ORDER = (
    "root_rot",
    "root_traj",
    "joint_rots",
    "face_shape",
    "face_expr",
    "jaw_rot",
    "body_shape",
)


@dataclass(frozen=True)
class MotionLayout:
    """Channel layout of the flat motion vector, parameterized by joint names."""

    joint_names: tuple[str, ...] = DEFAULT_JOINTS

    def __post_init__(self):
        if len(set(self.joint_names)) != len(self.joint_names):
            raise DataError("duplicate joint names in layout")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def dim(self) -> int:
        return 3 + 3 + 3 * self.n_joints + FACE_SHAPE_DIM + FACE_EXPR_DIM + 3 + BODY_SHAPE_DIM

    def field_dims(self) -> dict[str, int]:
        return {
            "root_rot": 3,
            "root_traj": 3,
            "joint_rots": 3 * self.n_joints,
            "face_shape": FACE_SHAPE_DIM,
            "face_expr": FACE_EXPR_DIM,
            "jaw_rot": 3,
            "body_shape": BODY_SHAPE_DIM,
        }

    def field_slices(self) -> dict[str, slice]:
        out = {}
        start = 0
        for name, width in self.field_dims().items():
            out[name] = slice(start, start + width)
            start += width
        return out

    def field_slice(self, name: str) -> slice:
        try:
            return self.field_slices()[name]
        except KeyError:
            raise UsageError(f"unknown motion field {name!r}") from None

    def joint_slice(self, joint: str) -> slice:
        """Channels of one joint's axis-angle rotation within the flat vector."""
        try:
            j = self.joint_names.index(joint)
        except ValueError:
            raise DataError(f"unknown joint name {joint!r}") from None
        base = self.field_slice("joint_rots").start + 3 * j
        return slice(base, base + 3)

    @staticmethod
    def generic(n_joints: int) -> "MotionLayout":
        if n_joints == len(DEFAULT_JOINTS):
            return MotionLayout()
        return MotionLayout(tuple(f"joint_{i:02d}" for i in range(n_joints)))


@dataclass
class MotionFrame:
    """One frame of the whole-body motion tuple, fields as float32 arrays."""

    root_rot: np.ndarray
    root_traj: np.ndarray
    joint_rots: np.ndarray
    face_shape: np.ndarray
    face_expr: np.ndarray
    jaw_rot: np.ndarray
    body_shape: np.ndarray

    @staticmethod
    def zero(layout: MotionLayout | None = None) -> "MotionFrame":
        layout = layout or MotionLayout()
        dims = layout.field_dims()
        return MotionFrame(**{k: np.zeros(d, dtype=np.float32) for k, d in dims.items()})


def pack_frame(frame: MotionFrame, layout: MotionLayout | None = None) -> np.ndarray:
    """Flatten a frame into the registered channel order. Inverse of unpack_frame."""
    layout = layout or MotionLayout()
    dims = layout.field_dims()
    parts = []
    for name in FIELD_ORDER:
        a = np.asarray(getattr(frame, name), dtype=np.float32).ravel()
        if a.shape[0] != dims[name]:
            raise DataError(
                f"field {name!r} has {a.shape[0]} channels, layout expects {dims[name]}"
            )
        parts.append(a)
    return np.concatenate(parts)


def unpack_frame(vec: np.ndarray, layout: MotionLayout | None = None) -> MotionFrame:
    layout = layout or MotionLayout()
    vec = np.asarray(vec, dtype=np.float32).ravel()
    if vec.shape[0] != layout.dim:
        raise DataError(f"flat frame has {vec.shape[0]} channels, layout expects {layout.dim}")
    slices = layout.field_slices()
    return MotionFrame(**{name: vec[slices[name]].copy() for name in FIELD_ORDER})


@dataclass
class MotionSequence:
    """F frames by D channels of float32 motion data plus a validity mask.

    ``data`` is frame-major; ``validity`` flags channels that hold observed
    values (True) versus filled placeholders (False).
    """

    data: np.ndarray
    fps: int
    layout: MotionLayout = field(default_factory=MotionLayout)
    validity: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DataError(f"motion data must be 2-D (frames, channels), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise DataError("a motion sequence needs at least one frame")
        if self.data.shape[1] != self.layout.dim:
            raise DataError(
                f"motion data has {self.data.shape[1]} channels, layout expects {self.layout.dim}"
            )
        if int(self.fps) <= 0:
            raise DataError(f"fps must be a positive integer, got {self.fps}")
        self.fps = int(self.fps)
        if self.validity is None:
            self.validity = np.ones(self.layout.dim, dtype=bool)
        self.validity = np.asarray(self.validity, dtype=bool).ravel()
        if self.validity.shape[0] != self.layout.dim:
            raise DataError("validity mask length does not match channel count")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def frames(self) -> list[MotionFrame]:
        return [unpack_frame(row, self.layout) for row in self.data]

    @staticmethod
    def from_frames(
        frames: Iterable[MotionFrame],
        fps: int,
        layout: MotionLayout | None = None,
        validity: np.ndarray | None = None,
    ) -> "MotionSequence":
        layout = layout or MotionLayout()
        rows = [pack_frame(f, layout) for f in frames]
        if not rows:
            raise DataError("a motion sequence needs at least one frame")
        return MotionSequence(np.stack(rows), fps=fps, layout=layout, validity=validity)


def fill_missing_channels(
    seq: MotionSequence, policy: str = "zero", average: np.ndarray | None = None
) -> MotionSequence:
    """Overwrite invalid channels with zeros or a supplied corpus average.

    The validity mask is carried over unchanged so downstream evaluation can
    still tell filled channels from observed ones. Valid channels are never
    touched.
    """
    if policy not in ("zero", "average"):
        raise UsageError(f"unknown fill policy {policy!r}; expected 'zero' or 'average'")
    data = seq.data.copy()
    invalid = ~seq.validity
    if policy == "zero":
        data[:, invalid] = 0.0
    else:
        if average is None:
            raise UsageError("average fill policy requires an average vector")
        average = np.asarray(average, dtype=np.float32).ravel()
        if average.shape[0] != seq.dim:
            raise DataError(
                f"average vector has {average.shape[0]} channels, sequence has {seq.dim}"
            )
        data[:, invalid] = average[invalid]
    return MotionSequence(data, fps=seq.fps, layout=seq.layout, validity=seq.validity.copy())


def smplh_validity(layout: MotionLayout | None = None) -> np.ndarray:
    """Validity mask of channels observable in SMPL-H data: face channels are not."""
    layout = layout or MotionLayout()
    mask = np.ones(layout.dim, dtype=bool)
    for name in ("face_shape", "face_expr", "jaw_rot"):
        mask[layout.field_slice(name)] = False
    return mask


def retarget_smplh_to_smplx(
    joint_rots: Mapping[str, Sequence[float]],
    root_rot: Sequence[float] | None = None,
    root_traj: Sequence[float] | None = None,
    body_shape: Sequence[float] | None = None,
    layout: MotionLayout | None = None,
) -> tuple[MotionFrame, np.ndarray]:
    """Copy SMPL-H joint rotations onto the identically named SMPL-X joints.

    Face shape, face expression and jaw channels do not exist in SMPL-H; they
    are zero-filled and flagged invalid in the returned mask. Root translation
    is copied verbatim, without rescaling.

    Returns:
        (frame, validity) where validity marks the channels SMPL-H provides.
    """
    layout = layout or MotionLayout()
    frame = MotionFrame.zero(layout)
    known = set(layout.joint_names)
    for name, rot in joint_rots.items():
        if name not in known:
            raise DataError(f"cannot retarget unknown joint {name!r}")
        rot = np.asarray(rot, dtype=np.float32).ravel()
        if rot.shape[0] != 3:
            raise DataError(f"joint {name!r} rotation must have 3 channels")
        j = layout.joint_names.index(name)
        frame.joint_rots[3 * j : 3 * j + 3] = rot
    if root_rot is not None:
        frame.root_rot[:] = np.asarray(root_rot, dtype=np.float32)
    if root_traj is not None:
        frame.root_traj[:] = np.asarray(root_traj, dtype=np.float32)
    if body_shape is not None:
        b = np.asarray(body_shape, dtype=np.float32).ravel()
        frame.body_shape[:] = b[:BODY_SHAPE_DIM]
    return frame, smplh_validity(layout)


# ---------------------------------------------------------------------------
# MCMF binary format
# ---------------------------------------------------------------------------

MAGIC = b"MCMF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, N, F, fps, D


def sequence_to_bytes(seq: MotionSequence) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, seq.layout.n_joints, seq.n_frames, seq.fps, seq.dim)
    payload = seq.data.astype("<f4").tobytes()
    bits = np.packbits(seq.validity.astype(np.uint8), bitorder="little").tobytes()
    return header + payload + bits


def sequence_from_bytes(blob: bytes) -> MotionSequence:
    if len(blob) < _HEADER.size:
        raise DataError(f"truncated header: file ends at offset {len(blob)}, need {_HEADER.size}")
    magic, version, n_joints, n_frames, fps, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"unsupported version {version} at offset 4, expected {VERSION}")
    layout = MotionLayout.generic(n_joints)
    if dim != layout.dim:
        raise DataError(f"header D_m={dim} inconsistent with N={n_joints} (expected {layout.dim})")
    need = n_frames * dim * 4
    off = _HEADER.size
    if len(blob) < off + need:
        raise DataError(f"truncated payload: file ends at offset {len(blob)}, need {off + need}")
    data = np.frombuffer(blob, dtype="<f4", count=n_frames * dim, offset=off)
    data = data.reshape(n_frames, dim).copy()
    off += need
    nbytes = (dim + 7) // 8
    if len(blob) < off + nbytes:
        raise DataError(f"truncated validity bits: file ends at offset {len(blob)}, need {off + nbytes}")
    bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
    validity = np.unpackbits(bits, bitorder="little")[:dim].astype(bool)
    return MotionSequence(data, fps=fps, layout=layout, validity=validity)


def save_sequence(seq: MotionSequence, path: str | Path) -> None:
    """Write the binary motion file plus a JSON sidecar for human inspection."""
    path = Path(path)
    path.write_bytes(sequence_to_bytes(seq))
    sidecar = {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "n_joints": seq.layout.n_joints,
        "n_frames": seq.n_frames,
        "fps": seq.fps,
        "dim": seq.dim,
        "valid_channels": int(seq.validity.sum()),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_sequence(path: str | Path) -> MotionSequence:
    path = Path(path)
    if not path.exists():
        raise DataError(f"motion file not found: {path}")
    return sequence_from_bytes(path.read_bytes())
