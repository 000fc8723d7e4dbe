"""Body-part partition of the motion vector and per-part token codecs.

The flat motion vector is split into 12 named parts (root, spine, head+neck,
jaw, face expression, identity coefficients, arms, hands, legs). Each part
owns a set of channel indices; an affine encoder maps the part's channels to
a D_b-dimensional token per frame and a matching decoder maps tokens back.
Most parts are not contiguous in the flat layout (the joint table interleaves
left/right sides), so parts carry explicit index arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DataError, UsageError
from .motion import MotionLayout

DEFAULT_TOKEN_DIM = 64

PART_NAMES = (
    "root",
    "spine",
    "head_neck",
    "jaw",
    "face_expr",
    "identity",
    "left_arm",
    "right_arm",
    "left_hand",
    "right_hand",
    "left_leg",
    "right_leg",
)

HAND_PARTS = ("left_hand", "right_hand")

_PART_JOINTS = {
    "spine": ("pelvis", "spine1", "spine2", "spine3"),
    "head_neck": ("neck", "head"),
    "left_arm": ("left_collar", "left_shoulder", "left_elbow", "left_wrist"),
    "right_arm": ("right_collar", "right_shoulder", "right_elbow", "right_wrist"),
    "left_leg": ("left_hip", "left_knee", "left_ankle", "left_foot"),
    "right_leg": ("right_hip", "right_knee", "right_ankle", "right_foot"),
}


@dataclass(frozen=True)
class BodyPart:
    name: str
    channels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.channels)

    def ranges(self) -> list[tuple[int, int]]:
        """Maximal contiguous [start, end) runs of this part's channels."""
        out: list[tuple[int, int]] = []
        for c in self.channels:
            if out and c == out[-1][1]:
                out[-1] = (out[-1][0], c + 1)
            else:
                out.append((c, c + 1))
        return out


@dataclass(frozen=True)
class BodyPartLayout:
    """Ordered list of parts covering every motion channel exactly once."""

    parts: tuple[BodyPart, ...]
    dim: int
    token_dim: int = DEFAULT_TOKEN_DIM

    def __post_init__(self):
        seen = np.concatenate([np.asarray(p.channels, dtype=np.int64) for p in self.parts])
        if len(np.unique(seen)) != len(seen):
            raise DataError("body parts overlap: a channel appears in two parts")
        if not np.array_equal(np.sort(seen), np.arange(self.dim)):
            raise DataError("body parts do not cover the channel range exactly once")
        names = [p.name for p in self.parts]
        if len(set(names)) != len(names):
            raise DataError("duplicate part names")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def part(self, name: str) -> BodyPart:
        for p in self.parts:
            if p.name == name:
                return p
        raise UsageError(f"unknown body part {name!r}")

    def index(self, name: str) -> int:
        for i, p in enumerate(self.parts):
            if p.name == name:
                return i
        raise UsageError(f"unknown body part {name!r}")

    def part_channels(self, names) -> np.ndarray:
        """Sorted union of channel indices for the named parts."""
        idx = np.concatenate([np.asarray(self.part(n).channels, dtype=np.int64) for n in names])
        return np.sort(idx)


def default_body_partition(
    layout: MotionLayout | None = None, token_dim: int = DEFAULT_TOKEN_DIM
) -> BodyPartLayout:
    """The fixed 12-part split of the default whole-body layout.

    Membership: root (root rotation + translation), spine (pelvis + 3 spine
    joints), head+neck, jaw, face expression, identity (face shape + body
    shape coefficients), and per-side arm / hand / leg groups.
    """
    layout = layout or MotionLayout()
    names = set(layout.joint_names)
    needed = {j for joints in _PART_JOINTS.values() for j in joints}
    missing = sorted(needed - names)
    if missing:
        raise DataError(f"layout lacks joints required by the default partition: {missing}")

    def field_channels(*fields: str) -> tuple[int, ...]:
        out: list[int] = []
        for f in fields:
            s = layout.field_slice(f)
            out.extend(range(s.start, s.stop))
        return tuple(out)

    def joint_channels(joints) -> tuple[int, ...]:
        out: list[int] = []
        for j in joints:
            s = layout.joint_slice(j)
            out.extend(range(s.start, s.stop))
        return tuple(out)

    hand_joints = {
        side: tuple(j for j in layout.joint_names if j.startswith(side) and j[-1].isdigit())
        for side in ("left_", "right_")
    }

    parts = (
        BodyPart("root", field_channels("root_rot", "root_traj")),
        BodyPart("spine", joint_channels(_PART_JOINTS["spine"])),
        BodyPart("head_neck", joint_channels(_PART_JOINTS["head_neck"])),
        BodyPart("jaw", field_channels("jaw_rot")),
        BodyPart("face_expr", field_channels("face_expr")),
        BodyPart("identity", field_channels("face_shape", "body_shape")),
        BodyPart("left_arm", joint_channels(_PART_JOINTS["left_arm"])),
        BodyPart("right_arm", joint_channels(_PART_JOINTS["right_arm"])),
        BodyPart("left_hand", joint_channels(hand_joints["left_"])),
        BodyPart("right_hand", joint_channels(hand_joints["right_"])),
        BodyPart("left_leg", joint_channels(_PART_JOINTS["left_leg"])),
        BodyPart("right_leg", joint_channels(_PART_JOINTS["right_leg"])),
    )
    return BodyPartLayout(parts=parts, dim=layout.dim, token_dim=token_dim)


def partition_to_json(bpl: BodyPartLayout) -> str:
    doc = {
        "dim": bpl.dim,
        "token_dim": bpl.token_dim,
        "parts": [{"name": p.name, "ranges": [list(r) for r in p.ranges()]} for p in bpl.parts],
    }
    return json.dumps(doc, indent=2)


def partition_from_json(text: str) -> BodyPartLayout:
    doc = json.loads(text)
    parts = []
    for entry in doc["parts"]:
        channels: list[int] = []
        for start, end in entry["ranges"]:
            channels.extend(range(start, end))
        parts.append(BodyPart(entry["name"], tuple(channels)))
    return BodyPartLayout(parts=tuple(parts), dim=doc["dim"], token_dim=doc["token_dim"])


def xavier_uniform_(t: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)) for a 2-D tensor."""
    fan_in, fan_out = t.shape[0], t.shape[1]
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


class PartCodec(nn.Module):
    """Per-part affine encode (channels -> token) and decode (token -> channels).

    Weights are Xavier-uniform, biases zero. The per-part ``trainable`` flags
    drive the stage-2 freeze policy via ``requires_grad``.
    """

    def __init__(
        self,
        bpl: BodyPartLayout,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.bpl = bpl
        d_b = bpl.token_dim
        self.enc_weight = nn.ParameterList()
        self.enc_bias = nn.ParameterList()
        self.dec_weight = nn.ParameterList()
        self.dec_bias = nn.ParameterList()
        for part in bpl.parts:
            w_in = torch.empty(len(part), d_b, dtype=dtype)
            w_out = torch.empty(d_b, len(part), dtype=dtype)
            xavier_uniform_(w_in, generator)
            xavier_uniform_(w_out, generator)
            self.enc_weight.append(nn.Parameter(w_in))
            self.enc_bias.append(nn.Parameter(torch.zeros(d_b, dtype=dtype)))
            self.dec_weight.append(nn.Parameter(w_out))
            self.dec_bias.append(nn.Parameter(torch.zeros(len(part), dtype=dtype)))
        for part in bpl.parts:
            self.register_buffer(
                f"_idx_{part.name}", torch.as_tensor(part.channels, dtype=torch.long)
            )
        perm = np.concatenate([np.asarray(p.channels, dtype=np.int64) for p in bpl.parts])
        self.register_buffer("_inv_perm", torch.as_tensor(np.argsort(perm)))

    def part_parameters(self, name: str) -> list[nn.Parameter]:
        i = self.bpl.index(name)
        return [self.enc_weight[i], self.enc_bias[i], self.dec_weight[i], self.dec_bias[i]]

    def set_trainable(self, name: str, trainable: bool) -> None:
        for p in self.part_parameters(name):
            p.requires_grad_(trainable)

    def trainable_flags(self) -> dict[str, bool]:
        return {
            part.name: all(p.requires_grad for p in self.part_parameters(part.name))
            for part in self.bpl.parts
        }

    def _indices(self, name: str) -> torch.Tensor:
        return getattr(self, f"_idx_{name}")

    def encode(self, seq: torch.Tensor) -> torch.Tensor:
        """(..., F, D_m) channel values -> (..., F, N_b, D_b) part tokens."""
        if seq.shape[-1] != self.bpl.dim:
            raise DataError(f"input has {seq.shape[-1]} channels, partition expects {self.bpl.dim}")
        tokens = []
        for i, part in enumerate(self.bpl.parts):
            x = seq.index_select(-1, self._indices(part.name))
            tokens.append(x @ self.enc_weight[i] + self.enc_bias[i])
        return torch.stack(tokens, dim=-2)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        """(..., F, N_b, D_b) part tokens -> (..., F, D_m) channel values."""
        if tokens.shape[-2] != self.bpl.n_parts or tokens.shape[-1] != self.bpl.token_dim:
            raise DataError(
                f"token tensor {tuple(tokens.shape)} does not match partition "
                f"({self.bpl.n_parts} parts x {self.bpl.token_dim})"
            )
        vals = [
            tokens[..., i, :] @ self.dec_weight[i] + self.dec_bias[i]
            for i in range(self.bpl.n_parts)
        ]
        # Concatenation is in part-major channel order; undo the permutation.
        return torch.cat(vals, dim=-1).index_select(-1, self._inv_perm)


def encode_parts(seq: torch.Tensor, codec: PartCodec) -> torch.Tensor:
    return codec.encode(seq)


def decode_parts(tokens: torch.Tensor, codec: PartCodec) -> torch.Tensor:
    return codec.decode(tokens)
