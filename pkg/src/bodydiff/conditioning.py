"""Condition tracks, windowing, pseudo-captions, and the toy text embedder.

A condition track is a motion-aligned feature sequence extracted upstream
from raw audio (speech prosody or music features); this module ingests,
validates, windows, and serializes tracks but never touches raw audio. The
text embedder is a deterministic stand-in keyed by a hash of each word: it
fixes the interface (caption -> F_t x D_t float tokens) so a learned encoder
can be swapped in without touching the denoiser.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, NumericError, UsageError
from .motion import MotionSequence

SOURCE_RATE = 76_800
HOP = 512

# feature width and segmentation preset per track kind
KIND_DIMS = {"speech": 2, "music": 35}
KIND_WINDOWS = {"speech": (64, 64), "music": (120, 30)}

_KIND_CODES = {"speech": 1, "music": 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

MAGIC = b"MCFT"
_HEADER = struct.Struct("<4sBIIIII")


@dataclass(frozen=True)
class ConditionTrack:
    """Motion-aligned feature rows of a fixed kind."""

    kind: str
    features: np.ndarray
    frame_rate: int
    source_rate: int = SOURCE_RATE
    hop: int = HOP

    def __post_init__(self):
        if self.kind not in KIND_DIMS:
            raise UsageError(f"unknown track kind {self.kind!r}")
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise DataError(f"track features must be (T_c, D_c) with T_c >= 1, got {feats.shape}")
        want = KIND_DIMS[self.kind]
        if feats.shape[1] != want:
            raise DataError(
                f"{self.kind} tracks carry {want} feature channels, got {feats.shape[1]}"
            )
        if not np.isfinite(feats).all():
            raise NumericError("track features contain non-finite values")
        if self.frame_rate <= 0:
            raise UsageError(f"frame rate must be positive, got {self.frame_rate}")
        object.__setattr__(self, "features", feats)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.features)


@dataclass(frozen=True)
class Segment:
    start: int
    condition: ConditionTrack
    motion: MotionSequence | None = None


def segment_count(n_frames: int, window: int, stride: int) -> int:
    if window < 1 or stride < 1:
        raise UsageError(f"window and stride must be >= 1, got {window}, {stride}")
    if n_frames < window:
        return 0
    return (n_frames - window) // stride + 1


def segment_track(
    track: ConditionTrack,
    window: int,
    stride: int,
    motion: MotionSequence | None = None,
) -> list[Segment]:
    """Cut aligned windows [k*stride, k*stride + window); short tails are dropped."""
    if motion is not None and motion.data.shape[0] != track.n_frames:
        raise DataError(
            f"motion ({motion.data.shape[0]} frames) and track ({track.n_frames}) are not aligned"
        )
    out = []
    for k in range(segment_count(track.n_frames, window, stride)):
        start = k * stride
        cond = ConditionTrack(
            track.kind, track.features[start : start + window],
            track.frame_rate, track.source_rate, track.hop,
        )
        cut = None
        if motion is not None:
            cut = MotionSequence(
                motion.data[start : start + window], motion.fps,
                motion.layout, motion.validity,
            )
        out.append(Segment(start, cond, cut))
    return out


def track_to_bytes(track: ConditionTrack) -> bytes:
    head = _HEADER.pack(
        MAGIC, _KIND_CODES[track.kind], track.dim, track.n_frames,
        track.frame_rate, track.source_rate, track.hop,
    )
    return head + track.features.astype("<f4").tobytes()


def track_from_bytes(blob: bytes) -> ConditionTrack:
    if len(blob) < _HEADER.size:
        raise DataError(f"truncated track header at offset {len(blob)}")
    magic, code, d_c, t_c, rate, source, hop = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad track magic {magic!r} at offset 0")
    if code not in _CODE_KINDS:
        raise DataError(f"unknown track kind code {code}")
    need = _HEADER.size + 4 * d_c * t_c
    if len(blob) != need:
        raise DataError(f"track payload is {len(blob) - _HEADER.size} bytes, header promises {need - _HEADER.size}")
    feats = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t_c, d_c)
    return ConditionTrack(_CODE_KINDS[code], feats.copy(), rate, source, hop)


def save_track(path, track: ConditionTrack) -> None:
    Path(path).write_bytes(track_to_bytes(track))


def load_feature_track(path) -> ConditionTrack:
    path = Path(path)
    if not path.exists():
        raise DataError(f"track file not found: {path}")
    return track_from_bytes(path.read_bytes())


# -- captions and the toy text encoder ---------------------------------------

_TEMPLATES = {
    "m2d": ("A dancer is performing a {genre} in the {style} style to the rhythm "
            "of the {song}", ("genre", "style", "song")),
    "s2g": ("A person is giving a speech, and the content is {content}", ("content",)),
}


@dataclass(frozen=True)
class CaptionSpec:
    task: str
    slots: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in _TEMPLATES:
            raise UsageError(f"unknown caption task {self.task!r}")


def make_pseudo_caption(spec: CaptionSpec) -> str:
    template, names = _TEMPLATES[spec.task]
    for name in names:
        if not spec.slots.get(name):
            raise UsageError(f"caption slot {name!r} is missing or empty")
    return template.format(**{n: spec.slots[n] for n in names})


def _token_vector(token: str, dim: int) -> np.ndarray:
    key = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
    vec = np.random.default_rng(key).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def embed_text(caption: str, dim: int = 32, max_tokens: int = 77) -> torch.Tensor:
    """Whitespace tokens -> (F_t, dim) unit rows; empty captions give F_t = 0.

    Each row depends only on its word, so editing one word changes exactly
    one row. Sequences longer than max_tokens are truncated, never padded.
    """
    if dim < 1 or max_tokens < 1:
        raise UsageError(f"dim and max_tokens must be >= 1, got {dim}, {max_tokens}")
    tokens = caption.split()[:max_tokens]
    if not tokens:
        return torch.zeros(0, dim)
    rows = np.stack([_token_vector(t, dim) for t in tokens])
    return torch.from_numpy(rows.astype(np.float32))
