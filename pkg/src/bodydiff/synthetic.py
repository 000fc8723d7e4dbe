"""Deterministic synthetic motion corpora for tests, demos, and training runs.

Each archetype is a family of sinusoidal joint trajectories with its own base
frequency and per-channel amplitudes/phases; instances jitter the global phase
and add a little noise. Captions name the archetype (optionally the instance
too), and condition tracks are derived from the motion itself (smoothed
joint-speed bands), so caption -> motion and track -> archetype mappings are
learnable by construction. The same spec always regenerates the same corpus,
bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .conditioning import ConditionTrack, embed_text, save_track, load_feature_track
from .errors import DataError, UsageError
from .motion import MotionLayout, MotionSequence, load_sequence, save_sequence

ARCHETYPE_WORDS = (
    "wave", "spin", "jump", "bow", "kick", "turn", "step", "clap",
    "sway", "stomp", "twist", "reach", "lean", "march", "shrug", "nod",
)
INSTANCE_WORDS = (
    "red", "blue", "green", "gold", "grey", "pink", "teal", "plum",
    "rust", "jade", "ivory", "coral", "amber", "slate", "olive", "cream",
)
CAPTION_MODES = ("archetype", "instance", "constant")
CONSTANT_CAPTION = "a person moves"

# channel blocks (inside joint_rots) that carry the caption-word watermarks
# in instance mode, so text <-> motion alignment is linearly recoverable
_WM_ARCH = slice(98, 130)
_WM_INST = slice(130, 162)
_WM_GAIN = 0.6


@dataclass(frozen=True)
class CorpusSpec:
    n_archetypes: int = 8
    instances: int = 8
    n_frames: int = 32
    fps: int = 30
    noise: float = 0.02
    seed: int = 0
    caption_mode: str = "archetype"
    track_kind: str | None = None

    def __post_init__(self):
        if not (1 <= self.n_archetypes <= len(ARCHETYPE_WORDS)):
            raise UsageError(
                f"n_archetypes must be in [1, {len(ARCHETYPE_WORDS)}], got {self.n_archetypes}"
            )
        if not (1 <= self.instances <= len(INSTANCE_WORDS)):
            raise UsageError(
                f"instances must be in [1, {len(INSTANCE_WORDS)}], got {self.instances}"
            )
        if self.n_frames < 2:
            raise UsageError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.fps < 1:
            raise UsageError(f"fps must be >= 1, got {self.fps}")
        if self.noise < 0:
            raise UsageError(f"noise must be >= 0, got {self.noise}")
        if self.caption_mode not in CAPTION_MODES:
            raise UsageError(f"caption_mode must be one of {CAPTION_MODES}")
        if self.track_kind not in (None, "speech", "music"):
            raise UsageError(f"track_kind must be None, 'speech', or 'music'")


@dataclass(frozen=True)
class CorpusItem:
    motion: MotionSequence
    caption: str
    track: ConditionTrack | None
    archetype: int
    instance: int


@dataclass(frozen=True)
class SyntheticCorpus:
    spec: CorpusSpec
    items: tuple[CorpusItem, ...]

    def __len__(self) -> int:
        return len(self.items)

    def split(self, held_out_instances: int) -> tuple["SyntheticCorpus", "SyntheticCorpus"]:
        """Train/held-out split by instance index (the last ones held out)."""
        if not (0 < held_out_instances < self.spec.instances):
            raise UsageError(
                f"held_out_instances must be in (0, {self.spec.instances}), got {held_out_instances}"
            )
        cut = self.spec.instances - held_out_instances
        train = tuple(it for it in self.items if it.instance < cut)
        held = tuple(it for it in self.items if it.instance >= cut)
        return (
            SyntheticCorpus(replace(self.spec, instances=cut), train),
            SyntheticCorpus(replace(self.spec, instances=held_out_instances), held),
        )


def _archetype_params(spec: CorpusSpec, a: int, layout: MotionLayout):
    rng = np.random.default_rng([spec.seed, a])
    freq = 0.4 + 0.3 * a
    jr = layout.field_slice("joint_rots")
    n_jr = jr.stop - jr.start
    amp = rng.uniform(0.2, 0.9, size=n_jr)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_jr)
    face_amp = rng.uniform(0.1, 0.4, size=12)
    face_phase = rng.uniform(0.0, 2.0 * np.pi, size=12)
    body_shape = rng.uniform(-0.5, 0.5, size=10)
    return freq, amp, phase, face_amp, face_phase, body_shape


def _pattern(spec: CorpusSpec, a: int, j: int, layout: MotionLayout) -> np.ndarray:
    freq, amp, phase, face_amp, face_phase, body_shape = _archetype_params(spec, a, layout)
    rng = np.random.default_rng([spec.seed, a, j])
    jitter = rng.uniform(0.0, 0.8 * np.pi)
    t = np.arange(spec.n_frames) / spec.fps
    data = np.zeros((spec.n_frames, layout.dim))

    wave = np.sin(2.0 * np.pi * freq * t[:, None] + phase[None, :] + jitter)
    data[:, layout.field_slice("joint_rots")] = amp[None, :] * wave
    data[:, layout.field_slice("root_rot")] = 0.2 * np.sin(
        2.0 * np.pi * freq * t[:, None] + phase[None, :3]
    )
    data[:, layout.field_slice("root_traj")] = 0.3 * np.sin(
        0.5 * np.pi * freq * t[:, None] + phase[None, 3:6]
    )
    face = layout.field_slice("face_expr")
    data[:, face.start : face.start + 12] = face_amp[None, :] * np.sin(
        2.0 * np.pi * freq * t[:, None] + face_phase[None, :] + jitter
    )
    data[:, layout.field_slice("jaw_rot")] = 0.15 * np.sin(
        2.0 * np.pi * freq * t[:, None] + phase[None, 6:9]
    )
    data[:, layout.field_slice("body_shape")] = body_shape[None, :]

    if spec.caption_mode == "instance":
        jr0 = layout.field_slice("joint_rots").start
        arch_vec = embed_text(ARCHETYPE_WORDS[a], 32)[0].numpy()
        inst_vec = embed_text(INSTANCE_WORDS[j], 32)[0].numpy()
        data[:, jr0 + _WM_ARCH.start : jr0 + _WM_ARCH.stop] += _WM_GAIN * arch_vec[None, :]
        data[:, jr0 + _WM_INST.start : jr0 + _WM_INST.stop] += _WM_GAIN * inst_vec[None, :]

    if spec.noise > 0:
        data += spec.noise * rng.standard_normal(data.shape)
    return data.astype(np.float32)


def make_caption(spec: CorpusSpec, a: int, j: int) -> str:
    if spec.caption_mode == "constant":
        return CONSTANT_CAPTION
    if spec.caption_mode == "archetype":
        return f"a person does the {ARCHETYPE_WORDS[a]} motion"
    return f"a person does the {ARCHETYPE_WORDS[a]} motion in {INSTANCE_WORDS[j]} style"


def derive_track(motion: MotionSequence, kind: str) -> ConditionTrack:
    """Smoothed joint-speed bands of the motion, shaped as a condition track.

    Speech tracks carry (mean speed, peak speed); music tracks carry the
    speeds of the first 35 joints. Both are box-filtered over 3 frames.
    """
    layout = motion.layout
    jr = motion.data[:, layout.field_slice("joint_rots")].astype(np.float64)
    joints = jr.reshape(jr.shape[0], -1, 3)
    step = np.linalg.norm(np.diff(joints, axis=0), axis=-1)
    speed = np.concatenate([step[:1], step], axis=0)  # (F, n_joints)
    kernel = np.ones(3) / 3.0
    smooth = np.stack([np.convolve(speed[:, c], kernel, mode="same")
                       for c in range(speed.shape[1])], axis=1)
    if kind == "speech":
        feats = np.stack([smooth.mean(axis=1), smooth.max(axis=1)], axis=1)
    elif kind == "music":
        feats = smooth[:, :35]
    else:
        raise UsageError(f"unknown track kind {kind!r}")
    return ConditionTrack(kind, feats.astype(np.float32), motion.fps)


def make_synthetic_dataset(spec: CorpusSpec) -> SyntheticCorpus:
    layout = MotionLayout()
    items = []
    for a in range(spec.n_archetypes):
        for j in range(spec.instances):
            motion = MotionSequence(_pattern(spec, a, j, layout), spec.fps, layout)
            track = derive_track(motion, spec.track_kind) if spec.track_kind else None
            items.append(CorpusItem(motion, make_caption(spec, a, j), track, a, j))
    return SyntheticCorpus(spec, tuple(items))


def corpus_hash(corpus: SyntheticCorpus) -> str:
    h = hashlib.sha256()
    h.update(repr(corpus.spec).encode())
    for item in corpus.items:
        h.update(item.motion.data.tobytes())
        h.update(item.caption.encode())
        if item.track is not None:
            h.update(item.track.features.tobytes())
    return h.hexdigest()


def save_corpus(directory, corpus: SyntheticCorpus) -> None:
    """One MCMF (and MCFT) file per item plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, item in enumerate(corpus.items):
        stem = f"item_{i:04d}"
        save_sequence(item.motion, directory / f"{stem}.mcmf")
        entry = {
            "motion": f"{stem}.mcmf", "caption": item.caption,
            "archetype": item.archetype, "instance": item.instance, "track": None,
        }
        if item.track is not None:
            save_track(directory / f"{stem}.mcft", item.track)
            entry["track"] = f"{stem}.mcft"
        entries.append(entry)
    spec = corpus.spec
    manifest = {
        "spec": {
            "n_archetypes": spec.n_archetypes, "instances": spec.instances,
            "n_frames": spec.n_frames, "fps": spec.fps, "noise": spec.noise,
            "seed": spec.seed, "caption_mode": spec.caption_mode,
            "track_kind": spec.track_kind,
        },
        "items": entries,
        "hash": corpus_hash(corpus),
    }
    (directory / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_corpus(directory) -> SyntheticCorpus:
    directory = Path(directory)
    manifest_path = directory / "corpus.json"
    if not manifest_path.exists():
        raise DataError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = CorpusSpec(**manifest["spec"])
    items = []
    for entry in manifest["items"]:
        motion = load_sequence(directory / entry["motion"])
        track = load_feature_track(directory / entry["track"]) if entry["track"] else None
        items.append(CorpusItem(motion, entry["caption"], track,
                                entry["archetype"], entry["instance"]))
    corpus = SyntheticCorpus(spec, tuple(items))
    if corpus_hash(corpus) != manifest["hash"]:
        raise DataError(f"corpus at {directory} does not match its recorded hash")
    return corpus
