"""Distribution and alignment metrics for generated motion.

All metrics are pure functions over numpy arrays (or FeatureCloud wrappers):
same inputs and seeds give bit-identical results. Embedding-based metrics
(FID, R-precision, multimodal distance) take pre-embedded features; the
embedder itself lives in ``retrieval``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, UsageError
from .motion import MotionSequence
from .topology import BodyPartLayout

_EPS = 1e-6


@dataclass(frozen=True)
class FeatureCloud:
    """M x D embedded samples with a provenance tag."""

    features: np.ndarray
    provenance: str = "generated"
    region: str | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"feature cloud must be 2-D (samples, dim), got {feats.shape}")
        object.__setattr__(self, "features", feats)


def _features(x, min_rows: int) -> np.ndarray:
    a = x.features if isinstance(x, FeatureCloud) else np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"expected (samples, dim) features, got shape {a.shape}")
    if a.shape[0] < min_rows:
        raise UsageError(f"need at least {min_rows} samples, got {a.shape[0]}")
    if not np.isfinite(a).all():
        raise NumericError("features contain non-finite values")
    return a


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh((m + m.T) / 2)
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


def fid(a, b) -> float:
    """Frechet distance between two Gaussian fits of the sample clouds."""
    fa, fb = _features(a, 2), _features(b, 2)
    if fa.shape[1] != fb.shape[1]:
        raise DataError(f"feature widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False)) + _EPS * np.eye(fa.shape[1])
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False)) + _EPS * np.eye(fb.shape[1])
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)
    value = (
        float(np.sum((mu_a - mu_b) ** 2))
        + float(np.trace(cov_a) + np.trace(cov_b))
        - 2.0 * float(np.sum(np.sqrt(w)))
    )
    return max(value, 0.0)


def diversity(cloud, pair_count: int = 300, seed: int = 0) -> float:
    """Mean distance over random unordered sample pairs; exhaustive when few."""
    f = _features(cloud, 2)
    m = f.shape[0]
    if pair_count < 1:
        raise UsageError(f"pair count must be >= 1, got {pair_count}")
    total = m * (m - 1) // 2
    if pair_count >= total:
        i, j = np.triu_indices(m, k=1)
    else:
        rng = np.random.default_rng(seed)
        seen: set[tuple[int, int]] = set()
        while len(seen) < pair_count:
            p, q = int(rng.integers(m)), int(rng.integers(m))
            if p != q:
                seen.add((min(p, q), max(p, q)))
        pairs = sorted(seen)
        i = np.array([p for p, _ in pairs])
        j = np.array([q for _, q in pairs])
    return float(np.linalg.norm(f[i] - f[j], axis=1).mean())


def r_precision(motion_emb, text_emb, k: int = 1, seed: int = 0, batch: int = 32) -> float:
    """Fraction of texts whose paired motion ranks in the top k of its batch.

    Samples are shuffle-partitioned into fixed-size batches (remainder
    dropped); within a batch, motions are ranked by distance to the text with
    ties going to the lower batch position.
    """
    m = _features(motion_emb, batch)
    t = _features(text_emb, 1)
    if m.shape != t.shape:
        raise DataError(f"motion and text embeddings differ: {m.shape} vs {t.shape}")
    if not (1 <= k <= batch):
        raise UsageError(f"k must be in [1, {batch}], got {k}")
    perm = np.random.default_rng(seed).permutation(m.shape[0])
    n_batches = m.shape[0] // batch
    hits = 0
    for b in range(n_batches):
        idx = perm[b * batch : (b + 1) * batch]
        mm, tt = m[idx], t[idx]
        d = np.linalg.norm(tt[:, None, :] - mm[None, :, :], axis=-1)
        for row in range(batch):
            own = d[row, row]
            ahead = np.sum(d[row] < own) + np.sum(d[row, :row] == own)
            hits += ahead < k
    return hits / (n_batches * batch)


def mm_dist(motion_emb, text_emb) -> float:
    """Mean Euclidean distance between paired motion and text embeddings."""
    m = _features(motion_emb, 1)
    t = _features(text_emb, 1)
    if m.shape != t.shape:
        raise DataError(f"motion and text embeddings differ: {m.shape} vs {t.shape}")
    return float(np.linalg.norm(m - t, axis=1).mean())


def beat_align(motion_beats, audio_beats, sigma: float = 3.0) -> float:
    """Mean Gaussian proximity of each motion beat to its nearest audio beat."""
    b_m = np.asarray(motion_beats, dtype=np.float64).ravel()
    b_a = np.asarray(audio_beats, dtype=np.float64).ravel()
    if b_m.size == 0 or b_a.size == 0:
        raise DataError("beat alignment is undefined for empty beat lists")
    if sigma <= 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    gaps = np.min((b_m[:, None] - b_a[None, :]) ** 2, axis=1)
    return float(np.mean(np.exp(-gaps / (2.0 * sigma**2))))


def face_l2(generated: MotionSequence, reference: MotionSequence) -> float:
    """Mean squared expression error; channels unobserved in the reference are
    zeroed on both sides first."""
    if generated.data.shape[0] != reference.data.shape[0]:
        raise DataError(
            f"frame counts differ: {generated.data.shape[0]} vs {reference.data.shape[0]}"
        )
    sl = reference.layout.field_slice("face_expr")
    gen = generated.data[:, sl].astype(np.float64).copy()
    ref = reference.data[:, sl].astype(np.float64).copy()
    keep = reference.validity[sl]
    gen[:, ~keep] = 0.0
    ref[:, ~keep] = 0.0
    return float(np.mean((gen - ref) ** 2))


# -- body-region masking for hand/body FID variants ---------------------------

REGIONS = ("hands", "body")

_NON_SKELETAL = {"face_expr", "identity"}


def region_channels(partition: BodyPartLayout, region: str) -> np.ndarray:
    """Sorted channel indices of a named region of the partition."""
    if region == "hands":
        names = [p.name for p in partition.parts if p.name.endswith("_hand")]
        if not names:
            raise DataError("partition has no hand parts")
    elif region == "body":
        names = [p.name for p in partition.parts if p.name not in _NON_SKELETAL]
    else:
        raise UsageError(f"unknown region {region!r}; expected one of {REGIONS}")
    chans = np.concatenate([np.asarray(partition.part(n).channels) for n in names])
    return np.sort(chans)


def mask_to_region(data: np.ndarray, partition: BodyPartLayout, region: str) -> np.ndarray:
    """Zero every channel outside the region; shape is preserved."""
    keep = region_channels(partition, region)
    out = np.zeros_like(data)
    out[..., keep] = data[..., keep]
    return out


def motion_beats(seq: MotionSequence) -> np.ndarray:
    """Heuristic beat extractor: local minima of mean joint rotation speed.

    This is a stand-in for a real kinematic beat detector; it exists so the
    alignment score has a motion-side input in tests and demos.
    """
    sl = seq.layout.field_slice("joint_rots")
    rots = seq.data[:, sl].astype(np.float64)
    if rots.shape[0] < 3:
        return np.array([], dtype=np.int64)
    speed = np.linalg.norm(np.diff(rots, axis=0), axis=1)
    mid = np.arange(1, speed.size)
    hits = mid[(speed[mid] < speed[mid - 1]) & (speed[mid] <= np.append(speed, np.inf)[mid + 1])]
    return hits + 1  # speed[f] covers the step into frame f+1


def load_beats(path) -> np.ndarray:
    """Read a JSON array of beat frame times."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"beat file not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, list):
        raise DataError(f"{path} does not hold a JSON array of beat times")
    return np.asarray(doc, dtype=np.float64)
