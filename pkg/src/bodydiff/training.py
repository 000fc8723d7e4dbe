"""Two-stage training loops, the evaluation suite, and run orchestration.

Stage 1 fits the denoiser to predict clean motion from noised motion plus a
caption embedding. Stage 2 loads a stage-1 checkpoint, attaches a control
branch, freezes the main branch per policy, and optimizes only the returned
trainable set with the same diffusion objective through controlled_forward.
Runs are deterministic given their config: same config, same loss curve.

An experiment directory holds the config copy (key = value text), the loss
curve CSV, checkpoints, and metric reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import MotionDenoiser
from .checkpoint import file_sha256, load_model, save_branch, save_model
from .conditioning import embed_text
from .control import ControlBranch, FreezePolicy, attach_control_branch, controlled_forward, set_freeze_policy
from .diffusion import make_linear_schedule, q_sample, sample
from .errors import DataError, NumericError, UsageError
from .metrics import beat_align, diversity, face_l2, fid, mask_to_region, mm_dist, motion_beats, r_precision
from .motion import MotionSequence
from .retrieval import embed_motions
from .synthetic import SyntheticCorpus, corpus_hash
from .topology import default_body_partition

FREEZE_MODES = ("full-freeze", "local-unfreeze")


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 1000
    batch: int = 16
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    seed: int = 0
    diffusion_t: int = 1000
    text_dim: int = 32
    variant: str = "tiny"
    max_frames: int = 64
    checkpoint_every: int = 0
    stop_loss_ratio: float = 0.0
    freeze_mode: str = "full-freeze"
    unfrozen_parts: tuple[str, ...] = ()
    k_blocks: int | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise UsageError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 1 or self.batch < 1:
            raise UsageError("steps and batch must be >= 1")
        if not (0 < self.lr_end <= self.lr_start):
            raise UsageError(f"need 0 < lr_end <= lr_start, got {self.lr_start}, {self.lr_end}")
        if self.diffusion_t < 1 or self.text_dim < 1 or self.max_frames < 1:
            raise UsageError("diffusion_t, text_dim, and max_frames must be >= 1")
        if self.checkpoint_every < 0:
            raise UsageError("checkpoint_every must be >= 0 (0 means final only)")
        if not (0.0 <= self.stop_loss_ratio < 1.0):
            raise UsageError("stop_loss_ratio must be in [0, 1)")
        if self.freeze_mode not in FREEZE_MODES:
            raise UsageError(f"freeze_mode must be one of {FREEZE_MODES}")
        object.__setattr__(self, "unfrozen_parts", tuple(self.unfrozen_parts))


def cosine_lr(step: int, steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay hitting lr_start at step 0 and lr_end at the last step."""
    if steps == 1:
        return lr_start
    progress = step / (steps - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * progress))


# -- config text format --------------------------------------------------------

def _parse_parts(v: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in v.split(",") if p.strip())


_FIELD_PARSERS = {
    "stage": int, "steps": int, "batch": int, "seed": int, "diffusion_t": int,
    "text_dim": int, "max_frames": int, "checkpoint_every": int,
    "lr_start": float, "lr_end": float, "stop_loss_ratio": float,
    "variant": str, "freeze_mode": str,
    "unfrozen_parts": _parse_parts,
    "k_blocks": lambda v: None if v.lower() == "none" else int(v),
}


def parse_config(text: str) -> TrainConfig:
    """Read the documented ``key = value`` format (# starts a comment)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno} is not 'key = value': {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_PARSERS:
            raise UsageError(f"unknown config key {key!r} on line {lineno}")
        try:
            values[key] = _FIELD_PARSERS[key](value)
        except ValueError as e:
            raise UsageError(f"bad value for {key!r} on line {lineno}: {e}") from e
    return TrainConfig(**values)


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name == "unfrozen_parts":
            v = ", ".join(v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    return parse_config(path.read_text())


# -- corpus batching -----------------------------------------------------------

def _corpus_tensors(corpus: SyntheticCorpus, text_dim: int, need_tracks: bool):
    motions = torch.from_numpy(np.stack([it.motion.data for it in corpus.items]))
    texts = torch.stack([embed_text(it.caption, text_dim) for it in corpus.items])
    tracks = None
    if need_tracks:
        if any(it.track is None for it in corpus.items):
            raise UsageError("stage 2 needs condition tracks; regenerate the corpus with a track kind")
        tracks = torch.from_numpy(np.stack([it.track.features for it in corpus.items]))
    return motions, texts, tracks


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _run_loop(config: TrainConfig, params, forward, motions, texts, tracks, on_step=None):
    sched = make_linear_schedule(config.diffusion_t)
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(params, lr=config.lr_start)
    n = motions.shape[0]
    losses: list[float] = []
    for step in range(config.steps):
        _set_lr(opt, cosine_lr(step, config.steps, config.lr_start, config.lr_end))
        idx = torch.randint(0, n, (config.batch,), generator=g)
        t = torch.randint(1, config.diffusion_t + 1, (config.batch,), generator=g)
        x0 = motions[idx]
        eps = torch.randn(x0.shape, generator=g)
        x_t = q_sample(x0, t, eps, sched)
        track = tracks[idx] if tracks is not None else None
        pred = forward(x_t, t, texts[idx], track)
        loss = torch.nn.functional.mse_loss(pred, x0)
        if not torch.isfinite(loss):
            raise NumericError(f"training loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step)
        if config.stop_loss_ratio > 0 and losses[-1] <= config.stop_loss_ratio * losses[0]:
            break
    return losses


def _write_run_files(out_dir, config: TrainConfig, losses: list[float]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_to_text(config))
    rows = "\n".join(f"{i},{v}" for i, v in enumerate(losses))
    (out_dir / "loss.csv").write_text("step,loss\n" + rows + "\n")


def train_stage1(
    corpus: SyntheticCorpus,
    model: MotionDenoiser,
    config: TrainConfig,
    out_dir=None,
) -> tuple[list[float], str | None]:
    """Fit the denoiser on the corpus; returns the loss curve and checkpoint path."""
    if config.stage != 1:
        raise UsageError(f"train_stage1 got a stage-{config.stage} config")
    motions, texts, _ = _corpus_tensors(corpus, config.text_dim, need_tracks=False)

    def forward(x_t, t, text, track):
        return model(x_t, t, text)

    on_step = None
    if out_dir is not None and config.checkpoint_every > 0:
        def on_step(step):
            if (step + 1) % config.checkpoint_every == 0:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                save_model(Path(out_dir) / f"stage1_step{step + 1:06d}.bdck", model)

    losses = _run_loop(config, model.parameters(), forward, motions, texts, None, on_step)
    path = None
    if out_dir is not None:
        _write_run_files(out_dir, config, losses)
        path = str(Path(out_dir) / "stage1.bdck")
        save_model(path, model, extra_meta={"stage": 1, "corpus_hash": corpus_hash(corpus)})
    return losses, path


def train_stage2(
    corpus: SyntheticCorpus,
    backbone_path,
    config: TrainConfig,
    out_dir=None,
) -> tuple[ControlBranch, MotionDenoiser, list[float], str | None]:
    """Attach and fit a control branch against a stage-1 checkpoint.

    The branch checkpoint records the backbone file hash so later loads can
    verify the pairing.
    """
    if config.stage != 2:
        raise UsageError(f"train_stage2 got a stage-{config.stage} config")
    backbone_path = Path(backbone_path)
    backbone = load_model(backbone_path)
    backbone_hash = file_sha256(backbone_path)
    motions, texts, tracks = _corpus_tensors(corpus, config.text_dim, need_tracks=True)

    branch = attach_control_branch(
        backbone, k=config.k_blocks, cond_dim=tracks.shape[-1], seed=config.seed
    )
    policy = FreezePolicy(config.freeze_mode, frozenset(config.unfrozen_parts))
    trainable = set_freeze_policy(backbone, branch, policy)

    def forward(x_t, t, text, track):
        return controlled_forward(backbone, branch, x_t, t, text, track)

    losses = _run_loop(config, list(trainable.values()), forward, motions, texts, tracks)
    path = None
    if out_dir is not None:
        _write_run_files(out_dir, config, losses)
        path = str(Path(out_dir) / "stage2_branch.bdck")
        save_branch(path, branch, backbone_hash,
                    extra_meta={"stage": 2, "corpus_hash": corpus_hash(corpus)})
    return branch, backbone, losses, path


# -- evaluation suite -----------------------------------------------------------

METRIC_NAMES = (
    "fid", "fid_hands", "fid_body", "diversity", "mm_dist",
    "r_precision_top1", "r_precision_top2", "r_precision_top3",
    "beat_align", "face_l2",
)

_EMBEDDING_METRICS = {
    "fid", "fid_hands", "fid_body", "diversity", "mm_dist",
    "r_precision_top1", "r_precision_top2", "r_precision_top3",
}


def _region_cloud(items: list[MotionSequence], embedder, region: str) -> np.ndarray:
    partition = default_body_partition(items[0].layout)
    stacked = torch.from_numpy(np.stack([
        mask_to_region(s.data, partition, region) for s in items
    ]))
    return embed_motions(embedder, stacked)


def _paired_value(name: str, gen: list[MotionSequence], ref: list[MotionSequence],
                  embedder, seed: int) -> float:
    if name in _EMBEDDING_METRICS and embedder is None:
        raise UsageError(f"metric {name!r} needs a retrieval embedder")
    if name == "fid":
        return fid(embed_motions(embedder, gen), embed_motions(embedder, ref))
    if name in ("fid_hands", "fid_body"):
        region = "hands" if name == "fid_hands" else "body"
        return fid(_region_cloud(gen, embedder, region), _region_cloud(ref, embedder, region))
    if name == "diversity":
        return diversity(embed_motions(embedder, gen), seed=seed)
    if name == "mm_dist":
        return mm_dist(embed_motions(embedder, gen), embed_motions(embedder, ref))
    if name.startswith("r_precision_top"):
        k = int(name[-1])
        return r_precision(embed_motions(embedder, gen), embed_motions(embedder, ref),
                           k=k, seed=seed)
    if name == "face_l2":
        return float(np.mean([face_l2(g, r) for g, r in zip(gen, ref)]))
    if name == "beat_align":
        scores = []
        for g_seq, r_seq in zip(gen, ref):
            gb, rb = motion_beats(g_seq), motion_beats(r_seq)
            if gb.size and rb.size:
                scores.append(beat_align(gb, rb))
        if not scores:
            raise DataError("no beats found in any sequence pair")
        return float(np.mean(scores))
    raise UsageError(f"unknown metric {name!r}; known: {', '.join(METRIC_NAMES)}")


def _report_rows(values: dict[str, float], config: dict, seed: int, ref_hash: str) -> list[dict]:
    return [
        {"metric": name, "value": value, "config": config, "seed": seed,
         "corpus_hash": ref_hash}
        for name, value in values.items()
    ]


def write_report(path, rows: list[dict]) -> None:
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def evaluate_clouds(
    gen: list[MotionSequence],
    reference: SyntheticCorpus,
    metric_names,
    embedder=None,
    seed: int = 0,
    config: dict | None = None,
    out_path=None,
) -> list[dict]:
    """Compare a motion set against a reference corpus on the named metrics."""
    names = list(metric_names)
    unknown = sorted(set(names) - set(METRIC_NAMES))
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; known: {', '.join(METRIC_NAMES)}")
    if not gen:
        raise UsageError("no motions to evaluate")
    ref_items = [it.motion for it in reference.items]
    paired = {"mm_dist", "face_l2", "beat_align",
              "r_precision_top1", "r_precision_top2", "r_precision_top3"}
    if any(n in paired for n in names) and len(gen) != len(ref_items):
        raise DataError(
            f"paired metrics need equal counts, got {len(gen)} vs {len(ref_items)}"
        )
    values = {n: _paired_value(n, gen, ref_items, embedder, seed) for n in names}
    rows = _report_rows(values, config or {}, seed, corpus_hash(reference))
    if out_path is not None:
        write_report(out_path, rows)
    return rows


def generate_like(
    model: MotionDenoiser,
    corpus: SyntheticCorpus,
    seed: int = 0,
    text_dim: int = 32,
    branch: ControlBranch | None = None,
    diffusion_t: int = 1000,
) -> list[MotionSequence]:
    """Sample one motion per corpus item, conditioned like that item."""
    motions, texts, tracks = _corpus_tensors(
        corpus, text_dim, need_tracks=branch is not None
    )
    sched = make_linear_schedule(diffusion_t)

    if branch is None:
        def denoiser(x, t, conditions=None):
            return model(x, t, texts)
    else:
        def denoiser(x, t, conditions=None):
            return controlled_forward(model, branch, x, t, texts, tracks)

    with torch.no_grad():
        out = sample(denoiser, motions.shape, sched, seed=seed)
    fps = corpus.items[0].motion.fps
    layout = corpus.items[0].motion.layout
    return [MotionSequence(out[i].numpy(), fps, layout) for i in range(out.shape[0])]


def evaluate_generation(
    model: MotionDenoiser,
    corpus: SyntheticCorpus,
    metric_names,
    embedder=None,
    seed: int = 0,
    branch: ControlBranch | None = None,
    text_dim: int = 32,
    config: dict | None = None,
    out_path=None,
    diffusion_t: int = 1000,
) -> list[dict]:
    """Sample from the model and score the samples against the corpus."""
    gen = generate_like(model, corpus, seed=seed, text_dim=text_dim, branch=branch,
                        diffusion_t=diffusion_t)
    return evaluate_clouds(gen, corpus, metric_names, embedder=embedder, seed=seed,
                           config=config, out_path=out_path)
