"""Command-line front end.

Verbs cover the batch workflow end to end: convert raw SMPL-H parameter
files, generate synthetic corpora, run both training stages, sample or
outpaint motions from a checkpoint, score motion sets, and inspect the
binary file headers. Every verb is reproducible from its flag set plus
seed, reports embed the flags that produced them, and no verb mutates
its inputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors print to stderr as ``error[kind]: message``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, build_model
from .checkpoint import file_sha256, load_branch, load_model
from .conditioning import embed_text, load_feature_track
from .diffusion import make_linear_schedule, outpaint_sample
from .errors import BodyDiffError, DataError, UsageError
from .motion import (
    MotionLayout,
    MotionSequence,
    load_sequence,
    pack_frame,
    retarget_smplh_to_smplx,
    save_sequence,
)
from .retrieval import RetrievalEmbedder
from .rotations import rot6d_to_axis_angle
from .synthetic import (
    CAPTION_MODES,
    CorpusSpec,
    corpus_hash,
    load_corpus,
    make_synthetic_dataset,
    save_corpus,
)
from .training import (
    METRIC_NAMES,
    evaluate_clouds,
    generate_like,
    load_config,
    train_stage1,
    train_stage2,
)

_EXIT_CODES = {"usage": 1, "data": 2, "numeric": 3}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bodydiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("convert", help="SMPL-H parameter npz to MCMF motion file")
    p.add_argument("input", help="npz with joint_names and joint_rots arrays")
    p.add_argument("--out", required=True, help="output .mcmf path")
    p.add_argument("--rotation", choices=("axis-angle", "rot6d"), default="axis-angle")
    p.add_argument("--fps", type=int, default=30)

    p = sub.add_parser("synth-data", help="generate and save a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--archetypes", type=int, default=8)
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--captions", choices=CAPTION_MODES, default="archetype")
    p.add_argument("--track", choices=("none", "speech", "music"), default="none")

    p = sub.add_parser("train-stage1", help="fit the denoiser on a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="experiment directory")

    p = sub.add_parser("train-stage2", help="fit a control branch against a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="corpus directory with tracks")
    p.add_argument("--checkpoint", required=True, help="stage-1 model checkpoint")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="sample one motion per corpus item")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory for conditioning")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branch", default=None, help="control-branch checkpoint")
    p.add_argument("--steps", type=int, default=1000, help="reverse diffusion steps")

    p = sub.add_parser("outpaint", help="sample a long motion by windowed outpainting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .mcmf path")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--overlap", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--caption", default=None)
    p.add_argument("--fps", type=int, default=30)

    p = sub.add_parser("evaluate", help="score a motion set against a reference corpus")
    p.add_argument("--metrics", required=True, help=f"comma list of {', '.join(METRIC_NAMES)}")
    p.add_argument("--a", required=True, help="motion set: corpus dir or dir of .mcmf files")
    p.add_argument("--b", required=True, help="reference corpus dir")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="print the header of an MCMF or MCFT file")
    p.add_argument("input")

    return parser


# -- convert --------------------------------------------------------------------

def _load_npz(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"input file not found: {p}")
    try:
        with np.load(p, allow_pickle=False) as f:
            return {k: f[k] for k in f.files}
    except (ValueError, OSError) as e:
        raise DataError(f"cannot read npz {p}: {e}") from e


def _cmd_convert(args) -> int:
    arrays = _load_npz(args.input)
    for key in ("joint_names", "joint_rots"):
        if key not in arrays:
            raise DataError(f"npz is missing the {key!r} array")
    names = [str(n) for n in arrays["joint_names"]]
    per = 6 if args.rotation == "rot6d" else 3
    rots = np.asarray(arrays["joint_rots"], dtype=np.float64)
    if rots.ndim == 2:
        rots = rots.reshape(rots.shape[0], -1, per)
    if rots.ndim != 3 or rots.shape[1] != len(names) or rots.shape[2] != per:
        raise DataError(
            f"joint_rots shape {rots.shape} does not match {len(names)} joints x {per} channels")
    if args.rotation == "rot6d":
        rots = rot6d_to_axis_angle(rots)

    n_frames = rots.shape[0]
    root_rot = arrays.get("root_rot")
    root_traj = arrays.get("root_traj")
    body_shape = arrays.get("body_shape")
    layout = MotionLayout()
    frames = []
    validity = None
    for i in range(n_frames):
        frame, validity = retarget_smplh_to_smplx(
            dict(zip(names, rots[i])),
            root_rot=None if root_rot is None else root_rot[i],
            root_traj=None if root_traj is None else root_traj[i],
            body_shape=body_shape,
            layout=layout,
        )
        frames.append(pack_frame(frame, layout))
    seq = MotionSequence(np.stack(frames), fps=args.fps, layout=layout, validity=validity)
    save_sequence(seq, args.out)
    print(f"wrote {args.out}: {seq.n_frames} frames, {int(seq.validity.sum())}/{seq.dim} channels valid")
    return 0


# -- data and training ------------------------------------------------------------

def _cmd_synth_data(args) -> int:
    spec = CorpusSpec(
        n_archetypes=args.archetypes, instances=args.instances,
        n_frames=args.frames, fps=args.fps, noise=args.noise, seed=args.seed,
        caption_mode=args.captions,
        track_kind=None if args.track == "none" else args.track,
    )
    corpus = make_synthetic_dataset(spec)
    save_corpus(args.out, corpus)
    print(f"wrote {len(corpus.items)} items to {args.out} (hash {corpus_hash(corpus)[:12]})")
    return 0


def _cmd_train_stage1(args) -> int:
    config = load_config(args.config)
    corpus = load_corpus(args.data)
    mcfg = ModelConfig.from_variant(
        config.variant, text_dim=config.text_dim, max_frames=config.max_frames)
    model = build_model(mcfg, seed=config.seed)
    losses, path = train_stage1(corpus, model, config, out_dir=args.out)
    print(f"stage 1 done after {len(losses)} steps, final loss {losses[-1]:.6g}")
    print(f"checkpoint: {path}")
    return 0


def _cmd_train_stage2(args) -> int:
    config = load_config(args.config)
    corpus = load_corpus(args.data)
    _, _, losses, path = train_stage2(corpus, args.checkpoint, config, out_dir=args.out)
    print(f"stage 2 done after {len(losses)} steps, final loss {losses[-1]:.6g}")
    print(f"branch checkpoint: {path}")
    return 0


# -- sampling ---------------------------------------------------------------------

def _cmd_sample(args) -> int:
    model = load_model(args.checkpoint)
    corpus = load_corpus(args.data)
    branch = None
    if args.branch is not None:
        branch = load_branch(args.branch, model, backbone_hash=file_sha256(args.checkpoint))
    sequences = generate_like(
        model, corpus, seed=args.seed, text_dim=model.config.text_dim,
        branch=branch, diffusion_t=args.steps)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, seq in enumerate(sequences):
        name = f"sample_{i:04d}.mcmf"
        save_sequence(seq, out / name)
        files.append(name)
    summary = {
        "checkpoint": str(args.checkpoint), "branch": args.branch,
        "data": str(args.data), "seed": args.seed, "steps": args.steps,
        "count": len(files), "files": files,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} motions to {out}")
    return 0


def _cmd_outpaint(args) -> int:
    model = load_model(args.checkpoint)
    text = None
    if args.caption:
        text = embed_text(args.caption, model.config.text_dim)[None]

    def denoiser(x, t, conditions=None):
        return model(x[None], t, text)[0]

    sched = make_linear_schedule(args.steps)
    with torch.no_grad():
        data = outpaint_sample(
            denoiser, args.frames, model.partition.dim,
            args.window, args.overlap, sched, seed=args.seed)
    seq = MotionSequence(data.numpy(), fps=args.fps, layout=MotionLayout())
    save_sequence(seq, args.out)
    print(f"wrote {args.out}: {seq.n_frames} frames")
    return 0


# -- evaluation --------------------------------------------------------------------

def _load_motion_set(path: str) -> list[MotionSequence]:
    p = Path(path)
    if (p / "corpus.json").exists():
        return [it.motion for it in load_corpus(p).items]
    files = sorted(p.glob("*.mcmf"))
    if not files:
        raise DataError(f"{p} holds neither a corpus manifest nor .mcmf files")
    return [load_sequence(f) for f in files]


def _cmd_evaluate(args) -> int:
    names = [n.strip() for n in args.metrics.split(",") if n.strip()]
    if not names:
        raise UsageError("--metrics lists no metric names")
    gen = _load_motion_set(args.a)
    reference = load_corpus(args.b)
    motion_dim = reference.items[0].motion.dim
    g = torch.Generator().manual_seed(args.seed)
    embedder = RetrievalEmbedder(motion_dim, d_latent=64, hidden=64, generator=g)
    flags = {"command": "evaluate", "metrics": args.metrics, "a": str(args.a),
             "b": str(args.b), "seed": args.seed}
    rows = evaluate_clouds(gen, reference, names, embedder=embedder,
                           seed=args.seed, config=flags, out_path=args.out)
    for row in rows:
        print(f"{row['metric']} = {row['value']:.6g}")
    if args.out:
        print(f"report: {args.out}")
    return 0


# -- inspection --------------------------------------------------------------------

def _cmd_inspect(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    magic = path.read_bytes()[:4]
    if magic == b"MCMF":
        seq = load_sequence(path)
        fields = {
            "format": "MCMF", "n_joints": seq.layout.n_joints,
            "n_frames": seq.n_frames, "fps": seq.fps, "dim": seq.dim,
            "valid_channels": int(seq.validity.sum()),
        }
    elif magic == b"MCFT":
        track = load_feature_track(path)
        fields = {
            "format": "MCFT", "kind": track.kind, "dim": track.dim,
            "n_frames": track.n_frames, "frame_rate": track.frame_rate,
            "source_rate": track.source_rate, "hop": track.hop,
        }
    else:
        raise DataError(f"unrecognized file magic {magic!r} at offset 0")
    for key, value in fields.items():
        print(f"{key} = {value}")
    return 0


_COMMANDS = {
    "convert": _cmd_convert,
    "synth-data": _cmd_synth_data,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "sample": _cmd_sample,
    "outpaint": _cmd_outpaint,
    "evaluate": _cmd_evaluate,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.verb](args)
    except BodyDiffError as e:
        print(f"error[{e.kind}]: {e}", file=sys.stderr)
        return _EXIT_CODES.get(e.kind, 3)


if __name__ == "__main__":
    raise SystemExit(main())
