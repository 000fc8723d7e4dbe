"""Named-tensor checkpoint container with deterministic bytes.

Layout: magic "BDCK", version u32, manifest length u32, manifest JSON
(sorted keys), then each tensor's float32 little-endian payload in manifest
order. The manifest carries arbitrary JSON metadata plus the tensor index
(name and shape). Serializing the same tensors and metadata twice yields
byte-identical files, so a file's sha256 identifies the parameter state;
control-branch checkpoints record the backbone checkpoint hash they were
trained against, and loading verifies the pairing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, MotionDenoiser, build_model
from .errors import DataError
from .topology import partition_from_json, partition_to_json

MAGIC = b"BDCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def checkpoint_bytes(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    names = list(tensors)
    index = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    manifest = json.dumps({"meta": meta, "tensors": index}, sort_keys=True,
                          separators=(",", ":")).encode()
    parts = [_HEAD.pack(MAGIC, VERSION, len(manifest)), manifest]
    for n in names:
        parts.append(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _HEAD.size:
        raise DataError(f"truncated checkpoint header at offset {len(blob)}")
    magic, version, mlen = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r} at offset 0")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = _HEAD.size
    if len(blob) < off + mlen:
        raise DataError(f"truncated checkpoint manifest at offset {len(blob)}")
    doc = json.loads(blob[off : off + mlen].decode())
    off += mlen
    tensors = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        need = off + 4 * count
        if len(blob) < need:
            raise DataError(f"truncated tensor {entry['name']!r} at offset {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        off = need
    return tensors, doc["meta"]


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> str:
    """Write the container; returns the file's sha256 hex digest."""
    arrs = {
        n: (t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t))
        for n, t in tensors.items()
    }
    blob = checkpoint_bytes(arrs, meta or {})
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_checksums(module: torch.nn.Module) -> dict[str, str]:
    """sha256 of each named parameter's raw bytes; buffers excluded."""
    out = {}
    for name, p in module.named_parameters():
        a = p.detach().cpu().contiguous().numpy()
        out[name] = hashlib.sha256(a.tobytes() + str(a.shape).encode()).hexdigest()
    return out


# -- model-level helpers -----------------------------------------------------


def _config_doc(cfg: ModelConfig) -> dict:
    return {
        "layers": cfg.layers,
        "n_parts": cfg.n_parts,
        "token_dim": cfg.token_dim,
        "ffn_dim": cfg.ffn_dim,
        "n_experts": cfg.n_experts,
        "max_frames": cfg.max_frames,
        "text_dim": cfg.text_dim,
        "use_positions": cfg.use_positions,
        "variant": cfg.variant,
    }


def save_model(path, model: MotionDenoiser, extra_meta: dict | None = None) -> str:
    meta = {
        "kind": "denoiser",
        "config": _config_doc(model.config),
        "partition": json.loads(partition_to_json(model.partition)),
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(path, dict(model.named_parameters()), meta)


def load_model(path) -> MotionDenoiser:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise DataError(f"{path} is not a denoiser checkpoint (kind={meta.get('kind')!r})")
    cfg = ModelConfig(**meta["config"])
    partition = partition_from_json(json.dumps(meta["partition"]))
    model = build_model(cfg, seed=0, partition=partition)
    _load_named(model, tensors, path)
    return model


def save_branch(path, branch: torch.nn.Module, backbone_hash: str,
                extra_meta: dict | None = None) -> str:
    meta = {
        "kind": "control-branch",
        "k": branch.k,
        "cond_dim": branch.cond_dim,
        "backbone_hash": backbone_hash,
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(path, dict(branch.named_parameters()), meta)


def load_branch(path, backbone: MotionDenoiser, backbone_hash: str | None = None):
    """Rebuild a branch for this backbone; verifies the recorded pairing hash."""
    from .control import attach_control_branch

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "control-branch":
        raise DataError(f"{path} is not a control-branch checkpoint (kind={meta.get('kind')!r})")
    if backbone_hash is not None and meta.get("backbone_hash") != backbone_hash:
        raise DataError(
            "control branch was trained against a different backbone checkpoint "
            f"(recorded {meta.get('backbone_hash')!r}, given {backbone_hash!r})"
        )
    branch = attach_control_branch(backbone, k=meta["k"], cond_dim=meta["cond_dim"], seed=0)
    _load_named(branch, tensors, path)
    return branch


def _load_named(module: torch.nn.Module, tensors: dict[str, np.ndarray], path) -> None:
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise DataError(f"checkpoint {path} does not match module (missing={missing}, extra={extra})")
    with torch.no_grad():
        for name, p in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise DataError(
                    f"tensor {name!r} shape {arr.shape} does not match module {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
