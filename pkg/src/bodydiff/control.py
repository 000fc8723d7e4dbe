"""Plug-and-play control branch for low-level condition signals.

The branch is a partial copy of the main denoiser: the first K attention
blocks are deep-copied at attach time, driven by the noisy motion tokens plus
a projected condition track, and fed back into the frozen main branch through
per-layer per-part bridge linears. Bridges start at exactly zero (weight and
bias), so a freshly attached branch leaves the main branch's output untouched
bit-for-bit; training moves the bridges away from zero only where the
condition helps.

The condition projection has no bias term: rows of the track that were
zero-padded by ``align_condition`` therefore contribute exactly zero to the
branch input.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import MotionDenoiser
from .errors import DataError, UsageError
from .topology import xavier_uniform_


def align_condition(track: torch.Tensor, n_frames: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a (..., T_c, D_c) track with zero rows up to n_frames.

    Returns the padded track and a boolean frame mask that is True for the
    first T_c frames. Tracks longer than n_frames are rejected; window them
    first.
    """
    t_c = track.shape[-2]
    if t_c > n_frames:
        raise DataError(f"condition track ({t_c} frames) longer than motion ({n_frames}); window it first")
    pad_shape = track.shape[:-2] + (n_frames - t_c, track.shape[-1])
    aligned = torch.cat([track, track.new_zeros(pad_shape)], dim=-2)
    mask = torch.zeros(n_frames, dtype=torch.bool)
    mask[:t_c] = True
    return aligned, mask


class ControlBranch(nn.Module):
    """K copied blocks + condition projection + zero bridges."""

    def __init__(self, backbone: MotionDenoiser, k: int, cond_dim: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        cfg = backbone.config
        if not (1 <= k <= cfg.layers):
            raise UsageError(f"copied block count must be in [1, {cfg.layers}], got {k}")
        if cond_dim < 1:
            raise UsageError(f"condition dim must be positive, got {cond_dim}")
        self.k = k
        self.cond_dim = cond_dim
        self.n_parts = cfg.n_parts
        self.token_dim = cfg.token_dim
        self.blocks = nn.ModuleList(copy.deepcopy(backbone.layers[i]) for i in range(k))
        dtype = backbone.out_weight.dtype
        self.cond_weight = nn.Parameter(
            xavier_uniform_(
                torch.empty(cond_dim, cfg.n_parts * cfg.token_dim, dtype=dtype), generator
            )
        )
        d = cfg.token_dim
        self.bridge_weight = nn.Parameter(torch.zeros(k, cfg.n_parts, d, d, dtype=dtype))
        self.bridge_bias = nn.Parameter(torch.zeros(k, cfg.n_parts, d, dtype=dtype))

    def condition_tokens(self, aligned: torch.Tensor) -> torch.Tensor:
        """(..., F, D_c) aligned track -> (..., F, N_b, D_b) additive tokens."""
        if aligned.shape[-1] != self.cond_dim:
            raise DataError(
                f"condition features have {aligned.shape[-1]} channels, branch expects {self.cond_dim}"
            )
        flat = aligned @ self.cond_weight
        return flat.reshape(flat.shape[:-1] + (self.n_parts, self.token_dim))

    def bridge(self, i: int, tokens: torch.Tensor) -> torch.Tensor:
        return (
            torch.einsum("...nd,nde->...ne", tokens, self.bridge_weight[i])
            + self.bridge_bias[i]
        )


def attach_control_branch(
    backbone: MotionDenoiser, k: int | None = None, cond_dim: int = 2, seed: int = 0
) -> ControlBranch:
    """Copy the first K blocks (default L/2) and wire zero bridges.

    The main branch is not modified; the copies are bit-identical at attach.
    """
    if k is None:
        k = max(1, backbone.config.layers // 2)
    g = torch.Generator().manual_seed(seed)
    return ControlBranch(backbone, k, cond_dim, generator=g)


def _check_attached(backbone: MotionDenoiser, branch: ControlBranch) -> None:
    cfg = backbone.config
    if (
        branch.n_parts != cfg.n_parts
        or branch.token_dim != cfg.token_dim
        or branch.k > cfg.layers
    ):
        raise DataError(
            "control branch does not match this backbone "
            f"(branch {branch.n_parts}x{branch.token_dim}, k={branch.k}; "
            f"backbone {cfg.n_parts}x{cfg.token_dim}, layers={cfg.layers})"
        )


def controlled_forward(
    backbone: MotionDenoiser,
    branch: ControlBranch,
    x_t: torch.Tensor,
    t,
    text: torch.Tensor | None = None,
    track: torch.Tensor | None = None,
) -> torch.Tensor:
    """Denoise with the control branch injected into the first K layers.

    ``track`` is a raw (..., T_c, D_c) feature tensor; rows past the track's
    end act as zeros. With all bridges at zero this equals the plain forward
    exactly, reduction order included.
    """
    _check_attached(backbone, branch)
    base = backbone.encode_tokens(x_t, t)
    h_c = base
    if track is not None:
        aligned, _ = align_condition(track, x_t.shape[-2])
        h_c = h_c + branch.condition_tokens(aligned.to(x_t.dtype))
    injections = []
    for i in range(branch.k):
        h_c = branch.blocks[i](h_c, text)
        injections.append(branch.bridge(i, h_c))
    return backbone(x_t, t, text, injections=injections)


@dataclass(frozen=True)
class FreezePolicy:
    """What stays trainable in stage 2 besides the branch itself."""

    mode: str = "full-freeze"
    unfrozen_parts: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.mode not in ("full-freeze", "local-unfreeze"):
            raise UsageError(f"unknown freeze mode {self.mode!r}")
        if self.mode == "full-freeze" and self.unfrozen_parts:
            raise UsageError("full-freeze does not take unfrozen parts")
        if self.mode == "local-unfreeze" and not self.unfrozen_parts:
            raise UsageError("local-unfreeze needs at least one part name")
        object.__setattr__(self, "unfrozen_parts", frozenset(self.unfrozen_parts))


def set_freeze_policy(
    backbone: MotionDenoiser, branch: ControlBranch, policy: FreezePolicy
) -> dict[str, nn.Parameter]:
    """Freeze the main branch, unfreeze the control branch, return the trainable set.

    Under local-unfreeze the per-part codecs named in the policy (their encode
    and decode affine maps) are added back to the trainable set.
    """
    _check_attached(backbone, branch)
    part_names = {p.name for p in backbone.partition.parts}
    unknown = sorted(set(policy.unfrozen_parts) - part_names)
    if unknown:
        raise UsageError(f"unknown body parts in freeze policy: {unknown}")

    for p in backbone.parameters():
        p.requires_grad_(False)
    trainable: dict[str, nn.Parameter] = {}
    for name, p in branch.named_parameters():
        p.requires_grad_(True)
        trainable[f"branch.{name}"] = p
    for part in sorted(policy.unfrozen_parts):
        i = backbone.partition.index(part)
        for label, p in (
            (f"backbone.codec.enc_weight.{i}", backbone.codec.enc_weight[i]),
            (f"backbone.codec.enc_bias.{i}", backbone.codec.enc_bias[i]),
            (f"backbone.codec.dec_weight.{i}", backbone.codec.dec_weight[i]),
            (f"backbone.codec.dec_bias.{i}", backbone.codec.dec_bias[i]),
        ):
            p.requires_grad_(True)
            trainable[label] = p
    return trainable
