"""The main-branch denoiser: a stack of part-graph attention layers.

Forward path: encode the flat motion channels into per-part tokens, add a
projected sinusoidal timestep embedding (broadcast over frames and parts),
run the attention layers with text cross-attention, apply a zero-initialized
per-part output projection, and decode back to flat channels. The zero output
projection makes a fresh model predict exactly zero, which is a stable start
for x0-prediction diffusion training.

``forward`` takes an optional list of per-layer injection tensors added to
the inputs of the first layers; the control branch uses this hook, and a zero
injection reproduces the plain forward bit-for-bit because the code path and
reduction order are identical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .attention import PartAttentionLayer, sinusoidal_embedding
from .errors import DataError, UsageError
from .topology import BodyPartLayout, PartCodec, default_body_partition, xavier_uniform_

VARIANTS = {
    "tiny": (4, 64),
    "small-wide": (4, 128),
    "small-deep": (8, 64),
    "medium": (8, 128),
    "large": (16, 128),
}


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    n_parts: int = 12
    token_dim: int = 64
    ffn_dim: int = 256
    n_experts: int = 4
    max_frames: int = 196
    text_dim: int = 32
    use_positions: bool = True
    variant: str = "custom"

    @staticmethod
    def from_variant(name: str, **overrides) -> "ModelConfig":
        if name not in VARIANTS:
            raise UsageError(f"unsupported variant {name!r}; known: {sorted(VARIANTS)}")
        layers, token_dim = VARIANTS[name]
        cfg = ModelConfig(layers=layers, token_dim=token_dim, variant=name)
        return replace(cfg, **overrides) if overrides else cfg


def param_count(config: ModelConfig, part_sizes: list[int]) -> int:
    """Closed-form parameter count for a model built from this config."""
    d, e, h, t = config.token_dim, config.n_experts, config.ffn_dim, config.text_dim
    n = config.n_parts
    codec = sum(2 * s * d + d + s for s in part_sizes)
    layer = (
        n * n  # adjacency
        + 3 * d * d  # dynamic q/k/v
        + 3 * d * d  # temporal q/k/v
        + 2 * t * d  # text k/v
        + d * e  # gate
        + e * (d * h + h + h * d + d)  # experts
        + 2 * d  # layer norm
    )
    t_proj = d * d + d
    out_proj = n * (d * d + d)
    return codec + config.layers * layer + t_proj + out_proj


class MotionDenoiser(nn.Module):
    """Maps (x_t, t, text) to an x0 prediction of the same shape as x_t."""

    def __init__(
        self,
        config: ModelConfig,
        partition: BodyPartLayout | None = None,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if partition is None:
            partition = default_body_partition(token_dim=config.token_dim)
        if partition.n_parts != config.n_parts:
            raise UsageError(
                f"config expects {config.n_parts} parts, partition has {partition.n_parts}"
            )
        if partition.token_dim != config.token_dim:
            raise UsageError(
                f"config token_dim {config.token_dim} != partition token_dim {partition.token_dim}"
            )
        self.config = config
        self.partition = partition
        self.codec = PartCodec(partition, generator=generator, dtype=dtype)
        self.layers = nn.ModuleList(
            PartAttentionLayer(
                config.n_parts,
                config.token_dim,
                config.text_dim,
                config.n_experts,
                hidden=config.ffn_dim,
                use_positions=config.use_positions,
                generator=generator,
                dtype=dtype,
            )
            for _ in range(config.layers)
        )
        d = config.token_dim
        self.t_weight = nn.Parameter(xavier_uniform_(torch.empty(d, d, dtype=dtype), generator))
        self.t_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.out_weight = nn.Parameter(torch.zeros(config.n_parts, d, d, dtype=dtype))
        self.out_bias = nn.Parameter(torch.zeros(config.n_parts, d, dtype=dtype))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def timestep_tokens(self, t, like: torch.Tensor) -> torch.Tensor:
        """Projected sinusoidal embedding of t, shaped to broadcast over tokens."""
        tt = torch.as_tensor(t, dtype=like.dtype, device=like.device)
        if (tt < 1).any():
            raise UsageError(f"timestep must be >= 1, got {t}")
        emb = sinusoidal_embedding(tt, self.config.token_dim) @ self.t_weight + self.t_bias
        # scalar t -> (D,); per-item t -> (B, 1, 1, D)
        if emb.ndim > 1 or tt.ndim > 0:
            emb = emb.reshape(emb.shape[:-1] + (1, 1, emb.shape[-1]))
        return emb

    def encode_tokens(self, x_t: torch.Tensor, t) -> torch.Tensor:
        """Part tokens of x_t with the timestep embedding added."""
        if x_t.shape[-1] != self.partition.dim:
            raise DataError(
                f"input has {x_t.shape[-1]} channels, model expects {self.partition.dim}"
            )
        if x_t.shape[-2] > self.config.max_frames:
            raise DataError(
                f"{x_t.shape[-2]} frames exceed the configured maximum {self.config.max_frames}"
            )
        return self.codec.encode(x_t) + self.timestep_tokens(t, x_t)

    def forward(
        self,
        x_t: torch.Tensor,
        t,
        text: torch.Tensor | None = None,
        injections: list[torch.Tensor | None] | None = None,
    ) -> torch.Tensor:
        h = self.encode_tokens(x_t, t)
        for i, layer in enumerate(self.layers):
            if injections is not None and i < len(injections) and injections[i] is not None:
                h = h + injections[i]
            h = layer(h, text)
        tokens = torch.einsum("...nd,nde->...ne", h, self.out_weight) + self.out_bias
        return self.codec.decode(tokens)


def build_model(
    config: ModelConfig,
    seed: int = 0,
    partition: BodyPartLayout | None = None,
    dtype: torch.dtype = torch.float32,
) -> MotionDenoiser:
    """Deterministically initialized denoiser; same seed gives identical tensors."""
    g = torch.Generator().manual_seed(seed)
    return MotionDenoiser(config, partition=partition, generator=g, dtype=dtype)


def denoise_forward(
    model: MotionDenoiser, x_t: torch.Tensor, t, text: torch.Tensor | None = None
) -> torch.Tensor:
    return model(x_t, t, text)
