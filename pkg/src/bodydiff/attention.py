"""The part-graph attention layer.

One layer runs three parallel branches over per-frame body-part tokens and
sums them:

- static branch: a learnable part-to-part adjacency, identity at init so the
  layer starts as a pass-through rather than a random mixing of parts;
- dynamic branch: per-frame scaled dot-product attention between parts, the
  attention scores acting as data-dependent graph edge weights;
- temporal branch: per-part attention over frames, with text tokens appended
  to the key/value set so every frame can read the prompt.

The summed branch output is residual-added to the input and layer-normalized,
then refined by a mixture-of-experts feed-forward block with a second
residual:

    e = static(x) + dynamic(x) + temporal(x, text)
    h = layernorm(x + e)
    out = h + moe(h)

All attention is single-head. Experts are dense (every expert runs on every
token, mixed by softmax gating), which keeps gradients smooth for
finite-difference verification.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, UsageError
from .topology import xavier_uniform_

MOE_HIDDEN = 256


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos position embedding: (...,) -> (..., dim).

    First half sines, second half cosines, geometric frequency ladder from 1
    down to 1/10000. An odd dim gets one zero pad channel.
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=positions.dtype, device=positions.device)
        / max(half, 1)
    )
    ang = positions[..., None] * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def static_mix(adjacency: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Per-frame part mixing: out[..., f] = adjacency @ tokens[..., f].

    tokens: (..., N_b, D_b); adjacency: (N_b, N_b).
    """
    if adjacency.shape[0] != adjacency.shape[1] or adjacency.shape[0] != tokens.shape[-2]:
        raise DataError(
            f"adjacency {tuple(adjacency.shape)} does not match token parts {tokens.shape[-2]}"
        )
    return torch.einsum("pq,...qd->...pd", adjacency, tokens)


class PartAttentionLayer(nn.Module):
    """One spatiotemporal attention layer over (frames x parts x D_b) tokens.

    Args:
        n_parts: number of body-part token streams.
        token_dim: per-token channel count D_b.
        text_dim: channel count of text tokens fed to the temporal branch.
        n_experts: expert count of the feed-forward mixture (>= 1).
        hidden: expert hidden width.
        use_positions: add sinusoidal frame-position terms to the temporal
            queries and motion keys. Off by default; the denoiser turns it on.
        generator: RNG for deterministic initialization.
    """

    def __init__(
        self,
        n_parts: int,
        token_dim: int,
        text_dim: int,
        n_experts: int = 4,
        hidden: int = MOE_HIDDEN,
        use_positions: bool = False,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if n_parts < 1 or token_dim < 1 or text_dim < 1 or hidden < 1:
            raise UsageError("layer dimensions must be positive")
        if n_experts < 1:
            raise UsageError(f"invalid config: expert count must be >= 1, got {n_experts}")
        self.n_parts = n_parts
        self.token_dim = token_dim
        self.text_dim = text_dim
        self.n_experts = n_experts
        self.hidden = hidden
        self.use_positions = use_positions

        d, t, e, h = token_dim, text_dim, n_experts, hidden

        def proj(rows, cols):
            return nn.Parameter(xavier_uniform_(torch.empty(rows, cols, dtype=dtype), generator))

        self.adjacency = nn.Parameter(torch.eye(n_parts, dtype=dtype))
        self.dyn_q = proj(d, d)
        self.dyn_k = proj(d, d)
        self.dyn_v = proj(d, d)
        self.tmp_q = proj(d, d)
        self.tmp_k = proj(d, d)
        self.tmp_v = proj(d, d)
        self.txt_k = proj(t, d)
        self.txt_v = proj(t, d)
        self.gate = proj(d, e)
        w1 = torch.empty(e, d, h, dtype=dtype)
        w2 = torch.empty(e, h, d, dtype=dtype)
        for i in range(e):
            xavier_uniform_(w1[i], generator)
            xavier_uniform_(w2[i], generator)
        self.expert_w1 = nn.Parameter(w1)
        self.expert_b1 = nn.Parameter(torch.zeros(e, h, dtype=dtype))
        self.expert_w2 = nn.Parameter(w2)
        self.expert_b2 = nn.Parameter(torch.zeros(e, d, dtype=dtype))
        self.norm_scale = nn.Parameter(torch.ones(d, dtype=dtype))
        self.norm_shift = nn.Parameter(torch.zeros(d, dtype=dtype))

    # -- branches -----------------------------------------------------------

    def static_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(..., F, N_b, D_b) -> same shape, frames mixed part-to-part."""
        return static_mix(self.adjacency, tokens)

    def dynamic_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-frame attention between parts; scores act as edge weights."""
        self._check_tokens(tokens)
        q = tokens @ self.dyn_q
        k = tokens @ self.dyn_k
        v = tokens @ self.dyn_v
        scores = torch.einsum("...pd,...qd->...pq", q, k) / math.sqrt(self.token_dim)
        return torch.softmax(scores, dim=-1) @ v

    def temporal_forward(
        self, tokens: torch.Tensor, text: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Per-part attention over frames, text tokens joining the key/value set.

        tokens: (..., F, N_b, D_b); text: (..., F_t, text_dim) or None.
        With no text this is plain bidirectional self-attention over frames.
        """
        self._check_tokens(tokens)
        streams = tokens.transpose(-3, -2)  # (..., N_b, F, D_b)
        q = streams @ self.tmp_q
        k = streams @ self.tmp_k
        v = streams @ self.tmp_v
        if self.use_positions:
            pos = torch.arange(tokens.shape[-3], dtype=tokens.dtype, device=tokens.device)
            pe = sinusoidal_embedding(pos, self.token_dim)
            q = q + pe
            k = k + pe
        if text is not None and text.shape[-2] > 0:
            if text.shape[-1] != self.text_dim:
                raise DataError(
                    f"text tokens have {text.shape[-1]} channels, layer expects {self.text_dim}"
                )
            tk = (text @ self.txt_k).unsqueeze(-3)  # (..., 1, F_t, D_b)
            tv = (text @ self.txt_v).unsqueeze(-3)
            expand = streams.shape[:-2] + tk.shape[-2:]
            k = torch.cat([k, tk.expand(expand)], dim=-2)
            v = torch.cat([v, tv.expand(expand)], dim=-2)
        scores = torch.einsum("...fd,...gd->...fg", q, k) / math.sqrt(self.token_dim)
        out = torch.softmax(scores, dim=-1) @ v
        return out.transpose(-3, -2)

    def moe_forward(self, x: torch.Tensor) -> torch.Tensor:
        """Dense mixture of GELU feed-forward experts, softmax-gated per token."""
        gates = torch.softmax(x @ self.gate, dim=-1)  # (..., E)
        inner = F.gelu(torch.einsum("...d,edh->...eh", x, self.expert_w1) + self.expert_b1)
        outer = torch.einsum("...eh,ehd->...ed", inner, self.expert_w2) + self.expert_b2
        return torch.einsum("...e,...ed->...d", gates, outer)

    # -- full layer ----------------------------------------------------------

    def forward(self, tokens: torch.Tensor, text: torch.Tensor | None = None) -> torch.Tensor:
        self._check_tokens(tokens)
        e = self.static_forward(tokens) + self.dynamic_forward(tokens)
        e = e + self.temporal_forward(tokens, text)
        h = F.layer_norm(
            tokens + e, (self.token_dim,), weight=self.norm_scale, bias=self.norm_shift
        )
        return h + self.moe_forward(h)

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.ndim < 3 or tokens.shape[-2] != self.n_parts or tokens.shape[-1] != self.token_dim:
            raise DataError(
                f"token tensor {tuple(tokens.shape)} does not match layer "
                f"({self.n_parts} parts x {self.token_dim})"
            )


def init_layer(
    n_parts: int,
    token_dim: int,
    text_dim: int,
    n_experts: int = 4,
    seed: int = 0,
    **kwargs,
) -> PartAttentionLayer:
    """Deterministically initialized layer; same seed gives identical tensors."""
    g = torch.Generator().manual_seed(seed)
    return PartAttentionLayer(n_parts, token_dim, text_dim, n_experts, generator=g, **kwargs)
