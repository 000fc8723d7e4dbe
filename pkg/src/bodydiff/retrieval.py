"""Contrastive VAE that co-embeds motions and captions for the metrics.

Three small nets: a motion encoder and a text encoder that each emit a
diagonal Gaussian over the shared latent space, and a motion decoder that
reconstructs frames from a latent sample. Training balances reconstruction
(through both latents), a standard-normal KL on both encoders, a latent-mean
alignment term, and a symmetric InfoNCE over in-batch cosine similarities;
the InfoNCE term is what makes the latents usable for retrieval.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attention import sinusoidal_embedding
from .errors import NumericError, UsageError
from .motion import MotionSequence
from .topology import xavier_uniform_

LAMBDA_KL = 1e-5
LAMBDA_E = 1e-5
LAMBDA_NCE = 0.1
NCE_TEMPERATURE = 0.1


def _linear(n_in: int, n_out: int, g: torch.Generator | None) -> nn.Linear:
    lin = nn.Linear(n_in, n_out)
    with torch.no_grad():
        xavier_uniform_(lin.weight, g)
        lin.bias.zero_()
    return lin


class RetrievalEmbedder(nn.Module):
    def __init__(self, motion_dim: int, text_dim: int = 32, d_latent: int = 256,
                 hidden: int = 128, generator: torch.Generator | None = None):
        super().__init__()
        if min(motion_dim, text_dim, d_latent, hidden) < 1:
            raise UsageError("all embedder dimensions must be positive")
        self.motion_dim = motion_dim
        self.text_dim = text_dim
        self.d_latent = d_latent
        self.hidden = hidden
        self.m_in = _linear(motion_dim, hidden, generator)
        self.m_mu = _linear(hidden, d_latent, generator)
        self.m_lv = _linear(hidden, d_latent, generator)
        self.t_in = _linear(text_dim, hidden, generator)
        self.t_mu = _linear(hidden, d_latent, generator)
        self.t_lv = _linear(hidden, d_latent, generator)
        self.d_in = _linear(d_latent, hidden, generator)
        self.d_out = _linear(hidden, motion_dim, generator)

    def _frame_pe(self, n_frames: int, like: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(n_frames, dtype=like.dtype)
        return sinusoidal_embedding(pos, self.hidden).to(like.dtype)

    def encode_motion(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(..., F, D_m) frames -> latent mean and log-variance."""
        h = F.gelu(self.m_in(x) + self._frame_pe(x.shape[-2], x))
        pooled = h.mean(dim=-2)
        return self.m_mu(pooled), self.m_lv(pooled)

    def encode_text(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(..., F_t, D_t) token rows -> latent mean and log-variance.

        Zero tokens (an empty caption) pool to the zero vector instead of NaN.
        """
        if tokens.shape[-2] == 0:
            pooled = tokens.new_zeros(tokens.shape[:-2] + (self.hidden,))
        else:
            pooled = F.gelu(self.t_in(tokens)).mean(dim=-2)
        return self.t_mu(pooled), self.t_lv(pooled)

    def decode_motion(self, z: torch.Tensor, n_frames: int) -> torch.Tensor:
        h = self.d_in(z).unsqueeze(-2) + self._frame_pe(n_frames, z)
        return self.d_out(F.gelu(h))


def _gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    # KL(N(mu, e^lv) || N(0, I)), summed over latent dims, mean over batch
    per_item = 0.5 * (mu**2 + logvar.exp() - 1.0 - logvar).sum(dim=-1)
    return per_item.mean()


def info_nce(mu_motion: torch.Tensor, mu_text: torch.Tensor,
             temperature: float = NCE_TEMPERATURE) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch cosine similarities."""
    if mu_motion.shape[0] < 2:
        raise UsageError("InfoNCE needs a batch of at least 2 pairs")
    m = F.normalize(mu_motion, dim=-1)
    t = F.normalize(mu_text, dim=-1)
    logits = (t @ m.T) / temperature
    labels = torch.arange(m.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def retrieval_loss(
    embedder,
    motions: torch.Tensor,
    texts: list[torch.Tensor],
    generator: torch.Generator | None = None,
    lambda_nce: float = LAMBDA_NCE,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted VAE + alignment + contrastive loss over a paired batch."""
    if motions.ndim != 3 or motions.shape[0] != len(texts):
        raise UsageError(
            f"need (B, F, D) motions paired with B token tensors, got {tuple(motions.shape)} and {len(texts)}"
        )
    mu_m, lv_m = embedder.encode_motion(motions)
    text_stats = [embedder.encode_text(t) for t in texts]
    mu_t = torch.stack([mu for mu, _ in text_stats])
    lv_t = torch.stack([lv for _, lv in text_stats])

    def reparam(mu, lv):
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + (0.5 * lv).exp() * eps

    n_frames = motions.shape[-2]
    rec_m = embedder.decode_motion(reparam(mu_m, lv_m), n_frames)
    rec_t = embedder.decode_motion(reparam(mu_t, lv_t), n_frames)
    l_rec = 0.5 * (F.mse_loss(rec_m, motions) + F.mse_loss(rec_t, motions))
    l_kl = 0.5 * (_gaussian_kl(mu_m, lv_m) + _gaussian_kl(mu_t, lv_t))
    l_e = F.mse_loss(mu_m, mu_t)
    l_nce = info_nce(mu_m, mu_t)
    total = l_rec + LAMBDA_KL * l_kl + LAMBDA_E * l_e + lambda_nce * l_nce
    parts = {
        "rec": l_rec.item(), "kl": l_kl.item(), "e": l_e.item(), "nce": l_nce.item(),
    }
    return total, parts


def train_retrieval(
    motions: torch.Tensor,
    texts: list[torch.Tensor],
    epochs: int = 200,
    seed: int = 0,
    d_latent: int = 256,
    hidden: int = 128,
    lr: float = 3e-3,
    lambda_nce: float = LAMBDA_NCE,
    betas: tuple[float, float] = (0.9, 0.95),
) -> tuple[RetrievalEmbedder, list[float]]:
    """Full-batch Adam on the paired corpus; returns the embedder and losses.

    The second-moment decay is shorter than the torch default: full-batch
    alignment stalls inside the epoch budget otherwise.
    """
    if epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {epochs}")
    g = torch.Generator().manual_seed(seed)
    embedder = RetrievalEmbedder(
        motions.shape[-1], texts[0].shape[-1], d_latent=d_latent, hidden=hidden, generator=g
    )
    opt = torch.optim.Adam(embedder.parameters(), lr=lr, betas=betas)
    losses = []
    for epoch in range(epochs):
        opt.zero_grad()
        total, _ = retrieval_loss(embedder, motions, texts, generator=g, lambda_nce=lambda_nce)
        if not torch.isfinite(total):
            raise NumericError(f"retrieval training diverged at step {epoch}")
        total.backward()
        opt.step()
        losses.append(total.item())
    return embedder, losses


def motion_tensor(sequences: list[MotionSequence]) -> torch.Tensor:
    """Stack equal-length sequences into a (B, F, D) float tensor."""
    if not sequences:
        raise UsageError("no sequences given")
    lengths = {s.data.shape[0] for s in sequences}
    if len(lengths) != 1:
        raise UsageError(f"sequences differ in length: {sorted(lengths)}")
    return torch.from_numpy(np.stack([s.data for s in sequences]))


def embed_motions(embedder, motions) -> np.ndarray:
    """Latent means of motions, as an (M, D_e) numpy array."""
    if isinstance(motions, list):
        motions = motion_tensor(motions)
    with torch.no_grad():
        mu, _ = embedder.encode_motion(motions)
    return mu.numpy().astype(np.float64)


def embed_texts(embedder, texts: list[torch.Tensor]) -> np.ndarray:
    with torch.no_grad():
        rows = [embedder.encode_text(t)[0] for t in texts]
    return torch.stack(rows).numpy().astype(np.float64)
