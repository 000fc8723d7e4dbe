"""DDPM machinery: noise schedule, forward noising, reverse sampling, outpainting.

The denoiser predicts the clean sample x0 (not the noise), so the reverse
step forms the posterior mean from (x0_hat, x_t) directly:

    mu = c1_t * x0_hat + c2_t * x_t
    c1_t = sqrt(abar_{t-1}) * beta_t / (1 - abar_t)
    c2_t = sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)

with the convention abar_0 = 1, which makes c1_1 = 1, c2_1 = 0 and the final
step variance 0: the last reverse step returns the prediction exactly.

Public step indices t are 1-based (t = 1..T); the internal tables are plain
0-based arrays. Tables are float64; coefficients are cast to the data dtype
at use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import BodyDiffError, NumericError, UsageError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step tables; index i holds the value for t = i + 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_var: np.ndarray
    c1: np.ndarray
    c2: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size == 0 or np.any(t < 1) or np.any(t > self.T):
            raise UsageError(f"step index t={t} out of range [1, {self.T}]")


def make_linear_schedule(
    T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02
) -> DiffusionSchedule:
    """Linear beta ramp with inclusive endpoints: beta_1 = beta_min, beta_T = beta_max."""
    if T < 2:
        raise UsageError(f"schedule needs at least 2 steps, got {T}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise UsageError(
            f"invalid beta bounds: need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
        )
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    c1 = np.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    c2 = np.sqrt(alpha) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    # t = 1 values are exact by the abar_0 = 1 convention; pin them so the
    # final reverse step reproduces the prediction bit-for-bit.
    c1[0] = 1.0
    c2[0] = 0.0
    posterior_var[0] = 0.0
    return DiffusionSchedule(beta, alpha, alpha_bar, alpha_bar_prev, posterior_var, c1, c2)


def _coeff(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    """Look up table values for 1-based t; broadcastable against `like`."""
    if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
        return float(table[int(t) - 1])
    idx = np.asarray(t, dtype=np.int64) - 1
    vals = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
    return vals.reshape(vals.shape + (1,) * (like.ndim - vals.ndim))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar or a per-item array matching x0's leading dimension.
    """
    sched.check_t(t)
    sa = _coeff(np.sqrt(sched.alpha_bar), t, x0)
    sb = _coeff(np.sqrt(1.0 - sched.alpha_bar), t, x0)
    return sa * x0 + sb * eps


def p_sample_step(
    x_t: torch.Tensor,
    t: int,
    x0_hat: torch.Tensor,
    noise: torch.Tensor | None,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """One reverse step from t to t-1; t = 1 returns the posterior mean exactly."""
    sched.check_t(t)
    t = int(t)
    mu = float(sched.c1[t - 1]) * x0_hat + float(sched.c2[t - 1]) * x_t
    if t == 1:
        return mu
    if noise is None:
        return mu
    return mu + float(np.sqrt(sched.posterior_var[t - 1])) * noise


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


def _call_denoiser(denoiser: Denoiser, x: torch.Tensor, t: int, conditions) -> torch.Tensor:
    try:
        return denoiser(x, t, conditions)
    except BodyDiffError as e:
        raise type(e)(f"denoiser failed at reverse step t={t}: {e}") from e
    except Exception as e:  # noqa: BLE001 - attach the step index, then surface
        raise NumericError(f"denoiser failed at reverse step t={t}: {e}") from e


def sample(
    denoiser: Denoiser,
    shape: Sequence[int],
    sched: DiffusionSchedule,
    seed: int = 0,
    conditions=None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from pure noise; deterministic given the seed.

    Draw order: one standard-normal tensor for x_T, then one per reverse step
    with t > 1.
    """
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(tuple(shape), generator=g, dtype=dtype)
    for t in range(sched.T, 0, -1):
        x0_hat = _call_denoiser(denoiser, x, t, conditions)
        noise = torch.randn(tuple(shape), generator=g, dtype=dtype) if t > 1 else None
        x = p_sample_step(x, t, x0_hat, noise, sched)
    return x


def outpaint_plan(total_frames: int, window: int, overlap: int) -> list[tuple[int, int]]:
    """Window placements as (start, fixed_prefix_len) covering total_frames.

    The first window is free; each later one starts overlap frames before the
    generated prefix ends. A last window that would overshoot is shifted back
    to end exactly at total_frames, fixing every already-generated frame it
    covers.
    """
    if not (0 < overlap < window):
        raise UsageError(f"overlap must satisfy 0 < overlap < window, got {overlap} vs {window}")
    if total_frames < window:
        raise UsageError(f"total_frames {total_frames} shorter than one window {window}")
    plan = [(0, 0)]
    done = window
    while done < total_frames:
        start = done - overlap
        if start + window > total_frames:
            start = total_frames - window
        plan.append((start, done - start))
        done = start + window
    return plan


def outpaint_sample(
    denoiser: Denoiser,
    total_frames: int,
    dim: int,
    window: int,
    overlap: int,
    sched: DiffusionSchedule,
    seed: int = 0,
    conditions_fn: Callable[[int, int], object] | None = None,
    dtype: torch.dtype = torch.float32,
    return_windows: bool = False,
):
    """Long-sequence sampling by windowed outpainting with replacement guidance.

    Each window after the first keeps its leading frames clamped to the
    already-generated motion: after every reverse step the overlap rows are
    overwritten with q_sample(fixed, t-1) (with the exact fixed frames once
    t-1 = 0), so the final window output agrees with the previous window on
    the overlap bit-for-bit.

    conditions_fn(start, window) may supply per-window conditions.
    """
    plan = outpaint_plan(total_frames, window, overlap)
    g = torch.Generator().manual_seed(seed)
    out = torch.zeros(total_frames, dim, dtype=dtype)
    windows = []
    for start, fixed_len in plan:
        fixed = out[start : start + fixed_len].clone()
        conditions = conditions_fn(start, window) if conditions_fn else None
        x = torch.randn(window, dim, generator=g, dtype=dtype)
        for t in range(sched.T, 0, -1):
            x0_hat = _call_denoiser(denoiser, x, t, conditions)
            noise = torch.randn(window, dim, generator=g, dtype=dtype) if t > 1 else None
            x = p_sample_step(x, t, x0_hat, noise, sched)
            if fixed_len:
                if t - 1 >= 1:
                    eps = torch.randn(fixed_len, dim, generator=g, dtype=dtype)
                    x = torch.cat([q_sample(fixed, t - 1, eps, sched), x[fixed_len:]])
                else:
                    x = torch.cat([fixed, x[fixed_len:]])
        out[start : start + window] = x
        if return_windows:
            windows.append((start, x.clone()))
    if return_windows:
        return out, windows
    return out
