"""Absorbing-state (masking) discrete diffusion.

Every real token survives step ``t`` with probability ``1 - beta_t`` and is
otherwise sent to the absorbing MASK id, which never leaves. Closed forms
for the cumulative marginal and the one-step posterior are used throughout;
:func:`build_Qt` materialises the transition matrix only so tests can check
those closed forms against explicit matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray       # beta[t-1] for t = 1..T
    alpha_bar: np.ndarray  # alpha_bar[t] for t = 0..T, alpha_bar[0] == 1
    kind: str = "custom"

    @property
    def T(self) -> int:
        return len(self.beta)

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])


def make_schedule(T: int, kind: str = "linear_mask", betas=None) -> NoiseSchedule:
    """``linear_mask`` uses beta_t = 1/(T-t+1), so alpha_bar_t = 1 - t/T."""
    if T < 1:
        raise ValueError(f"need at least one diffusion step, got T={T}")
    if kind == "linear_mask":
        t = np.arange(1, T + 1)
        beta = 1.0 / (T - t + 1)
        alpha_bar = np.concatenate([[1.0], 1.0 - t / T])
    elif kind == "custom":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.shape != (T,):
            raise ValueError(f"expected {T} betas, got shape {beta.shape}")
        if np.any(beta <= 0) or np.any(beta > 1):
            raise ValueError("every beta must lie in (0, 1]")
        if np.any(beta[:-1] == 1):
            # alpha_bar would reach 0 early and stop decreasing
            raise ValueError("beta = 1 is only allowed at the final step")
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, kind=kind)


@dataclass(frozen=True)
class AbsorbingKernel:
    K_base: int  # number of real tokens (PAD included); MASK id == K_base
    schedule: NoiseSchedule

    @property
    def mask_id(self) -> int:
        return self.K_base

    @property
    def T(self) -> int:
        return self.schedule.T

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    def revert_prob(self, t: int) -> float:
        """P(x_{t-1} = x_0 | x_t = MASK, x_0) = beta_t alpha_bar_{t-1} / (1 - alpha_bar_t)."""
        if self.schedule.kind == "linear_mask":
            # same formula in exact rationals, so the result is 1/t correctly rounded
            T = self.T
            r = Fraction(1, T - t + 1) * Fraction(T - t + 1, T) / Fraction(t, T)
            return float(r)
        ab = self.schedule.alpha_bar
        return self.schedule.beta_at(t) * ab[t - 1] / (1.0 - ab[t])


def build_Qt(kernel: AbsorbingKernel, t: int) -> np.ndarray:
    kernel.check_t(t)
    K = kernel.K_base
    b = kernel.schedule.beta_at(t)
    Q = np.eye(K + 1) * (1.0 - b)
    Q[:, K] = b
    Q[K, K] = 1.0
    return Q


def q_marginal(x0, t: int, kernel: AbsorbingKernel) -> np.ndarray:
    """q(x_t | x_0) per position, shape ``(..., K_base+1)``: alpha_bar_t on x_0, the rest on MASK."""
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == kernel.mask_id):
        raise ValueError("x0 already contains MASK tokens")
    if not 0 <= t <= kernel.T:
        raise ValueError(f"timestep {t} outside 0..{kernel.T}")
    ab = kernel.schedule.alpha_bar[t]
    out = np.zeros(x0.shape + (kernel.K_base + 1,))
    np.put_along_axis(out, x0[..., None], ab, axis=-1)
    out[..., kernel.mask_id] += 1.0 - ab
    return out


def q_sample(x0, t: int, kernel: AbsorbingKernel, rng: np.random.Generator) -> np.ndarray:
    """Mask each position independently with probability 1 - alpha_bar_t.

    ``x0`` may be 1-D or batched 2-D; ``t`` may be a scalar or one step per
    batch row. ``t = 0`` returns ``x0`` unchanged.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == kernel.mask_id):
        raise ValueError("x0 already contains MASK tokens")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > kernel.T):
        raise ValueError(f"timestep outside 0..{kernel.T}")
    keep = kernel.schedule.alpha_bar[t]
    if keep.ndim:
        keep = keep.reshape(keep.shape + (1,) * (x0.ndim - keep.ndim))
    masked = rng.random(x0.shape) >= keep
    return np.where(masked, kernel.mask_id, x0)


def q_posterior(x_t, x0, t: int, kernel: AbsorbingKernel) -> np.ndarray:
    """q(x_{t-1} | x_t, x_0) per position, shape ``(L, K_base+1)``."""
    kernel.check_t(t)
    x_t = np.asarray(x_t, dtype=np.int64)
    x0 = np.asarray(x0, dtype=np.int64)
    K = kernel.K_base
    masked = x_t == K
    if np.any(~masked & (x_t != x0)):
        raise ValueError("x_t differs from x0 at an unmasked position")
    r = kernel.revert_prob(t)
    out = np.zeros(x_t.shape + (K + 1,))
    idx = np.arange(x_t.size)
    flat = out.reshape(-1, K + 1)
    m = masked.reshape(-1)
    x0f = x0.reshape(-1)
    flat[idx[~m], x0f[~m]] = 1.0
    flat[idx[m], x0f[m]] = r
    flat[idx[m], K] += 1.0 - r
    return out


@dataclass
class LossTerms:
    loss: Tensor
    kl: float
    nll: float
    prior: float
    weight: float
    n_masked: int


def loss_weight(t: int, T: int) -> float:
    return max(0.0, (T - t - 1) / T)


def elbo_loss(x0_logits: Tensor, x_t, x0, t: int, kernel: AbsorbingKernel) -> LossTerms:
    """Reweighted variational bound for one sequence at step ``t``.

    The model's reverse step is the closed-form posterior mixed over the
    predicted clean-token distribution ``softmax(x0_logits)``. For ``t >= 2``
    the loss is ``w_t * sum_masked KL[q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)]``
    with ``w_t = max(0, (T-t-1)/T)``; at ``t = 1`` it is the reconstruction
    term ``-sum_masked log p(x_0|x_1)``. Only positions where q is nonzero
    enter the KL, i.e. the true token and MASK.
    """
    kernel.check_t(t)
    x0_logits = tn.as_tensor(x0_logits)
    if x0_logits.shape[-1] != kernel.K_base:
        raise ValueError(f"logits cover {x0_logits.shape[-1]} classes, expected {kernel.K_base}")
    if not np.all(np.isfinite(x0_logits.data)):
        raise ValueError("non-finite logits")
    x_t = np.asarray(x_t, dtype=np.int64)
    x0 = np.asarray(x0, dtype=np.int64)
    masked = x_t == kernel.mask_id
    n_masked = int(masked.sum())
    logp = tn.log_softmax_last_axis(x0_logits)
    # pick log p~(x0) for every position, zero out the unmasked ones
    picked = tn.take_last(logp, x0) * masked.astype(np.float64)
    if t == 1:
        nll = -picked.sum()
        return LossTerms(nll, kl=0.0, nll=nll.item(), prior=0.0, weight=1.0, n_masked=n_masked)
    r = kernel.revert_prob(t)
    w = loss_weight(t, kernel.T)
    # KL = r log(r / (r p~)) + (1-r) log((1-r)/(1-r)) = -r log p~(x0)
    kl = (picked * -r).sum()
    loss = kl * w
    return LossTerms(loss, kl=kl.item(), nll=0.0, prior=0.0, weight=w, n_masked=n_masked)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((u > cdf).sum(axis=-1), p.shape[-1] - 1)


def p_step(x0_logits, x_t, t: int, kernel: AbsorbingKernel, rng: np.random.Generator,
           s: int | None = None) -> np.ndarray:
    """One ancestral step from ``t`` down to ``s`` (default ``t - 1``).

    Masked positions are revealed with probability
    ``(alpha_bar_s - alpha_bar_t) / (1 - alpha_bar_t)`` and, if revealed,
    take a token drawn from the predicted clean distribution.
    """
    s = t - 1 if s is None else s
    logits = x0_logits.data if isinstance(x0_logits, Tensor) else np.asarray(x0_logits)
    x_t = np.asarray(x_t, dtype=np.int64)
    ab = kernel.schedule.alpha_bar
    reveal = (ab[s] - ab[t]) / (1.0 - ab[t])
    masked = x_t == kernel.mask_id
    draw = _sample_categorical(_softmax(logits), rng)
    u = rng.random(x_t.shape)
    go = masked & (u < reveal) if s > 0 else masked
    return np.where(go, draw, x_t)


def sample(model: Callable[[np.ndarray, int], np.ndarray], L: int, kernel: AbsorbingKernel,
           rng: np.random.Generator, stride: int = 1, batch: int | None = None) -> np.ndarray:
    """Draw sequences by denoising from all-MASK.

    ``model(x_t, t)`` maps ids of shape ``(..., L)`` to clean-token logits of
    shape ``(..., L, K_base)``. With ``stride > 1`` only every ``stride``-th
    step is visited and the reveal probability covers the skipped span.
    """
    if stride < 1 or kernel.T % stride:
        raise ValueError(f"stride {stride} must be positive and divide T={kernel.T}")
    shape = (L,) if batch is None else (batch, L)
    x = np.full(shape, kernel.mask_id, dtype=np.int64)
    for t in range(kernel.T, 0, -stride):
        logits = model(x, t)
        x = p_step(logits, x, t, kernel, rng, s=t - stride)
    return x


def batch_elbo_loss(x0_logits: Tensor, x_t, x0, t, kernel: AbsorbingKernel) -> Tensor:
    """Mean of :func:`elbo_loss` over a batch, one timestep per row."""
    x_t = np.asarray(x_t, dtype=np.int64)
    x0 = np.asarray(x0, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if not np.all(np.isfinite(x0_logits.data)):
        raise ValueError("non-finite logits")
    coef = np.array([1.0 if ti == 1 else loss_weight(ti, kernel.T) * kernel.revert_prob(ti)
                     for ti in t])
    weights = (x_t == kernel.mask_id) * coef[:, None]
    logp = tn.log_softmax_last_axis(x0_logits)
    picked = tn.take_last(logp, x0) * weights
    return picked.sum() * (-1.0 / len(t))
