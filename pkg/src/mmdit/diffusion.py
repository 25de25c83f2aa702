"""DDPM forward process, masked training objective, and samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .masks import masked_mse
from .model import dit_forward


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or len(b) < 1:
            raise ConfigError("betas must be a 1D array")
        if not (b[0] > 0 and b[-1] < 1 and np.all(np.diff(b) >= 0)):
            raise ConfigError("betas must satisfy 0 < b_1 <= ... <= b_T < 1")
        ab = self.alpha_bars
        if not np.all(np.diff(ab) < 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if ab[-1] >= 0.01:
            raise ConfigError(f"alpha_bar_T = {ab[-1]:.4f} >= 0.01; schedule too short")

    @classmethod
    def linear(cls, n_steps=1000, beta_start=1e-4, beta_end=0.02):
        return cls(betas=np.linspace(beta_start, beta_end, n_steps))

    @property
    def n_steps(self):
        return len(self.betas)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """alpha_bar at 1-indexed t; t == 0 returns 1 (clean data)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.n_steps):
            raise ContractError(f"timestep {t} outside [0, {self.n_steps}]")
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[t]


def q_sample(x0, t, eps, schedule):
    """Diffuse clean data to timestep t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.n_steps):
        raise ContractError(f"t={t} outside [1, {schedule.n_steps}]")
    ab = schedule.alpha_bar(t)
    x0_t = T.as_tensor(x0)
    eps_t = T.as_tensor(eps)
    if x0_t.shape != eps_t.shape:
        raise ContractError(f"x0 {x0_t.shape} and eps {eps_t.shape} shapes differ")
    if ab.ndim == 0:
        return T.add(T.mul(x0_t, float(np.sqrt(ab))), T.mul(eps_t, float(np.sqrt(1.0 - ab))))
    coef_shape = (len(ab),) + (1,) * (x0_t.ndim - 1)
    c0 = T.Tensor._wrap(np.sqrt(ab).reshape(coef_shape))
    c1 = T.Tensor._wrap(np.sqrt(1.0 - ab).reshape(coef_shape))
    return T.broadcast_add(T.broadcast_mul(x0_t, c0), T.broadcast_mul(eps_t, c1))


@dataclass
class TrainBatch:
    """One homogeneous-modality training batch, frames stacked on axis 0."""

    ref: np.ndarray            # (B, C, H, W) reference images in [0, 1]
    gt: np.ndarray             # (B, C, H, W) target frames in [0, 1]
    driven: np.ndarray         # (B, C, H, W) region-masked driving frames
    audio_tokens: np.ndarray | None  # (B, A, d_audio) or None
    audio_scale: float
    roles: list | None         # per-sample TokenRoleMap, None disables masking
    mouth_driven: np.ndarray   # (B,) bool
    loss_mask: np.ndarray      # (B, C, H, W) of {0, 1}
    modality: str
    temporal: bool = False     # batch is one ordered clip (stage 3)


def training_loss(model, batch, schedule, rng):
    """Draw (t, eps), diffuse the target, and score the noise prediction
    under the batch's spatial loss mask. Differentiable in the model."""
    b = batch.gt.shape[0]
    t = rng.integers(1, schedule.n_steps + 1, size=b)
    eps = rng.standard_normal(batch.gt.shape)
    x0 = 2.0 * batch.gt - 1.0
    ab = schedule.alpha_bar(t).reshape(b, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    motion = model.driven(T.Tensor._wrap(batch.driven))
    ref_feats = model.reference(T.Tensor._wrap(batch.ref))
    audio = None if batch.audio_tokens is None else T.Tensor._wrap(batch.audio_tokens)
    eps_hat = dit_forward(
        model.denoiser, T.Tensor._wrap(x_t), t, motion, audio, ref_feats,
        batch.roles, batch.mouth_driven, batch.audio_scale,
        temporal_active=batch.temporal,
    )
    return masked_mse(eps_hat, eps, batch.loss_mask)


def sample_timesteps(n_steps, steps):
    if steps < 1 or n_steps % steps:
        raise ConfigError(f"steps={steps} must divide the schedule length {n_steps}")
    stride = n_steps // steps
    return list(range(n_steps, 0, -stride)), stride


def sample(predict, shape, schedule, steps, mode="deterministic", seed=0,
           share_initial=True):
    """Iteratively denoise from unit Gaussian noise.

    ``predict(x, t) -> eps_hat`` operates on plain (F, C, H, W) arrays.
    Deterministic mode injects no noise and, with ``share_initial``, uses
    one seeded latent for every frame so all frame-to-frame variation
    comes from the conditions. Returns frames in [0, 1].
    """
    if mode not in ("deterministic", "ancestral"):
        raise ConfigError(f"unknown sampling mode {mode!r}")
    taus, stride = sample_timesteps(schedule.n_steps, steps)
    rng = np.random.default_rng(seed)
    f = shape[0]
    if mode == "deterministic" and share_initial:
        x = np.broadcast_to(rng.standard_normal((1,) + tuple(shape[1:])), shape).copy()
    else:
        x = rng.standard_normal(shape)

    for tau in taus:
        ab_t = schedule.alpha_bar(tau)
        ab_prev = schedule.alpha_bar(tau - stride)
        eps_hat = predict(x, tau)
        x0 = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        x0 = np.clip(x0, -1.0, 1.0)
        if mode == "deterministic":
            x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
        else:
            beta_eff = 1.0 - ab_t / ab_prev
            var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
            coef = np.sqrt(max(1.0 - ab_prev - var, 0.0))
            x = np.sqrt(ab_prev) * x0 + coef * eps_hat
            if tau - stride > 0:
                x = x + np.sqrt(var) * rng.standard_normal(shape)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)
