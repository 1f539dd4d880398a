"""Variance-exploding SDE machinery.

Forward process: x_t = x_0 + sigma(t) * z with z ~ N(0, I), corresponding to
dx = g(t) dw with g(t)^2 = d sigma(t)^2 / dt. The schedule interpolates
geometrically between sigma_min and sigma_max, so log sigma is affine in t.

Everything here is a pure function of its inputs and works on both numpy
arrays and torch tensors (training code passes tensors so gradients flow,
analytic experiments pass arrays).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ContractError, SamplerDivergenceError, TrainingError

Array = np.ndarray | torch.Tensor

EPS_T = 1e-5  # lower end of the training-time t distribution


def _all_finite(x: Array) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(np.asarray(x)).all())


def _expand_to(row_values: Array, like: Array) -> Array:
    """Reshape a length-B vector so it broadcasts against a [B, ...] array."""
    if np.ndim(row_values) == 0:
        return row_values
    if isinstance(like, torch.Tensor) and not isinstance(row_values, torch.Tensor):
        row_values = torch.as_tensor(row_values, dtype=like.dtype, device=like.device)
    shape = (len(row_values),) + (1,) * (like.ndim - 1)
    return row_values.reshape(shape)


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise schedule sigma(t) = sigma_min * (sigma_max/sigma_min)**t."""

    sigma_min: float = 0.01
    sigma_max: float = 10.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ContractError(
                f"schedule requires 0 < sigma_min < sigma_max, "
                f"got ({self.sigma_min}, {self.sigma_max})"
            )

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def _check_t(self, t):
        tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if not np.isfinite(tt).all() or (tt < 0).any() or (tt > 1).any():
            raise ContractError(f"t must lie in [0, 1], got {tt!r}")

    def sigma(self, t):
        """Noise level at time t in [0, 1]; scalar or elementwise on arrays."""
        self._check_t(t)
        ratio = self.sigma_max / self.sigma_min
        return self.sigma_min * ratio**t

    def g_squared(self, t):
        """d sigma^2 / dt = 2 * log(sigma_max/sigma_min) * sigma(t)^2."""
        return 2.0 * self.log_ratio * self.sigma(t) ** 2


@dataclass(frozen=True)
class DiffusionBatch:
    """A perturbed training batch: xt = x0 + sigma(t) * z rowwise."""

    x0: Array
    t: Array
    z: Array
    xt: Array


def sample_t(batch: int, generator: np.random.Generator, eps_t: float = EPS_T) -> np.ndarray:
    """Training times drawn uniformly from [eps_t, 1] (avoids sigma -> sigma_min stiffness)."""
    return generator.uniform(eps_t, 1.0, size=batch)


def perturb(x0: Array, t, z: Array, schedule: NoiseSchedule) -> Array:
    """xt = x0 + sigma(t) * z with per-row t."""
    if tuple(np.shape(x0)) != tuple(np.shape(z)):
        raise ContractError(f"x0/z shape mismatch: {np.shape(x0)} vs {np.shape(z)}")
    if np.ndim(t) > 0 and len(t) != np.shape(x0)[0]:
        raise ContractError(f"t has length {len(t)} but x0 has {np.shape(x0)[0]} rows")
    sig = _expand_to(schedule.sigma(t), x0)
    return x0 + sig * z


def make_batch(x0: Array, t, z: Array, schedule: NoiseSchedule) -> DiffusionBatch:
    return DiffusionBatch(x0=x0, t=t, z=z, xt=perturb(x0, t, z, schedule))


def true_perturbation_score(xt: Array, x0: Array, t, schedule: NoiseSchedule) -> Array:
    """Score of the Gaussian perturbation kernel: -(xt - x0) / sigma(t)^2."""
    if tuple(np.shape(xt)) != tuple(np.shape(x0)):
        raise ContractError(f"xt/x0 shape mismatch: {np.shape(xt)} vs {np.shape(x0)}")
    sig2 = _expand_to(schedule.sigma(t) ** 2, xt)
    return -(xt - x0) / sig2


def _mean_sq(x: Array) -> Array:
    return (x**2).mean()


def dsm_loss(score_fn: Callable, batch: DiffusionBatch, schedule: NoiseSchedule) -> Array:
    """Unweighted denoising score matching: mean squared error to the analytic score.

    score_fn maps (xt, t) -> score of matching shape; any conditioning is
    expected to be bound in the closure.
    """
    pred = score_fn(batch.xt, batch.t)
    if not _all_finite(pred):
        raise TrainingError(
            f"score_fn produced non-finite output (t range "
            f"[{np.min(batch.t):.4g}, {np.max(batch.t):.4g}])"
        )
    target = true_perturbation_score(batch.xt, batch.x0, batch.t, schedule)
    return _mean_sq(pred - target)


def eps_dsm_loss(score_fn: Callable, batch: DiffusionBatch, schedule: NoiseSchedule) -> Array:
    """Noise-prediction form ||z + score * sigma(t)||^2 (mean over elements).

    Algebraically equal to sigma(t)^2-weighted DSM; this is the canonical
    training weighting, while `dsm_loss` is the plain objective.
    """
    pred = score_fn(batch.xt, batch.t)
    if not _all_finite(pred):
        raise TrainingError("score_fn produced non-finite output")
    sig = _expand_to(schedule.sigma(batch.t), batch.xt)
    return _mean_sq(batch.z + pred * sig)


def tweedie_denoise(xt: Array, score: Array, t, schedule: NoiseSchedule) -> Array:
    """Posterior-mean estimate of clean data: x0_hat = xt + sigma(t)^2 * score."""
    sig2 = _expand_to(schedule.sigma(t) ** 2, xt)
    return xt + sig2 * score


def uniform_time_grid(steps: int, dtype=np.float64) -> np.ndarray:
    """Uniform sampling grid from t=1 down to t=0 with `steps` intervals."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    return np.linspace(1.0, 0.0, steps + 1, dtype=dtype)


def heun_integrate(
    x_init: Array,
    score_fn: Callable,
    schedule: NoiseSchedule,
    steps: int | None = None,
    t_grid: Sequence[float] | None = None,
    final_tweedie: bool = True,
) -> Array:
    """Integrate the probability-flow ODE dx/dt = -0.5 g(t)^2 score(x, t).

    Runs from t=1 down to t=0 on `t_grid` (default: uniform with `steps`
    intervals) using an Euler predictor and trapezoidal corrector, then
    projects the final state with Tweedie's formula at the terminal time.
    The caller supplies x_init ~ N(0, sigma_max^2 I).
    """
    if t_grid is None:
        if steps is None:
            raise ContractError("provide either steps or t_grid")
        t_grid = uniform_time_grid(steps)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or len(t_grid) < 2 or not (np.diff(t_grid) < 0).all():
        raise ContractError("t_grid must be 1-d and strictly decreasing")

    x = x_init
    for i in range(len(t_grid) - 1):
        t_cur, t_next = float(t_grid[i]), float(t_grid[i + 1])
        dt = t_next - t_cur  # negative: integrating backward in time
        d1 = -0.5 * schedule.g_squared(t_cur) * score_fn(x, t_cur)
        x_euler = x + d1 * dt
        d2 = -0.5 * schedule.g_squared(t_next) * score_fn(x_euler, t_next)
        x = x + 0.5 * (d1 + d2) * dt
        if not _all_finite(x):
            raise SamplerDivergenceError("non-finite state during Heun integration", step=i)

    if final_tweedie:
        t_end = float(t_grid[-1])
        x = tweedie_denoise(x, score_fn(x, t_end), t_end, schedule)
        if not _all_finite(x):
            raise SamplerDivergenceError("non-finite state after Tweedie projection",
                                         step=len(t_grid) - 1)
    return x
