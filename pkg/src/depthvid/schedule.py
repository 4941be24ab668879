"""Noise schedules, forward noising, and the DDPM / DDIM update rules.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``.
All step functions accept either :class:`~depthvid.tensor.Tensor` or plain
numpy arrays and return the same kind they were given; tensors stay on the
tape so the trainer can differentiate through :func:`predict_z0`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, scale, sub


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, index t-1 holds beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention; ``alpha_bar(0) == 1`` by convention."""
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self.check_t(t)
        return float(self.betas[t - 1])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")

    def dump(self, path) -> None:
        lines = [
            f"{t} {self.betas[t - 1]:.9g} {self.alpha_bars[t - 1]:.9g}" for t in range(1, self.T + 1)
        ]
        Path(path).write_text("\n".join(lines) + "\n")


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ScheduleError("betas must be a non-empty 1-d sequence")
    if np.any(betas < 0) or np.any(betas >= 1):
        raise ScheduleError("betas must lie in [0, 1)")
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.array([beta_start]) if T == 1 else np.linspace(beta_start, beta_end, T)
    return schedule_from_betas(betas)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided subsequence ``[T/steps, 2T/steps, ..., T]``."""
    if steps < 1 or steps > T or T % steps:
        raise ScheduleError(f"{steps} DDIM steps do not divide T={T}")
    stride = T // steps
    return list(range(stride, T + 1, stride))


def _lin(a, ca: float, b, cb: float):
    """``ca * a + cb * b`` on tensors (taped) or arrays."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        return sub(scale(a, ca), scale(b, -cb))
    a, b = np.asarray(a), np.asarray(b)
    dt = np.result_type(a, b)
    return (a * dt.type(ca) + b * dt.type(cb)).astype(dt)


def q_sample(z0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form forward marginal ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
    schedule.check_t(t)
    if np.shape(_data(z0)) != np.shape(_data(eps)):
        raise ScheduleError("noise shape differs from latent shape")
    ab = schedule.alpha_bar(t)
    return _lin(z0, np.sqrt(ab), eps, np.sqrt(1.0 - ab))


def forward_step(z_prev, t: int, noise, schedule: NoiseSchedule):
    """One Markov noising step ``z_t = sqrt(1 - b_t) z_{t-1} + sqrt(b_t) n``."""
    b = schedule.beta(t)
    return _lin(z_prev, np.sqrt(1.0 - b), noise, np.sqrt(b))


def predict_z0(z_t, eps_pred, t: int, schedule: NoiseSchedule):
    ab = schedule.alpha_bar(t)
    if ab < 1e-12:
        raise ArithmeticError(f"alpha_bar({t}) = {ab:.3g} too small to invert")
    s = np.sqrt(ab)
    return _lin(z_t, 1.0 / s, eps_pred, -np.sqrt(1.0 - ab) / s)


def ddpm_step(z_t, eps_pred, t: int, schedule: NoiseSchedule, noise=None):
    """Ancestral step with posterior mean and variance ``beta_tilde``."""
    schedule.check_t(t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta = schedule.beta(t)
    alpha = 1.0 - beta
    if ab_t >= 1.0:
        # degenerate beta == 0 prefix: nothing was added, nothing to remove
        return _copy(z_t)
    z0 = predict_z0(z_t, eps_pred, t, schedule)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    mu = _lin(z0, c0, z_t, ct)
    if t == 1 or noise is None:
        return mu
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return _lin(mu, 1.0, noise, np.sqrt(var))


def ddim_step(z_t, eps_pred, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    if t_prev >= t:
        raise ScheduleError(f"ddim_step needs t_prev < t, got {t_prev} >= {t}")
    if t_prev < 0:
        raise ScheduleError("t_prev must be >= 0")
    z0 = predict_z0(z_t, eps_pred, t, schedule)
    ab_prev = schedule.alpha_bar(t_prev)
    return _lin(z0, np.sqrt(ab_prev), eps_pred, np.sqrt(1.0 - ab_prev))


def ddim_invert_step(z_t, eps_pred, t: int, t_next: int, schedule: NoiseSchedule):
    """Inverse of :func:`ddim_step`: move from ``t`` up to ``t_next`` (``t`` may be 0)."""
    if t_next <= t:
        raise ScheduleError(f"ddim_invert_step needs t_next > t, got {t_next} <= {t}")
    ab_t = schedule.alpha_bar(t)
    ab_next = schedule.alpha_bar(t_next)
    s = np.sqrt(ab_t)
    z0 = _lin(z_t, 1.0 / s, eps_pred, -np.sqrt(1.0 - ab_t) / s)
    return _lin(z0, np.sqrt(ab_next), eps_pred, np.sqrt(1.0 - ab_next))


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _copy(x):
    return Tensor(x.data.copy()) if isinstance(x, Tensor) else np.array(x, copy=True)
