"""Noise schedule, forward noising and the DDIM reverse step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t, like: torch.Tensor | None = None):
        """alpha_bar[t] as a tensor broadcastable against ``like``."""
        if isinstance(t, torch.Tensor):
            vals = torch.tensor(self.alpha_bar, dtype=torch.float64)[t.long().cpu()]
            if like is not None:
                vals = vals.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
            return vals
        self._check_t(t)
        return float(self.alpha_bar[t])

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T})")


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar)


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps; ``t`` may be an int or a per-item tensor."""
    if isinstance(z0, torch.Tensor):
        if z0.shape != eps.shape:
            raise ShapeError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
        ab = sched.alpha_bar_at(t, like=z0)
        if isinstance(ab, torch.Tensor):
            return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar_at(int(t))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0,
              noise=None, clamp: bool = True):
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev == -1`` is the final step).

    The predicted clean latent is clamped to [-1, 1]. ``noise`` is required
    when ``eta > 0``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    if not (t > t_prev >= -1):
        raise ConfigError(f"need t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    sched._check_t(t)
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t_prev]) if t_prev >= 0 else 1.0
    lib = torch if isinstance(z_t, torch.Tensor) else np
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if clamp:
        x0 = x0.clamp(-1.0, 1.0) if lib is torch else np.clip(x0, -1.0, 1.0)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    z_prev = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ConfigError("eta > 0 needs an explicit noise tensor")
        z_prev = z_prev + sigma * noise
    return z_prev


def timestep_subsequence(T: int, n_steps: int) -> list[int]:
    if n_steps < 2 or n_steps > T:
        raise ConfigError(f"n_steps must lie in [2, {T}], got {n_steps}")
    return [int(v) for v in np.round(np.linspace(T - 1, 0, n_steps))]



class TimestepSampler:
    """One training timestep per item, each marginally uniform on [0, T).

    With ``cycle`` > 1, every run of ``cycle`` consecutive draws covers
    ``cycle`` equal strata of [0, T) once each, in random order with uniform
    jitter inside each stratum. The expected loss is unchanged while the
    variance of any aligned window of draws drops sharply; rare tiny-t items
    otherwise dominate short loss averages. ``cycle`` <= 1 gives iid draws.
    """

    def __init__(self, T: int, cycle: int, generator: torch.Generator | None = None):
        self.T, self.cycle, self.gen = T, max(int(cycle), 1), generator
        self._queue = torch.empty(0, dtype=torch.long)

    def _refill(self):
        n = self.cycle
        order = torch.randperm(n, generator=self.gen).double()
        jitter = torch.rand(n, generator=self.gen, dtype=torch.float64)
        t = ((order + jitter) * self.T / n).long().clamp_(0, self.T - 1)
        self._queue = torch.cat([self._queue, t])

    def draw(self, b: int) -> torch.Tensor:
        if self.cycle == 1:
            return torch.randint(0, self.T, (b,), generator=self.gen)
        while len(self._queue) < b:
            self._refill()
        t, self._queue = self._queue[:b], self._queue[b:]
        return t
