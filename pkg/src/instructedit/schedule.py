"""Diffusion forward process and deterministic DDIM reverse steps.

Forward noising (closed form):

    x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps

All schedule tables are float64. The step functions accept numpy arrays or
torch tensors; the schedule scalars are applied as python floats so the
caller's dtype is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidRangeError, ShapeMismatchError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise InvalidRangeError("betas must be a non-empty vector")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise InvalidRangeError("every beta must lie in (0, 1)")
        betas = betas.copy()
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        alpha_bars = np.cumprod(alphas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.size)

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash(self.betas.tobytes())

    def to_list(self) -> list[float]:
        """Betas as python floats; ``repr`` of each round-trips exactly."""
        return [float(b) for b in self.betas]

    @classmethod
    def from_list(cls, betas) -> "NoiseSchedule":
        return cls(np.asarray([float(b) for b in betas], dtype=np.float64))

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_timesteps:
            raise InvalidRangeError(
                f"timestep {t} outside [0, {self.num_timesteps})"
            )
        return t


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 2e-2) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise InvalidRangeError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(
            "need 0 < beta_start <= beta_end < 1, got "
            f"beta_start={beta_start}, beta_end={beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _check_same_shape(a, b, what="tensors"):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(
            f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def add_noise(x, epsilon, t: int, schedule: NoiseSchedule):
    _check_same_shape(x, epsilon, "x and epsilon")
    t = schedule.check_timestep(t)
    abar = float(schedule.alpha_bars[t])
    return math.sqrt(abar) * x + math.sqrt(1.0 - abar) * epsilon


def add_noise_batch(x, epsilon, t, schedule: NoiseSchedule):
    """Per-sample timesteps for torch batches; ``t`` is a 1-D integer tensor."""
    import torch

    _check_same_shape(x, epsilon, "x and epsilon")
    t = torch.as_tensor(t)
    if t.ndim != 1 or t.shape[0] != x.shape[0]:
        raise ShapeMismatchError("need one timestep per batch element")
    if int(t.min()) < 0 or int(t.max()) >= schedule.num_timesteps:
        raise InvalidRangeError("timestep out of range")
    abar = torch.tensor(schedule.alpha_bars, dtype=torch.float64)[t]
    shape = (-1,) + (1,) * (x.ndim - 1)
    a = abar.sqrt().to(x.dtype).reshape(shape)
    b = (1.0 - abar).sqrt().to(x.dtype).reshape(shape)
    return a * x + b * epsilon


def predict_x0(x_t, eps_hat, t: int, schedule: NoiseSchedule):
    """Invert the forward process given a noise estimate."""
    _check_same_shape(x_t, eps_hat, "x_t and eps_hat")
    t = schedule.check_timestep(t)
    abar = float(schedule.alpha_bars[t])
    return (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule):
    """One deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    ``t_prev == -1`` means the final step to clean data (abar = 1).
    """
    _check_same_shape(x_t, eps_hat, "x_t and eps_hat")
    t = schedule.check_timestep(t)
    t_prev = int(t_prev)
    if t_prev > t:
        raise InvalidRangeError(f"t_prev={t_prev} must not exceed t={t}")
    if t_prev < -1:
        raise InvalidRangeError(f"t_prev={t_prev} below -1")
    if t_prev == t:
        return x_t
    x0 = predict_x0(x_t, eps_hat, t, schedule)
    abar_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bars[t_prev])
    return math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * eps_hat


def ddim_timesteps(num_steps: int, schedule: NoiseSchedule) -> list[int]:
    """Evenly spaced descending timesteps; index 0 is the most noised."""
    T = schedule.num_timesteps
    if num_steps < 1:
        raise InvalidRangeError("num_steps must be >= 1")
    if num_steps > T:
        raise InvalidRangeError(f"num_steps={num_steps} exceeds T={T}")
    stride = T / num_steps
    ts = [int(math.floor(i * stride)) for i in range(num_steps)]
    return [T - 1 - s for s in ts]
