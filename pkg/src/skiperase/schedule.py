"""DDPM noise schedules (linear and cosine) and the closed-form forward process."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InputError

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_S = 0.008
COSINE_BETA_MAX = 0.999


def cosine_alpha_bar(t: float, T: int, s: float = COSINE_S) -> float:
    """Scalar cumulative-alpha curve used by the cosine schedule."""
    return float(np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2)


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray  # float64, shape (T,)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] < 2:
            raise ConfigError(f"need at least 2 betas, got shape {betas.shape}")
        if not ((betas > 0).all() and (betas < 1).all()):
            raise ConfigError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not (np.diff(alpha_bars) < 0).all():
            raise ConfigError("cumulative alpha products must be strictly decreasing")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t):
        """alpha_bar_t; accepts an int or an integer array."""
        return self.alpha_bars[t]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T}


def make_noise_schedule(T: int = 1000, kind: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if kind == "linear":
        # Endpoints scale with 1000/T so short schedules keep comparable total
        # noise; clipped below 1 so very short schedules stay valid.
        scale = 1000.0 / T
        betas = np.clip(np.linspace(scale * LINEAR_BETA_START, scale * LINEAR_BETA_END, T),
                        1e-8, 0.999)
    elif kind == "cosine":
        ts = np.arange(T + 1, dtype=np.float64)
        ab = np.cos((ts / T + COSINE_S) / (1 + COSINE_S) * np.pi / 2) ** 2
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, COSINE_BETA_MAX)
        betas = np.maximum(betas, 1e-12)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind=kind, betas=betas)


def forward_diffuse(x0: torch.Tensor, t, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """q(z_t | x_0): z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` may be an int (shared) or a 1-D tensor of per-sample steps for a
    batched ``x0``.
    """
    if x0.shape != noise.shape:
        raise InputError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if (t_arr < 0).any() or (t_arr >= sched.T).any():
        raise InputError(f"t out of range [0, {sched.T})")
    ab = torch.as_tensor(sched.alpha_bars[t_arr], dtype=x0.dtype)
    if ab.numel() > 1:
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise
