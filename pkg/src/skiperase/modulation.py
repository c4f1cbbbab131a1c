"""Stage-2 timestep-layer modulation: a grid of non-negative scalars over
timestep groups x skip layers that rescales adapter outputs, trained with
erase + preservation losses while the adapter and backbone stay frozen."""

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .adapter import AdapterStack, SkipAdapter, StackEntry
from .diffusion import partial_denoise, predict_noise
from .errors import ConfigError, InputError, NumericalError
from .losses import era2_loss, erase_target, preservation_loss, total_stage2_loss
from .schedule import NoiseSchedule
from .unet import NULL_CONCEPT, BaseUNet, LatentState

MODES = ("combined", "timestep_only", "layer_only")


def group_boundaries(T: int, groups: int) -> np.ndarray:
    """Start index of each group under the floor partition; widths differ by <= 1."""
    if groups < 1 or groups > T:
        raise ConfigError(f"groups must be in [1, {T}], got {groups}")
    return (np.arange(groups, dtype=np.int64) * T) // groups


@dataclass
class ModulationFactors:
    """Piecewise-constant-in-t scaling grid of shape (groups, L)."""

    T: int
    L: int
    groups: int = 20
    grid: torch.Tensor = None
    boundaries: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.boundaries is None:
            self.boundaries = group_boundaries(self.T, self.groups)
        if self.grid is None:
            self.grid = torch.ones(self.groups, self.L)
        if tuple(self.grid.shape) != (self.groups, self.L):
            raise ConfigError(f"grid shape {tuple(self.grid.shape)} != ({self.groups}, {self.L})")

    def group_index(self, t):
        """Group of timestep t (half-open boundaries: t == boundary starts its group)."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if (t_arr < 0).any() or (t_arr >= self.T).any():
            raise InputError(f"t out of range [0, {self.T})")
        idx = np.searchsorted(self.boundaries, t_arr, side="right") - 1
        return idx if np.ndim(t) else int(idx[0])

    def lookup(self, t: int, l: int) -> float:
        """Factor for timestep t and 1-based layer l (l = 1 deepest)."""
        if not 1 <= l <= self.L:
            raise InputError(f"layer index {l} out of range [1, {self.L}]")
        return float(self.grid[self.group_index(t), l - 1])

    def factors_for(self, t: torch.Tensor) -> torch.Tensor:
        """(B, L) factor rows for a batch of timesteps; differentiable in grid."""
        idx = torch.as_tensor(self.group_index(t.cpu().numpy()), dtype=torch.int64)
        return self.grid[idx]

    def to_dict(self) -> dict:
        return {
            "T": self.T, "L": self.L, "groups": self.groups,
            "boundaries": self.boundaries.tolist(),
            "values": self.grid.detach().numpy().ravel().tolist(),  # row-major
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModulationFactors":
        grid = torch.tensor(d["values"], dtype=torch.float32).view(d["groups"], d["L"])
        return cls(T=d["T"], L=d["L"], groups=d["groups"], grid=grid,
                   boundaries=np.asarray(d["boundaries"], dtype=np.int64))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "ModulationFactors":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def init_modulation(T: int, L: int, groups: int = 20) -> ModulationFactors:
    """All-ones grid with floor-partition group boundaries."""
    return ModulationFactors(T=T, L=L, groups=groups)


def lookup_factor(m: ModulationFactors, t: int, l: int) -> float:
    return m.lookup(t, l)


@dataclass
class ModulationConfig:
    preserve_weight: float = 1.0  # weight of the preservation term
    strength: float = 1.0         # erasure-strength eta, inherited from stage 1
    steps: int = 200
    learning_rate: float = 1e-2
    batch: int = 4
    quick_steps: int = 20         # strided steps for latent construction
    seed: int = 0
    mode: str = "combined"
    t_min: int = 0
    t_max: int | None = None

    def __post_init__(self):
        if self.preserve_weight < 0:
            raise ConfigError("preserve_weight must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")


def _grid_param(m: ModulationFactors, mode: str) -> torch.Tensor:
    """Trainable parameter whose expansion is the grid; reduced shapes give
    the timestep-only / layer-only ablations."""
    if mode == "combined":
        init = m.grid.detach().clone()
    elif mode == "timestep_only":
        init = m.grid.detach().mean(dim=1, keepdim=True).clone()
    else:  # layer_only
        init = m.grid.detach().mean(dim=0, keepdim=True).clone()
    return init.requires_grad_(True)


def run_tlmo(model: BaseUNet, adapter: SkipAdapter, m: ModulationFactors,
             sched: NoiseSchedule, cfg: ModulationConfig):
    """Train the modulation grid; the adapter and backbone stay frozen.

    Returns (trained ModulationFactors, trace rows). Grid entries are clamped
    to be non-negative after every step."""
    model.eval()
    adapter.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    for p in adapter.parameters():
        p.requires_grad_(False)

    theta = _grid_param(m, cfg.mode)
    opt = torch.optim.Adam([theta], lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    t_max = cfg.t_max if cfg.t_max is not None else sched.T - 1
    cond_era = model.condition(adapter.target_concept, batch=cfg.batch)
    cond_null = model.condition(NULL_CONCEPT, batch=cfg.batch)
    trace = []
    live = ModulationFactors(T=m.T, L=m.L, groups=m.groups,
                             grid=theta.expand(m.groups, m.L),
                             boundaries=m.boundaries)
    stack = AdapterStack([StackEntry(adapter, modulation=live)])

    for step in range(cfg.steps):
        t_era = int(rng.integers(cfg.t_min, t_max + 1))
        t_pre = int(rng.integers(cfg.t_min, t_max + 1))
        seed_base = cfg.seed * 1_000_003 + step * 2
        state_era = partial_denoise(model, cond_era, sched, t_era,
                                    cfg.quick_steps, seed_base, n=cfg.batch)
        state_pre = partial_denoise(model, cond_null, sched, t_pre,
                                    cfg.quick_steps, seed_base + 1, n=cfg.batch)
        with torch.no_grad():
            eps_era = predict_noise(model, state_era, cond_era)
            eps_null_era = predict_noise(model, state_era, cond_null)
            eps_null_pre = predict_noise(model, state_pre, cond_null)

        live.grid = theta.expand(m.groups, m.L)
        eps_adapted = predict_noise(model, state_era, cond_era, stack)
        eps_adapted_null = predict_noise(model, state_pre, cond_null, stack)
        era2 = era2_loss(eps_adapted, eps_era, eps_null_era, cfg.strength)
        pre = preservation_loss(eps_adapted_null, eps_null_pre)
        total = total_stage2_loss(era2, pre, cfg.preserve_weight)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite stage-2 loss at step {step}: "
                                 f"era2={float(era2)} pre={float(pre)}")
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            theta.clamp_(min=0.0)
        trace.append({"step": step, "era2": era2.detach().item(), "pre": pre.detach().item(),
                      "total": total.detach().item(), "t_era": t_era, "t_pre": t_pre})

    trained = ModulationFactors(T=m.T, L=m.L, groups=m.groups,
                                grid=theta.detach().expand(m.groups, m.L).clone(),
                                boundaries=m.boundaries)
    return trained, trace
