"""Stage-1 fine-tuning: optimize the skip adapter so the adapted prediction
for the target concept tracks a negatively guided target built from the
frozen model. Also provides the direct cross-attention fine-tune baseline."""

import copy
import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .adapter import AdapterStack, SkipAdapter, StackEntry
from .diffusion import partial_denoise, predict_noise
from .errors import ConfigError, NumericalError
from .losses import erase_loss
from .schedule import NoiseSchedule
from .unet import NULL_CONCEPT, BaseUNet, LatentState


@dataclass
class EraseConfig:
    strength: float = 1.0      # eta, negative-guidance coefficient
    steps: int = 300
    learning_rate: float = 1e-3
    batch: int = 4
    quick_steps: int = 20      # strided steps for latent construction
    seed: int = 0
    t_min: int = 0             # timestep sampling range (inclusive)
    t_max: int | None = None   # default: full range

    def __post_init__(self):
        if self.strength < 0:
            raise ConfigError("strength (eta) must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def sample_training_latent(model: BaseUNet, concept, sched: NoiseSchedule,
                           seed: int, quick_steps: int = 20, batch: int = 1,
                           t_min: int = 0, t_max: int | None = None) -> LatentState:
    """Partially denoised latent at a uniformly sampled timestep, produced by
    running the frozen sampler from pure noise under the target concept."""
    t_max = sched.T - 1 if t_max is None else t_max
    rng = np.random.default_rng(seed)
    t = int(rng.integers(t_min, t_max + 1))
    cond = model.condition(concept, batch=batch) if isinstance(concept, str) else concept
    return partial_denoise(model, cond, sched, t, quick_steps, seed, n=batch)


def _dump_diagnostics(path, step, state, loss_value):
    diag = {"step": step, "loss": loss_value,
            "t": torch.as_tensor(state.t).tolist(),
            "z_mean": float(state.z.mean()), "z_std": float(state.z.std())}
    with open(path, "w") as f:
        json.dump(diag, f, indent=2)


def finetune_epr(model: BaseUNet, adapter: SkipAdapter, sched: NoiseSchedule,
                 cfg: EraseConfig, diag_path: str = "erase_failure_diag.json"):
    """Train the adapter's strategy-masked parameters; the base model stays
    frozen. Returns (adapter, trace)."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    for p in adapter.parameters():
        p.requires_grad_(False)
    params = adapter.trainable_parameters()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    rng = np.random.default_rng(cfg.seed)
    t_max = cfg.t_max if cfg.t_max is not None else sched.T - 1
    cond_era = model.condition(adapter.target_concept, batch=cfg.batch)
    cond_null = model.condition(NULL_CONCEPT, batch=cfg.batch)
    stack = AdapterStack([StackEntry(adapter)])
    trace = []
    for step in range(cfg.steps):
        t = int(rng.integers(cfg.t_min, t_max + 1))
        state = partial_denoise(model, cond_era, sched, t, cfg.quick_steps,
                                cfg.seed * 1_000_003 + step, n=cfg.batch)
        with torch.no_grad():
            eps_era = predict_noise(model, state, cond_era)
            eps_null = predict_noise(model, state, cond_null)
        eps_adapted = predict_noise(model, state, cond_era, stack)
        breakdown = erase_loss(eps_adapted, eps_era, eps_null, cfg.strength,
                               t=state.t, concept_id=adapter.target_concept)
        if not torch.isfinite(breakdown.total):
            _dump_diagnostics(diag_path, step, state, float(breakdown.total))
            raise NumericalError(f"non-finite erase loss at step {step}; "
                                 f"diagnostics written to {diag_path}")
        opt.zero_grad()
        breakdown.total.backward()
        opt.step()
        trace.append({"step": step, "total": breakdown.total.detach().item(), "t": t,
                      "lr": cfg.learning_rate})
    for p in params:
        p.requires_grad_(False)
    adapter.eval()
    return adapter, trace


def finetune_crossattn_baseline(model: BaseUNet, concept: str, sched: NoiseSchedule,
                                cfg: EraseConfig):
    """Ablation baseline: fine-tune the model's own encoder cross-attention
    parameters directly (no adapter). Returns (fine-tuned copy, trace); the
    input model is untouched."""
    tuned = copy.deepcopy(model)
    tuned.train()
    for p in tuned.parameters():
        p.requires_grad_(False)
    params = [p for n, p in tuned.named_parameters()
              if n.startswith("encoder.") and "xattn" in n]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    t_max = cfg.t_max if cfg.t_max is not None else sched.T - 1
    cond_era_frozen = model.condition(concept, batch=cfg.batch)
    cond_null_frozen = model.condition(NULL_CONCEPT, batch=cfg.batch)
    cond_era = tuned.condition(concept, batch=cfg.batch)
    trace = []
    for step in range(cfg.steps):
        t = int(rng.integers(cfg.t_min, t_max + 1))
        state = partial_denoise(model, cond_era_frozen, sched, t, cfg.quick_steps,
                                cfg.seed * 1_000_003 + step, n=cfg.batch)
        with torch.no_grad():
            eps_era = predict_noise(model, state, cond_era_frozen)
            eps_null = predict_noise(model, state, cond_null_frozen)
        eps_adapted = predict_noise(tuned, state, cond_era)
        breakdown = erase_loss(eps_adapted, eps_era, eps_null, cfg.strength)
        if not torch.isfinite(breakdown.total):
            raise NumericalError(f"non-finite baseline loss at step {step}")
        opt.zero_grad()
        breakdown.total.backward()
        opt.step()
        trace.append({"step": step, "total": breakdown.total.detach().item(), "t": t,
                      "lr": cfg.learning_rate})
    tuned.eval()
    for p in tuned.parameters():
        p.requires_grad_(False)
    return tuned, trace


def write_trace_csv(trace: list, path):
    if not trace:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)
