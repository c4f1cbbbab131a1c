"""Inference paths: noise prediction with optional skip adapters, and
strided ancestral DDPM sampling (deterministic under a fixed seed)."""

import numpy as np
import torch

from .adapter import AdapterStack, combine_skip
from .errors import ConfigError, InputError
from .schedule import NoiseSchedule
from .unet import NULL_CONCEPT, BaseUNet, Condition, LatentState, SkipFeatureSet


def _cond_batch(cond: Condition, batch: int) -> torch.Tensor:
    emb = cond.embedding
    if emb.ndim == 1:
        emb = emb.unsqueeze(0)
    if emb.shape[0] == batch:
        return emb
    if emb.shape[0] == 1:
        return emb.expand(batch, -1)
    raise InputError(f"condition batch {emb.shape[0]} incompatible with z batch {batch}")


def predict_noise(model: BaseUNet, state: LatentState, cond: Condition,
                  adapters: AdapterStack | None = None) -> torch.Tensor:
    """Evaluate the denoiser, optionally with adapter contributions added to
    the skip features. With an empty stack this is exactly the fused forward."""
    z, t = state.z, state.t
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=torch.int64)
    cond_emb = _cond_batch(cond, z.shape[0])
    skips, trunk, temb = model.encoder(z, t, cond_emb)
    if adapters is not None and len(adapters) > 0:
        if any(len(e.adapter.zero_convs) != len(skips) for e in adapters):
            raise ConfigError("adapter layer count does not match model skip taps")
        contributions = []
        for entry in adapters:
            feats = entry.adapter(z, t, cond_emb)
            scales = entry.layer_scales(t, z.shape[0])
            contributions.append((feats, scales))
        skips = combine_skip(SkipFeatureSet(skips), contributions).features
    return model.decode(trunk, skips, temb, cond_emb)


def collect_skip_features(model: BaseUNet, state: LatentState, cond: Condition) -> SkipFeatureSet:
    """Encoder-side tap values (deepest-first) as consumed by the decoder."""
    t = state.t if torch.is_tensor(state.t) else torch.as_tensor(state.t, dtype=torch.int64)
    cond_emb = _cond_batch(cond, state.z.shape[0])
    skips, _, _ = model.encoder(state.z, t, cond_emb)
    return SkipFeatureSet(skips)


def strided_steps(T: int, steps: int, end: int = 0) -> list:
    """Evenly spaced timesteps from T-1 down to ``end`` inclusive."""
    if steps > T:
        raise InputError(f"steps {steps} exceeds schedule length {T}")
    if end >= T:
        raise InputError(f"end {end} out of range")
    n = min(steps, T - end)
    ts = np.unique(np.linspace(end, T - 1, n).round().astype(np.int64))
    return list(ts[::-1])


def ancestral_step(z, eps, t: int, s: int, sched: NoiseSchedule, noise,
                   clip_x0: bool = True):
    """One (possibly strided) DDPM posterior step from timestep t to s < t."""
    ab_t = float(sched.alpha_bars[t])
    x0 = (z - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    if clip_x0:
        x0 = x0.clamp(-1.0, 1.0)
    if s < 0:
        return x0
    ab_s = float(sched.alpha_bars[s])
    sigma = np.sqrt((1.0 - ab_s) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_s)
    dir_coeff = np.sqrt(max(1.0 - ab_s - sigma ** 2, 0.0))
    return np.sqrt(ab_s) * x0 + dir_coeff * eps + sigma * noise


@torch.no_grad()
def sample(model: BaseUNet, cond: Condition, sched: NoiseSchedule, steps: int,
           seed: int, adapters: AdapterStack | None = None, n: int = 1,
           return_trace: bool = False, guidance_scale: float = 1.0):
    """Ancestral sampling from pure noise. Bit-reproducible for a fixed seed:
    every random draw comes from a dedicated generator, independent of
    whether adapters are attached.

    ``guidance_scale`` > 1 applies classifier-free guidance against the null
    concept (adapters, being part of the model, act on both branches); 1.0
    keeps the plain conditional path bit-exactly."""
    cfg = model.cfg
    gen = torch.Generator("cpu").manual_seed(seed)
    shape = (n, cfg.in_channels, cfg.image_size, cfg.image_size)
    z = torch.randn(shape, generator=gen)
    ts = strided_steps(sched.T, steps)
    null_cond = model.condition(NULL_CONCEPT) if guidance_scale != 1.0 else None
    trace = []
    for i, t in enumerate(ts):
        t_vec = torch.full((n,), t, dtype=torch.int64)
        eps = predict_noise(model, LatentState(z, t_vec), cond, adapters)
        if null_cond is not None:
            eps_null = predict_noise(model, LatentState(z, t_vec), null_cond, adapters)
            eps = eps_null + guidance_scale * (eps - eps_null)
        if return_trace:
            applied = []
            if adapters is not None:
                for entry in adapters:
                    sc = entry.layer_scales(t_vec, n)
                    applied.append([l + 1 for l, s in enumerate(sc)
                                    if float(torch.as_tensor(s).abs().max()) > 0])
            trace.append({"t": int(t), "active_layers": applied})
        s = ts[i + 1] if i + 1 < len(ts) else -1
        noise = torch.randn(shape, generator=gen) if s >= 0 else None
        z = ancestral_step(z, eps, t, s, sched, noise)
    if return_trace:
        return z, trace
    return z


@torch.no_grad()
def partial_denoise(model: BaseUNet, cond: Condition, sched: NoiseSchedule,
                    target_t: int, quick_steps: int, seed: int, n: int = 1) -> LatentState:
    """Run the frozen sampler from pure noise down to timestep ``target_t``.

    At target_t == T-1 this is pure scheduled noise (no denoising applied)."""
    cfg = model.cfg
    gen = torch.Generator("cpu").manual_seed(seed)
    shape = (n, cfg.in_channels, cfg.image_size, cfg.image_size)
    z = torch.randn(shape, generator=gen)
    t_vec = torch.full((n,), target_t, dtype=torch.int64)
    if target_t >= sched.T - 1:
        return LatentState(z, t_vec, seed=seed)
    ts = strided_steps(sched.T, quick_steps, end=target_t)
    for t, s in zip(ts[:-1], ts[1:]):
        eps = predict_noise(model, LatentState(z, torch.full((n,), t, dtype=torch.int64)), cond)
        noise = torch.randn(shape, generator=gen)
        z = ancestral_step(z, eps, t, s, sched, noise)
    return LatentState(z, t_vec, seed=seed)
