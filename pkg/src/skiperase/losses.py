"""Erasure and preservation objectives.

The stage-1 erasing loss regresses the adapted prediction onto a negatively
guided target built from the frozen model; stage 2 reuses the same form and
adds a preservation term on the empty concept, weighted by ``preserve_weight``.
"""

from dataclasses import dataclass

import torch

from .errors import InputError


@dataclass
class LossBreakdown:
    total: torch.Tensor
    guidance_norm: float  # ||eta * (eps_era - eps_null)||^2 component, for traces
    t: list
    concept_id: str = ""


def _check_shapes(*tensors):
    shapes = {tuple(x.shape) for x in tensors}
    if len(shapes) > 1:
        raise InputError(f"shape mismatch: {sorted(shapes)}")


def erase_target(eps_era_frozen, eps_null_frozen, eta: float):
    """Negatively guided regression target: eps_null - eta * (eps_era - eps_null)."""
    _check_shapes(eps_era_frozen, eps_null_frozen)
    return eps_null_frozen - eta * (eps_era_frozen - eps_null_frozen)


def erase_loss(eps_adapted, eps_era_frozen, eps_null_frozen, eta: float,
               t=None, concept_id: str = "") -> LossBreakdown:
    """Mean-squared residual against the negatively guided target."""
    _check_shapes(eps_adapted, eps_era_frozen, eps_null_frozen)
    target = erase_target(eps_era_frozen, eps_null_frozen, eta)
    total = torch.mean((eps_adapted - target) ** 2)
    guidance = float(torch.mean((eta * (eps_era_frozen - eps_null_frozen)) ** 2))
    ts = [] if t is None else torch.as_tensor(t).flatten().tolist()
    return LossBreakdown(total=total, guidance_norm=guidance, t=ts, concept_id=concept_id)


def preservation_loss(eps_adapted_null, eps_null_frozen):
    """Mean-squared drift of the adapted model on the empty concept."""
    _check_shapes(eps_adapted_null, eps_null_frozen)
    return torch.mean((eps_adapted_null - eps_null_frozen) ** 2)


def era2_loss(eps_adapted, eps_era_frozen, eps_null_frozen, eta: float):
    """Stage-2 erasing loss; identical in form to the stage-1 loss with the
    adapted branch now carrying the modulation grid."""
    return erase_loss(eps_adapted, eps_era_frozen, eps_null_frozen, eta).total


def total_stage2_loss(era2, pre, preserve_weight: float):
    """era2 + preserve_weight * pre."""
    return era2 + preserve_weight * pre
