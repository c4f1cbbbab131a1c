"""Skip-connection eraser adapter: a trainable copy of the U-Net encoder
whose per-tap outputs pass through zero-initialized 1x1 projections and are
added to the frozen model's skip features."""

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, InputError
from .unet import BaseUNet, Condition, EncoderTrunk, SkipFeatureSet

STRATEGIES = ("cross_attention_only", "full")


class SkipAdapter(nn.Module):
    """Encoder copy + per-tap zero convolutions for one target concept.

    At init every zero-conv weight and bias is exactly zero, so the adapter
    output is identically zero and attaching it changes nothing.
    """

    def __init__(self, encoder: EncoderTrunk, strategy: str, target_concept: str):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.encoder = encoder
        self.strategy = strategy
        self.target_concept = target_concept
        convs = []
        for (c, _, _) in encoder.tap_shapes():
            conv = nn.Conv2d(c, c, 1)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            convs.append(conv)
        self.zero_convs = nn.ModuleList(convs)

    def forward(self, z, t, cond_emb) -> list:
        """Per-tap erasure features, deepest-first, shapes matching the base taps."""
        taps, _, _ = self.encoder(z, t, cond_emb)
        return [conv(tap) for conv, tap in zip(self.zero_convs, taps)]

    def trainable_parameter_names(self) -> list:
        """Names selected by the strategy mask (zero convs always included)."""
        names = [n for n, _ in self.named_parameters() if n.startswith("zero_convs.")]
        if self.strategy == "full":
            names += [n for n, _ in self.named_parameters() if n.startswith("encoder.")]
        else:
            names += [n for n, _ in self.named_parameters()
                      if n.startswith("encoder.") and "xattn" in n]
        return sorted(names)

    def trainable_parameters(self) -> list:
        wanted = set(self.trainable_parameter_names())
        return [p for n, p in self.named_parameters() if n in wanted]


def init_epr(model: BaseUNet, strategy: str, concept: Condition | str) -> SkipAdapter:
    """Fresh adapter: bit-exact encoder copy, all-zero projections."""
    concept_id = concept if isinstance(concept, str) else concept.concept_id
    if concept_id not in model.concept_ids():
        raise ConfigError(f"unknown concept {concept_id!r}")
    encoder_copy = copy.deepcopy(model.encoder)
    return SkipAdapter(encoder_copy, strategy, concept_id)


def combine_skip(original: SkipFeatureSet, contributions: list) -> SkipFeatureSet:
    """Per layer: x + sum_k scale_k[l] * S_k[l]. ``contributions`` is a list of
    (features, scales) where scales is None (all ones) or a per-layer list of
    scalars / broadcastable tensors. Summation order is fixed by list order."""
    L = len(original)
    out = list(original.features)
    for feats, scales in contributions:
        feats = feats.features if isinstance(feats, SkipFeatureSet) else feats
        if len(feats) != L:
            raise InputError(f"contribution has {len(feats)} layers, expected {L}")
        if scales is None:
            scales = [1.0] * L
        if len(scales) != L:
            raise InputError(f"scales has {len(scales)} entries, expected {L}")
        for l in range(L):
            out[l] = out[l] + scales[l] * feats[l]
    return SkipFeatureSet(out)


@dataclass
class StackEntry:
    """One adapter plus optional modulation grid and ablation mask.

    ``modulation`` duck-types ``factors_for(t) -> (B, L) tensor``;
    ``mask`` duck-types ``layer_scales(t, L) -> (B, L) tensor`` of {0, 1}.
    """

    adapter: SkipAdapter
    modulation: object = None
    mask: object = None

    def layer_scales(self, t: torch.Tensor, batch: int) -> list:
        L = len(self.adapter.zero_convs)
        t = t.expand(batch) if t.ndim == 0 else t
        scales = None
        if self.modulation is not None:
            scales = self.modulation.factors_for(t)  # (B, L)
        if self.mask is not None:
            m = self.mask.layer_scales(t, L)
            scales = m if scales is None else scales * m
        if scales is None:
            return [1.0] * L
        return [scales[:, l].view(-1, 1, 1, 1) for l in range(L)]


class AdapterStack(list):
    """Ordered adapters; contributions are summed in stack order."""

    def __init__(self, entries=()):
        super().__init__()
        for e in entries:
            self.append(e if isinstance(e, StackEntry) else StackEntry(e))
