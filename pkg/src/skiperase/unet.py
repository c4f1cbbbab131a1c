"""Class-conditional U-Net denoiser with individually observable skip taps.

The encoder trunk is a standalone module so an eraser adapter can hold a
trainable copy of it. Skip features are indexed deepest-first: index 0 of a
tap list is the deepest tap (l = 1), the last index is the shallowest (l = L).
"""

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

NULL_CONCEPT = ""  # reserved empty-concept label, embedding row 0


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 4)
    cond_dim: int = 32
    cond_tokens: int = 4
    time_dim: int = 64
    concepts: tuple = ()  # concept ids, excluding the reserved null concept

    def __post_init__(self):
        if len(self.channel_mults) != 3:
            raise ConfigError("exactly 3 resolution stages are supported")
        if NULL_CONCEPT in self.concepts:
            raise ConfigError("the empty concept id is reserved")
        if self.image_size % 4 != 0:
            raise ConfigError("image_size must be divisible by 4")

    @property
    def stage_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_mults)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Condition:
    """A symbolic concept plus its embedding vector (the toy prompt)."""

    concept_id: str
    embedding: torch.Tensor


@dataclass
class LatentState:
    z: torch.Tensor  # (B, C, H, W)
    t: torch.Tensor  # int64, scalar or (B,)
    seed: int | None = None


@dataclass
class SkipFeatureSet:
    """L per-tap tensors, deepest-first."""

    features: list

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().view(-1, 1) * freqs.view(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim):
        super().__init__()
        groups = min(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial positions onto condition tokens.

    The condition embedding is expanded into a small token sequence so the
    attention weights genuinely depend on the query.
    """

    def __init__(self, channels, cond_dim, n_tokens):
        super().__init__()
        self.n_tokens = n_tokens
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.to_tokens = nn.Linear(cond_dim, n_tokens * channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, cond_emb):
        b, c, h, w = x.shape
        tokens = self.to_tokens(cond_emb).view(b, self.n_tokens, c)
        q = self.q(self.norm(x)).view(b, c, h * w).transpose(1, 2)  # (b, hw, c)
        k = self.k(tokens)  # (b, n, c)
        v = self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).view(b, c, h, w)
        return x + self.out(out)


class EncoderTrunk(nn.Module):
    """Encoder side of the U-Net: stem, downsampling blocks, time MLP.

    Emits the L skip taps. Cross-attention sits at the two deepest
    resolutions; its parameters live under names containing "xattn" which is
    what the strategy masks key on.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.stage_channels
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.block_s0 = ResBlock(c0, c0, td)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.block_s1 = ResBlock(c1, c1, td)
        self.xattn_s1 = CrossAttention(c1, cfg.cond_dim, cfg.cond_tokens)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.block_s2a = ResBlock(c2, c2, td)
        self.xattn_s2a = CrossAttention(c2, cfg.cond_dim, cfg.cond_tokens)
        self.block_s2b = ResBlock(c2, c2, td)
        self.xattn_s2b = CrossAttention(c2, cfg.cond_dim, cfg.cond_tokens)

    def forward(self, z, t, cond_emb):
        """Returns (taps deepest-first, trunk output, time embedding)."""
        temb = self.time_mlp(sinusoidal_embedding(t.expand(z.shape[0]) if t.ndim == 0 else t,
                                                  self.cfg.time_dim))
        taps = []
        h = self.stem(z)
        taps.append(h)
        h = self.block_s0(h, temb)
        taps.append(h)
        h = self.down0(h)
        taps.append(h)
        h = self.xattn_s1(self.block_s1(h, temb), cond_emb)
        taps.append(h)
        h = self.down1(h)
        taps.append(h)
        h = self.xattn_s2a(self.block_s2a(h, temb), cond_emb)
        taps.append(h)
        h = self.xattn_s2b(self.block_s2b(h, temb), cond_emb)
        taps.append(h)
        return list(reversed(taps)), h, temb

    def tap_shapes(self, image_size=None) -> list:
        """(channels, height, width) per tap, deepest-first, batch omitted."""
        s = image_size or self.cfg.image_size
        c0, c1, c2 = self.cfg.stage_channels
        shallow_first = [
            (c0, s, s), (c0, s, s), (c1, s // 2, s // 2), (c1, s // 2, s // 2),
            (c2, s // 4, s // 4), (c2, s // 4, s // 4), (c2, s // 4, s // 4),
        ]
        return list(reversed(shallow_first))


class BaseUNet(nn.Module):
    """Frozen-after-training denoiser epsilon(z_t, c, t | theta).

    L = 7 skip taps. The decoder can be driven with externally supplied
    (possibly adapter-modified) skip features via ``decode``.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.stage_channels
        td = cfg.time_dim
        self.encoder = EncoderTrunk(cfg)
        # Row 0 is the reserved empty concept.
        self.cond_table = nn.Embedding(len(cfg.concepts) + 1, cfg.cond_dim)
        self._concept_index = {NULL_CONCEPT: 0}
        self._concept_index.update({c: i + 1 for i, c in enumerate(cfg.concepts)})

        self.mid = ResBlock(c2, c2, td)
        self.mid_xattn = CrossAttention(c2, cfg.cond_dim, cfg.cond_tokens)

        self.dec_s2b = ResBlock(c2 + c2, c2, td)
        self.dec_xattn_s2b = CrossAttention(c2, cfg.cond_dim, cfg.cond_tokens)
        self.dec_s2a = ResBlock(c2 + c2, c2, td)
        self.dec_xattn_s2a = CrossAttention(c2, cfg.cond_dim, cfg.cond_tokens)
        self.dec_up1 = ResBlock(c2 + c2, c2, td)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec_s1 = ResBlock(c1 + c1, c1, td)
        self.dec_xattn_s1 = CrossAttention(c1, cfg.cond_dim, cfg.cond_tokens)
        self.dec_up0 = ResBlock(c1 + c1, c1, td)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec_s0b = ResBlock(c0 + c0, c0, td)
        self.dec_s0a = ResBlock(c0 + c0, c0, td)
        self.out_norm = nn.GroupNorm(min(8, c0), c0)
        self.out_conv = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)

    @property
    def skip_layer_count(self) -> int:
        return 7

    def concept_ids(self) -> list:
        return [NULL_CONCEPT] + list(self.cfg.concepts)

    def condition(self, concept_id: str, batch: int = 1) -> Condition:
        if concept_id not in self._concept_index:
            raise ConfigError(f"unknown concept {concept_id!r}")
        idx = torch.full((batch,), self._concept_index[concept_id], dtype=torch.int64)
        return Condition(concept_id, self.cond_table(idx))

    def decode(self, trunk: torch.Tensor, skips: list, temb: torch.Tensor,
               cond_emb: torch.Tensor) -> torch.Tensor:
        """Decoder path consuming skip features (deepest-first list)."""
        it = iter(skips)
        h = self.mid_xattn(self.mid(trunk, temb), cond_emb)
        h = self.dec_xattn_s2b(self.dec_s2b(torch.cat([h, next(it)], dim=1), temb), cond_emb)
        h = self.dec_xattn_s2a(self.dec_s2a(torch.cat([h, next(it)], dim=1), temb), cond_emb)
        h = self.dec_up1(torch.cat([h, next(it)], dim=1), temb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_xattn_s1(self.dec_s1(torch.cat([h, next(it)], dim=1), temb), cond_emb)
        h = self.dec_up0(torch.cat([h, next(it)], dim=1), temb)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_s0b(torch.cat([h, next(it)], dim=1), temb)
        h = self.dec_s0a(torch.cat([h, next(it)], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))

    def forward(self, z, t, cond_emb):
        skips, trunk, temb = self.encoder(z, t, cond_emb)
        return self.decode(trunk, skips, temb, cond_emb)


def build_unet(cfg: UNetConfig, seed: int = 0) -> BaseUNet:
    """Deterministically initialized model."""
    torch.manual_seed(seed)
    return BaseUNet(cfg)
