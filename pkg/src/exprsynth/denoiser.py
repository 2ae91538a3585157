"""The trainable noise-estimation network.

A small U-shaped convolutional network over 48x48 single-channel images with
four resolution levels. Every level carries two residual units, each
followed by a text cross-attention block with a decoupled AU branch (the AU
adapter path): queries are shared, key/value projections are separate per
branch, and the AU value projection starts at zero so an untrained adapter
is an exact no-op. With two attended units per level on both the down and
up paths, the network holds 16 text cross-attention blocks whose weight
maps, together with the per-level feature maps, can be captured in a single
forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .faceprior import NUM_AUS
from .prompts import VOCAB_SIZE, tokenize


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 48
    channels: tuple = (12, 24, 36, 48)
    blocks_per_level: int = 2
    cond_dim: int = 32
    text_len: int = 16
    au_tokens: int = 4
    au_hidden_mult: int = 4
    lambda_au: float = 1.0
    time_dim: int = 64
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("need at least 2 resolution levels")
        if any(c % 4 for c in self.channels):
            raise ValueError("channel counts must be divisible by 4 (group norm)")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def resolutions(self) -> tuple:
        return tuple(self.image_size // (2 ** l) for l in range(self.levels))

    @property
    def attention_blocks(self) -> int:
        # Down and up paths both attend at every level.
        return 2 * self.levels * self.blocks_per_level

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": list(self.channels),
            "blocks_per_level": self.blocks_per_level,
            "cond_dim": self.cond_dim,
            "text_len": self.text_len,
            "au_tokens": self.au_tokens,
            "au_hidden_mult": self.au_hidden_mult,
            "lambda_au": self.lambda_au,
            "time_dim": self.time_dim,
            "vocab_size": self.vocab_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return DenoiserConfig(**d)


@dataclass
class TextCondition:
    """Token ids plus their embedding matrix; guidance mutates only the
    embeddings (by replacement, never in place)."""

    tokens: np.ndarray
    embeddings: torch.Tensor

    def clone(self) -> "TextCondition":
        return TextCondition(self.tokens.copy(), self.embeddings.clone())


@dataclass
class AUCondition:
    au_bits: np.ndarray
    au_tokens: torch.Tensor


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal code for integer timesteps (or positions)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TextEncoder(nn.Module):
    """Token-embedding table plus fixed sinusoidal position codes.

    Also owns the learned null embedding used for condition dropout and
    unconditional sampling.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.table = nn.Embedding(cfg.vocab_size, cfg.cond_dim)
        pos = sinusoidal_embedding(torch.arange(cfg.text_len), cfg.cond_dim)
        self.register_buffer("pos", pos)
        self.null_embedding = nn.Parameter(torch.zeros(cfg.text_len, cfg.cond_dim))

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.table(tokens) + self.pos

    def encode(self, text: str) -> TextCondition:
        tokens = tokenize(text, self.cfg.text_len)
        with torch.no_grad():
            emb = self.encode_tokens(torch.from_numpy(tokens)[None])[0]
        return TextCondition(tokens, emb)

    def null_condition(self) -> TextCondition:
        tokens = np.zeros(self.cfg.text_len, dtype=np.int64)
        return TextCondition(tokens, self.null_embedding.detach().clone())


class AUAdapter(nn.Module):
    """Two-layer perceptron from the K-bit AU vector to M condition tokens."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.cond_dim
        hidden = cfg.au_hidden_mult * d
        self.net = nn.Sequential(
            nn.Linear(NUM_AUS, hidden),
            nn.SiLU(),
            nn.Linear(hidden, cfg.au_tokens * d),
        )
        self.cfg = cfg

    def forward(self, au_bits: torch.Tensor) -> torch.Tensor:
        if au_bits.shape[-1] != NUM_AUS:
            raise ValueError(f"expected {NUM_AUS} AU bits, got {au_bits.shape[-1]}")
        if not torch.isin(au_bits, torch.tensor([0.0, 1.0])).all():
            raise ValueError("au_bits must be binary")
        out = self.net(au_bits.to(self.net[0].weight.dtype))
        return out.view(*au_bits.shape[:-1], self.cfg.au_tokens, self.cfg.cond_dim)

    def embed(self, au_bits: np.ndarray) -> AUCondition:
        with torch.no_grad():
            tokens = self.forward(torch.from_numpy(np.asarray(au_bits)).float()[None])[0]
        return AUCondition(np.asarray(au_bits), tokens)


class DecoupledCrossAttention(nn.Module):
    """Text cross-attention with a parallel AU branch sharing the queries.

    output = hidden + to_out(Attn_text(h, text) + lambda_au * Attn_au(h, au)).
    The AU value projection is zero-initialized so a fresh AU branch leaves
    the text path untouched.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(4, channels)
        self.to_q = nn.Linear(channels, cond_dim, bias=False)
        self.to_k_text = nn.Linear(cond_dim, cond_dim, bias=False)
        self.to_v_text = nn.Linear(cond_dim, cond_dim, bias=False)
        self.to_k_au = nn.Linear(cond_dim, cond_dim, bias=False)
        self.to_v_au = nn.Linear(cond_dim, cond_dim, bias=False)
        nn.init.zeros_(self.to_v_au.weight)
        self.to_out = nn.Linear(cond_dim, channels)
        self.scale = cond_dim ** -0.5
        self.last_attention: torch.Tensor | None = None

    def forward(self, hidden, text_emb, au_tokens=None, lambda_au=1.0, capture=False):
        b, c, h, w = hidden.shape
        if text_emb.shape[-1] != self.to_k_text.in_features:
            raise ValueError("condition width mismatch")
        x = self.norm(hidden).flatten(2).transpose(1, 2)  # B,HW,C
        q = self.to_q(x)
        attn_t = torch.softmax(q @ self.to_k_text(text_emb).transpose(1, 2) * self.scale, dim=-1)
        out = attn_t @ self.to_v_text(text_emb)
        if au_tokens is not None and lambda_au != 0.0:
            attn_a = torch.softmax(q @ self.to_k_au(au_tokens).transpose(1, 2) * self.scale, dim=-1)
            out = out + lambda_au * (attn_a @ self.to_v_au(au_tokens))
        self.last_attention = attn_t.detach() if capture else None
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return hidden + out


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(4, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttendedUnit(nn.Module):
    """ResBlock followed by a decoupled cross-attention block."""

    def __init__(self, in_ch, out_ch, cfg: DenoiserConfig):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.time_dim)
        self.attn = DecoupledCrossAttention(out_ch, cfg.cond_dim)

    def forward(self, x, t_emb, text_emb, au_tokens, lambda_au, capture):
        h = self.res(x, t_emb)
        return self.attn(h, text_emb, au_tokens, lambda_au, capture)


class UNetDenoiser(nn.Module):
    """Noise estimator with capture taps for features and attention maps."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        self.text_encoder = TextEncoder(cfg)
        self.au_adapter = AUAdapter(cfg)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.stem = nn.Conv2d(1, chs[0], 3, padding=1)

        self.down_units = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for l, ch in enumerate(chs):
            # stem and downsamplers already project to this level's width
            units = nn.ModuleList(
                AttendedUnit(ch, ch, cfg) for _ in range(cfg.blocks_per_level)
            )
            self.down_units.append(units)
            if l < len(chs) - 1:
                self.downsamplers.append(nn.Conv2d(ch, chs[l + 1], 3, stride=2, padding=1))

        self.mid = ResBlock(chs[-1], chs[-1], cfg.time_dim)

        self.up_units = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for l in reversed(range(len(chs))):
            ch = chs[l]
            units = nn.ModuleList()
            for b in range(cfg.blocks_per_level):
                in_ch = 2 * ch if b == 0 else ch  # skip concat feeds the first unit
                units.append(AttendedUnit(in_ch, ch, cfg))
            self.up_units.append(units)
            if l > 0:
                self.upsamplers.append(
                    nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                  nn.Conv2d(ch, chs[l - 1], 3, padding=1))
                )
        self.out_norm = nn.GroupNorm(4, chs[0])
        self.out_conv = nn.Conv2d(chs[0], 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    # -- parameter groups --------------------------------------------------

    def adapter_parameters(self):
        """The AU adapter MLP plus every AU key/value projection."""
        params = list(self.au_adapter.parameters())
        for mod in self.modules():
            if isinstance(mod, DecoupledCrossAttention):
                params += [mod.to_k_au.weight, mod.to_v_au.weight]
        return params

    def backbone_parameters(self):
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter_ids]

    # -- forward -------------------------------------------------------------

    def forward(self, x, t, text_emb, au_tokens=None, lambda_au=None, capture=False):
        """Predict the injected noise; optionally capture per-level features
        and text attention maps, each tagged with its resolution level.

        Returns (eps_pred, capture_dict | None) where capture_dict has
        "features": list of (level, tensor BxCxHxW) and "attention": list of
        (level, tensor BxHWxL).
        """
        if x.shape[-1] != self.cfg.image_size or x.shape[1] != 1:
            raise ValueError(f"input shape {tuple(x.shape)} does not match config")
        if lambda_au is None:
            lambda_au = self.cfg.lambda_au
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long)
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_dim).to(x.dtype))

        feats: list = []
        attns: list = []

        def run_units(units, h, level):
            for unit in units:
                h = unit(h, t_emb, text_emb, au_tokens, lambda_au, capture)
                if capture:
                    feats.append((level, h))
                    attns.append((level, unit.attn.last_attention))
            return h

        h = self.stem(x)
        skips = []
        n_levels = self.cfg.levels
        for l in range(n_levels):
            h = run_units(self.down_units[l], h, l)
            skips.append(h)
            if l < n_levels - 1:
                h = self.downsamplers[l](h)

        h = self.mid(h, t_emb)

        for i, l in enumerate(reversed(range(n_levels))):
            h = torch.cat([h, skips[l]], dim=1)
            h = run_units(self.up_units[i], h, l)
            if l > 0:
                h = self.upsamplers[i](h)

        eps = self.out_conv(F.silu(self.out_norm(h)))
        if capture:
            return eps, {"features": feats, "attention": attns}
        return eps, None
