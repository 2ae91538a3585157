"""Diffusion-feature label calibrator.

An image is inverted to t=1 (noise is negligible there by schedule
construction), pushed once through the frozen denoiser with capture on, and
the per-level feature maps plus cross-attention maps are regrouped by
resolution. A dual-branch head fuses the two streams with bi-directional
cross-attention per resolution and emits a 7-class probability vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import AUCondition, DenoiserConfig, TextCondition, UNetDenoiser
from .faceprior import NUM_CLASSES
from .schedule import NoiseSchedule, Sample, invert
from .training import (TrainConfig, MetricsLog, load_checkpoint, save_checkpoint,
                       load_denoiser, ArrayDataset, _batch_indices)

# Noise seed for the t=1 inversion; fixed so annotation is reproducible.
INVERSION_SEED = 0


@dataclass
class DiffusionFeatures:
    """Multi-scale feature groups and attention maps from one forward pass.

    feature_groups[g] holds every captured map at resolution level g;
    attention holds the raw (level, HxWxL) maps; attention_groups regroups
    them by level and attention_mean[g] is the elementwise group mean.
    """

    feature_groups: list            # level -> list of C x H x W tensors
    attention: list                 # list of (level, H x W x L)
    attention_groups: list          # level -> list of H x W x L tensors
    attention_mean: list            # level -> H x W x L tensor

    def counts(self) -> tuple[int, int]:
        return (len(self.feature_groups), len(self.attention))


def regroup(capture: dict, levels: int, image_size: int) -> DiffusionFeatures:
    """Partition captured maps by resolution level (each map lands in
    exactly one group; group sizes sum to the total count)."""
    feature_groups: list = [[] for _ in range(levels)]
    attention: list = []
    attention_groups: list = [[] for _ in range(levels)]
    for level, feat in capture["features"]:
        feature_groups[level].append(feat)
    for level, attn in capture["attention"]:
        side = image_size // (2 ** level)
        shaped = attn.reshape(attn.shape[0], side, side, attn.shape[-1])
        attention.append((level, shaped))
        attention_groups[level].append(shaped)
    attention_mean = [torch.stack(group).mean(dim=0) for group in attention_groups]
    return DiffusionFeatures(feature_groups, attention, attention_groups, attention_mean)


def extract_batch(
    images: torch.Tensor,
    text_emb: torch.Tensor,
    au_tokens: torch.Tensor | None,
    model: UNetDenoiser,
    sched: NoiseSchedule,
    seed: int = INVERSION_SEED,
) -> DiffusionFeatures:
    """Invert a batch to t=1 and capture features in one forward pass."""
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    ab = sched.ab(1)
    x1 = ab ** 0.5 * images + (1.0 - ab) ** 0.5 * eps
    with torch.no_grad():
        _, capture = model(x1, 1, text_emb, au_tokens, capture=True)
    if capture is None:
        raise RuntimeError("denoiser returned no capture")
    return regroup(capture, model.cfg.levels, model.cfg.image_size)


def extract(
    image: Sample,
    text: TextCondition,
    au: AUCondition | None,
    model: UNetDenoiser,
    sched: NoiseSchedule,
    seed: int = INVERSION_SEED,
) -> DiffusionFeatures:
    """Single-image feature extraction (t=1 inversion, capture forward)."""
    if image.t != 0:
        raise ValueError("extract expects a clean image")
    au_tokens = au.au_tokens[None] if au is not None else None
    return extract_batch(image.x[None], text.embeddings[None], au_tokens, model, sched, seed)


# -- fusion head ---------------------------------------------------------------

@dataclass(frozen=True)
class FusionHeadConfig:
    feature_channels: tuple         # per level, channels of the concatenated F group
    attention_channels: int         # text length (token dim becomes channels)
    levels: int
    width: int = 32
    max_side: int = 12              # pool finer maps down before cross-attention

    @staticmethod
    def for_denoiser(cfg: DenoiserConfig) -> "FusionHeadConfig":
        per_level = tuple(2 * cfg.blocks_per_level * c for c in cfg.channels)
        return FusionHeadConfig(per_level, cfg.text_len, cfg.levels)

    def to_dict(self) -> dict:
        return {
            "feature_channels": list(self.feature_channels),
            "attention_channels": self.attention_channels,
            "levels": self.levels,
            "width": self.width,
            "max_side": self.max_side,
        }

    @staticmethod
    def from_dict(d: dict) -> "FusionHeadConfig":
        d = dict(d)
        d["feature_channels"] = tuple(d["feature_channels"])
        return FusionHeadConfig(**d)


class _ResidualConv(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = nn.GroupNorm(4, ch)
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.silu(self.norm(x)))


class _BiCrossAttention(nn.Module):
    """Two standard cross-attention passes with swapped query/context,
    applied residually to both streams."""

    def __init__(self, width):
        super().__init__()
        self.q_f = nn.Linear(width, width, bias=False)
        self.q_a = nn.Linear(width, width, bias=False)
        self.kv_f = nn.Linear(width, 2 * width, bias=False)
        self.kv_a = nn.Linear(width, 2 * width, bias=False)
        self.scale = width ** -0.5

    @staticmethod
    def _attend(q, kv, scale):
        k, v = kv.chunk(2, dim=-1)
        return torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1) @ v

    def forward(self, f, a):
        # f, a: B x HW x width
        f_out = f + self._attend(self.q_f(f), self.kv_a(a), self.scale)
        a_out = a + self._attend(self.q_a(a), self.kv_f(f), self.scale)
        return f_out, a_out


class FusionHead(nn.Module):
    """Dual-branch fusion of feature maps and averaged attention maps."""

    def __init__(self, cfg: FusionHeadConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.f_in = nn.ModuleList(nn.Conv2d(c, w, 1) for c in cfg.feature_channels)
        self.a_in = nn.ModuleList(nn.Conv2d(cfg.attention_channels, w, 1) for _ in range(cfg.levels))
        self.f_res = nn.ModuleList(_ResidualConv(w) for _ in range(cfg.levels))
        self.a_res = nn.ModuleList(_ResidualConv(w) for _ in range(cfg.levels))
        self.cross = nn.ModuleList(_BiCrossAttention(w) for _ in range(cfg.levels))
        self.classifier = nn.Linear(2 * cfg.levels * w, NUM_CLASSES)

    def forward(self, f_maps: list, a_maps: list) -> torch.Tensor:
        """f_maps[g]: B x C_g x H x W; a_maps[g]: B x L x H x W -> logits."""
        pooled = []
        for g in range(self.cfg.levels):
            f = self.f_res[g](self.f_in[g](f_maps[g]))
            a = self.a_res[g](self.a_in[g](a_maps[g]))
            side = min(f.shape[-1], self.cfg.max_side)
            if f.shape[-1] > side:
                f = F.adaptive_avg_pool2d(f, side)
                a = F.adaptive_avg_pool2d(a, side)
            f_seq = f.flatten(2).transpose(1, 2)
            a_seq = a.flatten(2).transpose(1, 2)
            f_seq, a_seq = self.cross[g](f_seq, a_seq)
            pooled.append(f_seq.mean(dim=1))
            pooled.append(a_seq.mean(dim=1))
        return self.classifier(torch.cat(pooled, dim=-1))

    def probs(self, f_maps, a_maps):
        return torch.softmax(self.forward(f_maps, a_maps), dim=-1)


def head_inputs(features: DiffusionFeatures) -> tuple[list, list]:
    """Stack one sample's groups into the head's batched input layout."""
    f_maps = [torch.cat([m for m in group], dim=1) for group in features.feature_groups]
    a_maps = [mean.permute(0, 3, 1, 2) for mean in features.attention_mean]
    return f_maps, a_maps


def fuse(features: DiffusionFeatures, head: FusionHead) -> torch.Tensor:
    """Probability vector over the 7 classes for one extracted sample."""
    f_maps, a_maps = head_inputs(features)
    with torch.no_grad():
        return head.probs(f_maps, a_maps)[0]


def annotate(
    image: Sample,
    text: TextCondition,
    au: AUCondition | None,
    model: UNetDenoiser,
    head: FusionHead,
    sched: NoiseSchedule,
    seed: int = INVERSION_SEED,
) -> tuple[int, torch.Tensor]:
    """Extract-then-fuse; the label is the argmax (ties break low)."""
    probs = fuse(extract(image, text, au, model, sched, seed), head)
    return int(torch.argmax(probs)), probs


def annotate_batch(
    images: torch.Tensor,
    text_emb: torch.Tensor,
    au_tokens: torch.Tensor | None,
    model: UNetDenoiser,
    head: FusionHead,
    sched: NoiseSchedule,
    seed: int = INVERSION_SEED,
) -> torch.Tensor:
    feats = extract_batch(images, text_emb, au_tokens, model, sched, seed)
    f_maps, a_maps = head_inputs(feats)
    with torch.no_grad():
        return head.probs(f_maps, a_maps)


def save_fusion_head(path, head: FusionHead, extra: dict | None = None) -> None:
    save_checkpoint(path, "fusion_head", head.state_dict(), config=head.cfg.to_dict(), extra=extra)


def load_fusion_head(path) -> FusionHead:
    payload = load_checkpoint(path, expect_kind="fusion_head")
    head = FusionHead(FusionHeadConfig.from_dict(payload["config"]))
    head.load_state_dict(payload["state"])
    head.eval()
    return head


def train_fusion_head(cfg: TrainConfig, data: ArrayDataset, sched: NoiseSchedule) -> Path:
    """Train only head parameters; the denoiser stays frozen throughout."""
    model_path = cfg.inputs.get("denoiser")
    if not model_path or not Path(model_path).exists():
        raise FileNotFoundError("calibrator_head stage requires the adapter-trained denoiser")
    model = load_denoiser(model_path)
    for p in model.parameters():
        p.requires_grad_(False)

    torch.manual_seed(cfg.seed)
    head = FusionHead(FusionHeadConfig.for_denoiser(model.cfg))
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    log = MetricsLog(cfg.metrics_path)
    gen = torch.Generator().manual_seed(cfg.seed)

    for step, idx in enumerate(_batch_indices(len(data), cfg.batch_size, cfg.steps, gen)):
        with torch.no_grad():
            text_emb = model.text_encoder.encode_tokens(data.tokens[idx])
            au_tokens = model.au_adapter(data.au_bits[idx])
        feats = extract_batch(data.images[idx], text_emb, au_tokens, model, sched)
        f_maps, a_maps = head_inputs(feats)
        loss = F.cross_entropy(head(f_maps, a_maps), data.labels[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError("fusion head loss diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.write(step=step, stage="calibrator_head", loss=float(loss.detach()), lr=cfg.lr, seed=cfg.seed)

    head.eval()
    save_fusion_head(cfg.out_path, head, extra={"seed": cfg.seed, "denoiser": str(model_path)})
    return Path(cfg.out_path)
