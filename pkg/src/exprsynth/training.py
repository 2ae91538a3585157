"""Training loops: base diffusion fine-tuning, frozen-backbone AU-adapter
training, and the small CNN expression / AU classifiers used as guidance and
ensemble experts.

Stages are deterministic given the seed (single device, fixed batch order)
and write checkpoints atomically. Every stage appends one JSONL metrics
record per step.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import DenoiserConfig, UNetDenoiser
from .faceprior import NUM_AUS, NUM_CLASSES
from .manifest import DatasetManifest, read_manifest
from .prompts import tokenize
from .schedule import NoiseSchedule, add_noise_batch

CHECKPOINT_VERSION = 1

STAGES = ("base", "au_adapter", "classifier", "calibrator_head")


@dataclass
class TrainConfig:
    stage: str
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    cond_dropout: float = 0.1
    ema_decay: float = 0.999           # 0 disables weight averaging
    out_path: str = "checkpoint.pt"
    metrics_path: str | None = None
    # prerequisite checkpoints, keyed by role ("base", "adapter", ...)
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, kind: str, state: dict, config: dict | None = None,
                    extra: dict | None = None) -> None:
    """Single-file archive with a version header; write-temp-then-rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config or {},
        "state": state,
        **(extra or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    if expect_kind and payload.get("kind") != expect_kind:
        raise ValueError(f"{path} holds a {payload.get('kind')!r} checkpoint, wanted {expect_kind!r}")
    return payload


def load_denoiser(path: str | Path) -> UNetDenoiser:
    payload = load_checkpoint(path, expect_kind="denoiser")
    model = UNetDenoiser(DenoiserConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


# -- small classifiers --------------------------------------------------------

class SmallConvTrunk(nn.Module):
    """3-block CNN over 48x48 single-channel inputs; 64-dim pooled features."""

    def __init__(self):
        super().__init__()
        self.blocks = nn.Sequential(
            nn.Conv2d(1, 24, 3, padding=1), nn.GroupNorm(4, 24), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(24, 48, 3, padding=1), nn.GroupNorm(4, 48), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(48, 64, 3, padding=1), nn.GroupNorm(4, 64), nn.SiLU(),
        )

    def forward(self, x):
        h = self.blocks(x)
        return h.mean(dim=(2, 3))


class ExpressionClassifier(nn.Module):
    """Expression classifier; softmax over the 7 classes."""

    FEATURE_DIM = 64

    def __init__(self):
        super().__init__()
        self.trunk = SmallConvTrunk()
        self.head = nn.Linear(64, NUM_CLASSES)

    def features(self, x):
        return self.trunk(x)

    def forward(self, x):
        return self.head(self.trunk(x))

    def probs(self, x):
        return torch.softmax(self.forward(x), dim=-1)


class AUDetector(nn.Module):
    """Per-AU binary detector (12 sigmoid outputs)."""

    def __init__(self):
        super().__init__()
        self.trunk = SmallConvTrunk()
        self.head = nn.Linear(64, NUM_AUS)

    def forward(self, x):
        return self.head(self.trunk(x))

    def predict_bits(self, x):
        return (torch.sigmoid(self.forward(x)) > 0.5).long()


def load_classifier(path: str | Path) -> ExpressionClassifier:
    payload = load_checkpoint(path, expect_kind="classifier")
    model = ExpressionClassifier()
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def load_au_detector(path: str | Path) -> AUDetector:
    payload = load_checkpoint(path, expect_kind="au_detector")
    model = AUDetector()
    model.load_state_dict(payload["state"])
    model.eval()
    return model


# -- data ---------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Manifest contents loaded into memory as tensors."""

    images: torch.Tensor          # N x 1 x H x W in [-1, 1]
    labels: torch.Tensor          # N (final labels for synth manifests)
    au_bits: torch.Tensor         # N x 12
    tokens: torch.Tensor          # N x L

    def __len__(self):
        return self.images.shape[0]


def load_dataset(manifest: DatasetManifest | str | Path, text_len: int = 16,
                 accepted_only: bool = True) -> ArrayDataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    records = manifest.accepted() if accepted_only else manifest.records
    if not records:
        raise ValueError(f"no usable records in {manifest.path}")
    images = torch.from_numpy(manifest.load_images(records)).unsqueeze(1)
    labels = torch.tensor(
        [r.get("label_final", r.get("label")) for r in records], dtype=torch.long
    )
    au_bits = torch.tensor([r["au_bits"] for r in records], dtype=torch.float32)
    texts = [r.get("caption", r.get("prompt", "")) for r in records]
    tokens = torch.from_numpy(np.stack([tokenize(t, text_len) for t in texts]))
    return ArrayDataset(images, labels, au_bits, tokens)


class MetricsLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record):
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# -- losses --------------------------------------------------------------------

def diffusion_loss(model, x0, text_emb, au_tokens, t, eps, sched: NoiseSchedule,
                   lambda_au: float | None = None) -> torch.Tensor:
    """Mean squared noise-prediction error over batch and pixels."""
    xt = add_noise_batch(x0, t, eps, sched)
    eps_pred, _ = model(xt, t, text_emb, au_tokens, lambda_au=lambda_au)
    loss = F.mse_loss(eps_pred, eps)
    if not torch.isfinite(loss):
        raise FloatingPointError("diffusion loss diverged (non-finite)")
    return loss


# -- stage loops ----------------------------------------------------------------

def _batch_indices(n: int, batch_size: int, steps: int, gen: torch.Generator):
    """Seeded stream of minibatch index tensors (reshuffled each epoch).

    A batch size above the dataset size is clamped to one full-dataset batch
    per epoch rather than yielding no batches at all."""
    batch_size = min(batch_size, n)
    produced = 0
    while produced < steps:
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n - batch_size + 1, batch_size):
            if produced >= steps:
                return
            yield perm[start:start + batch_size]
            produced += 1


def _embed_text(model: UNetDenoiser, tokens: torch.Tensor, drop_mask: torch.Tensor | None):
    emb = model.text_encoder.encode_tokens(tokens)
    if drop_mask is not None and drop_mask.any():
        null = model.text_encoder.null_embedding
        emb = torch.where(drop_mask[:, None, None], null.expand_as(emb), emb)
    return emb


def train_diffusion(cfg: TrainConfig, data: ArrayDataset, sched: NoiseSchedule,
                    model_cfg: DenoiserConfig | None = None) -> Path:
    """Base stage (all backbone parameters) or AU-adapter stage (adapter
    parameters only, backbone frozen bit-for-bit)."""
    torch.manual_seed(cfg.seed)
    if cfg.stage == "base":
        model = UNetDenoiser(model_cfg or DenoiserConfig())
        params = model.backbone_parameters()
        use_au = False
    elif cfg.stage == "au_adapter":
        base_path = cfg.inputs.get("base")
        if not base_path or not Path(base_path).exists():
            raise FileNotFoundError("au_adapter stage requires the base checkpoint")
        model = load_denoiser(base_path)
        model.train()
        params = model.adapter_parameters()
        frozen = {id(p) for p in params}
        for p in model.parameters():
            if id(p) not in frozen:
                p.requires_grad_(False)
        use_au = True
    else:
        raise ValueError(f"train_diffusion cannot run stage {cfg.stage!r}")

    opt = torch.optim.Adam(params, lr=cfg.lr)
    log = MetricsLog(cfg.metrics_path)
    gen = torch.Generator().manual_seed(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    T = sched.total_steps

    # Exponential moving average over the trained parameters only; frozen
    # parameters are left byte-identical in the saved checkpoint.
    trained_ids = {id(p) for p in params}
    ema_state = {}
    if cfg.ema_decay > 0:
        ema_state = {name: p.detach().clone()
                     for name, p in model.named_parameters() if id(p) in trained_ids}

    for step, idx in enumerate(_batch_indices(len(data), cfg.batch_size, cfg.steps, gen)):
        x0 = data.images[idx]
        tokens = data.tokens[idx]
        t = torch.randint(1, T + 1, (len(idx),), generator=noise_gen)
        eps = torch.randn(x0.shape, generator=noise_gen)
        # Dropping the caption forces the model to explain the image from the
        # remaining conditioning; in the adapter stage that is what makes the
        # AU tokens informative on their own (captions already paraphrase the
        # AU configuration, so without dropout the adapter has no incentive).
        drop = None
        if cfg.cond_dropout > 0:
            drop = torch.rand(len(idx), generator=noise_gen) < cfg.cond_dropout
        text_emb = _embed_text(model, tokens, drop)
        au_tokens = model.au_adapter(data.au_bits[idx]) if use_au else None
        loss = diffusion_loss(model, x0, text_emb, au_tokens, t, eps, sched,
                              lambda_au=None if use_au else 0.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if ema_state:
            # Ramped decay keeps the average from being dominated by the
            # random initialization during the first few hundred steps.
            decay = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
            named = dict(model.named_parameters())
            for name, shadow in ema_state.items():
                shadow.mul_(decay).add_(named[name].detach(), alpha=1.0 - decay)
        log.write(step=step, stage=cfg.stage, loss=float(loss.detach()), lr=cfg.lr, seed=cfg.seed)

    model.eval()
    if ema_state:
        with torch.no_grad():
            named = dict(model.named_parameters())
            for name, shadow in ema_state.items():
                named[name].copy_(shadow)
    save_checkpoint(cfg.out_path, "denoiser", model.state_dict(),
                    config=model.cfg.to_dict(), extra={"stage": cfg.stage, "seed": cfg.seed})
    return Path(cfg.out_path)


def train_expression_classifier(cfg: TrainConfig, data: ArrayDataset) -> Path:
    torch.manual_seed(cfg.seed)
    model = ExpressionClassifier()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log = MetricsLog(cfg.metrics_path)
    gen = torch.Generator().manual_seed(cfg.seed)
    for step, idx in enumerate(_batch_indices(len(data), cfg.batch_size, cfg.steps, gen)):
        logits = model(data.images[idx])
        loss = F.cross_entropy(logits, data.labels[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError("classifier loss diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.write(step=step, stage="classifier", loss=float(loss.detach()), lr=cfg.lr, seed=cfg.seed)
    model.eval()
    save_checkpoint(cfg.out_path, "classifier", model.state_dict(), extra={"seed": cfg.seed})
    return Path(cfg.out_path)


def train_au_detector(cfg: TrainConfig, data: ArrayDataset) -> Path:
    torch.manual_seed(cfg.seed)
    model = AUDetector()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log = MetricsLog(cfg.metrics_path)
    gen = torch.Generator().manual_seed(cfg.seed)
    for step, idx in enumerate(_batch_indices(len(data), cfg.batch_size, cfg.steps, gen)):
        logits = model(data.images[idx])
        loss = F.binary_cross_entropy_with_logits(logits, data.au_bits[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError("AU detector loss diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.write(step=step, stage="au_detector", loss=float(loss.detach()), lr=cfg.lr, seed=cfg.seed)
    model.eval()
    save_checkpoint(cfg.out_path, "au_detector", model.state_dict(), extra={"seed": cfg.seed})
    return Path(cfg.out_path)


def classifier_accuracy(model: ExpressionClassifier, data: ArrayDataset) -> float:
    with torch.no_grad():
        pred = model(data.images).argmax(dim=-1)
    return float((pred == data.labels).float().mean())


def au_detector_accuracy(model: AUDetector, data: ArrayDataset) -> float:
    """Mean per-AU binary accuracy."""
    with torch.no_grad():
        pred = model.predict_bits(data.images)
    return float((pred == data.au_bits.long()).float().mean())


def train_stage(cfg: TrainConfig, manifest_path: str | Path,
                sched: NoiseSchedule | None = None,
                model_cfg: DenoiserConfig | None = None) -> Path:
    """Dispatch one training stage against a dataset manifest."""
    text_len = (model_cfg or DenoiserConfig()).text_len
    data = load_dataset(manifest_path, text_len=text_len)
    if cfg.stage in ("base", "au_adapter"):
        if sched is None:
            raise ValueError("diffusion stages need a noise schedule")
        return train_diffusion(cfg, data, sched, model_cfg=model_cfg)
    if cfg.stage == "classifier":
        return train_expression_classifier(cfg, data)
    if cfg.stage == "calibrator_head":
        from .calibrator import train_fusion_head  # avoids an import cycle

        return train_fusion_head(cfg, data, sched)
    raise ValueError(f"unhandled stage {cfg.stage!r}")
