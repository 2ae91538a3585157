"""Metrics and downstream harnesses.

Expression / AU accuracy of a manifest against the toy oracles, Fréchet
distance between feature distributions (reference-CNN penultimate features
stand in for Inception embeddings at toy scale), supervised and linear-probe
downstream training, and the synthetic-volume scaling sweep.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .faceprior import NUM_AUS, NUM_CLASSES
from .manifest import DatasetManifest, read_manifest
from .training import (ArrayDataset, AUDetector, ExpressionClassifier, TrainConfig,
                       _batch_indices, load_checkpoint, load_classifier, load_dataset)

log = logging.getLogger(__name__)


# -- Fréchet distance ----------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    """Mean and covariance of a feature distribution (sigma symmetrized)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError("sigma must be square and match mu")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise ValueError("non-finite Gaussian stats")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", (sigma + sigma.T) / 2.0)

    @staticmethod
    def fit(features: np.ndarray) -> "GaussianStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need a 2-D feature matrix with at least 2 rows")
        return GaussianStats(feats.mean(axis=0), np.cov(feats, rowvar=False))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped at zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T

def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    if a.mu.shape != b.mu.shape:
        raise ValueError("dimension mismatch between Gaussian stats")
    diff = a.mu - b.mu
    sqrt_a = _psd_sqrt(a.sigma)
    inner = sqrt_a @ b.sigma @ sqrt_a       # similar to S_a S_b, symmetric
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fd = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def manifest_features(manifest: DatasetManifest | str | Path,
                      classifier: ExpressionClassifier,
                      batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer features of every accepted image."""
    data = load_dataset(manifest)
    outs = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            outs.append(classifier.features(data.images[start:start + batch_size]))
    return torch.cat(outs).numpy()


def manifest_stats(manifest, classifier) -> GaussianStats:
    return GaussianStats.fit(manifest_features(manifest, classifier))


# -- accuracy against the oracles ------------------------------------------------

def fer_accuracy(manifest: DatasetManifest | str | Path,
                 oracle: ExpressionClassifier) -> float:
    """Fraction of accepted records whose oracle argmax matches the final
    label (for raw corpora, the stored ground truth)."""
    data = load_dataset(manifest, accepted_only=True)
    with torch.no_grad():
        pred = oracle(data.images).argmax(dim=-1)
    return float((pred == data.labels).float().mean())


def fau_accuracy(manifest: DatasetManifest | str | Path, au_oracle: AUDetector) -> float:
    """Mean over the 12 AUs of per-AU agreement with the record AU bits."""
    data = load_dataset(manifest, accepted_only=True)
    with torch.no_grad():
        pred = au_oracle.predict_bits(data.images)
    per_au = (pred == data.au_bits.long()).float().mean(dim=0)
    return float(per_au.mean())


# -- downstream training -----------------------------------------------------------

def _merge_datasets(manifests: list) -> ArrayDataset:
    parts = [load_dataset(m, accepted_only=True) for m in manifests]
    return ArrayDataset(
        torch.cat([p.images for p in parts]),
        torch.cat([p.labels for p in parts]),
        torch.cat([p.au_bits for p in parts]),
        torch.cat([p.tokens for p in parts]),
    )


def downstream_train_eval(
    train_manifests: list,
    test_manifest,
    mode: str = "supervised",
    seed: int = 0,
    steps: int = 600,
    batch_size: int = 64,
    lr: float = 1e-3,
    encoder_ckpt: str | Path | None = None,
) -> float:
    """Train the reference CNN (supervised) or a linear head over a frozen
    encoder (linear_probe) on accepted records; report test accuracy."""
    if mode not in ("supervised", "linear_probe"):
        raise ValueError(f"unknown mode {mode!r}")
    train = _merge_datasets(train_manifests)
    test = load_dataset(test_manifest, accepted_only=True)
    present = set(train.labels.tolist())
    missing = sorted(set(range(NUM_CLASSES)) - present)
    if missing:
        log.warning("classes absent from training set: %s", missing)

    torch.manual_seed(seed)
    model = ExpressionClassifier()
    if mode == "linear_probe":
        if encoder_ckpt is None:
            raise ValueError("linear_probe needs a frozen encoder checkpoint")
        model.load_state_dict(load_checkpoint(encoder_ckpt, expect_kind="classifier")["state"])
        for p in model.trunk.parameters():
            p.requires_grad_(False)
        model.head.reset_parameters()
        params = model.head.parameters()
    else:
        params = model.parameters()

    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    batch = min(batch_size, len(train))
    for idx in _batch_indices(len(train), batch, steps, gen):
        loss = F.cross_entropy(model(train.images[idx]), train.labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        pred = model(test.images).argmax(dim=-1)
    return float((pred == test.labels).float().mean())


def scaling_sweep(
    synthetic_manifest,
    test_manifest,
    sizes: list,
    seeds: list,
    **train_kwargs,
) -> dict:
    """Synthetic-only downstream accuracy over nested prefixes of one run.

    Returns {size: {seed: accuracy}}; prefixes keep the per-record seed
    derivation intact, so each size is itself a valid (smaller) run.
    """
    manifest = synthetic_manifest
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    results: dict = {}
    for size in sizes:
        prefix = DatasetManifest(manifest.path, manifest.header, manifest.records[:size])
        results[size] = {
            seed: downstream_train_eval([prefix], test_manifest, "supervised", seed,
                                        **train_kwargs)
            for seed in seeds
        }
    return results


# -- result emission ------------------------------------------------------------

def write_results(path: str | Path, rows: list) -> None:
    """Line-delimited records plus a small aligned text table beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    table = path.with_suffix(".txt")
    if rows:
        keys = sorted({k for row in rows for k in row})
        widths = {k: max(len(k), *(len(_fmt(row.get(k))) for row in rows)) for k in keys}
        lines = ["  ".join(k.ljust(widths[k]) for k in keys)]
        for row in rows:
            lines.append("  ".join(_fmt(row.get(k)).ljust(widths[k]) for k in keys))
        table.write_text("\n".join(lines) + "\n")


def write_scaling_csv(path: str | Path, results: dict) -> None:
    path = Path(path)
    seeds = sorted(next(iter(results.values())).keys()) if results else []
    lines = ["size," + ",".join(f"seed{s}" for s in seeds)]
    for size in sorted(results):
        lines.append(str(size) + "," + ",".join(f"{results[size][s]:.4f}" for s in seeds))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
