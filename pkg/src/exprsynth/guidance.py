"""Classifier-driven semantic guidance on text embeddings.

Generation starts from an inverted real face (layout initialization) and
denoises deterministically. In the late portion of the trajectory, each step
estimates the clean image in one shot, scores it with a frozen expression
classifier, and moves the text embedding matrix one normalized gradient step
so subsequent denoising is conditioned on the nudged embedding.

Note on sign: the published update rule adds the gradient of the
classification loss, which ascends a loss it aims to minimize. The default
here is descent; ``guidance_sign=+1`` restores the ascent form.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .denoiser import AUCondition, TextCondition, UNetDenoiser
from .faceprior import NUM_CLASSES
from .schedule import NoiseSchedule, Sample, ddim_step_x, invert, predict_x0_x

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-12
PROB_FLOOR = 1e-12


def validate_label(y: int) -> int:
    if not (0 <= int(y) < NUM_CLASSES):
        raise ValueError(f"expression label must be in [0, {NUM_CLASSES}), got {y}")
    return int(y)


@dataclass
class GuidanceConfig:
    """Step size, activation window, frozen classifier, and target class."""

    classifier: torch.nn.Module | None = None
    target: int = 0
    lambda_g: float | None = None          # default scales with embedding size
    start_fraction: float = 0.5
    guidance_sign: int = -1                # -1 descends the loss, +1 ascends

    def __post_init__(self):
        if not (0.0 <= self.start_fraction < 1.0):
            raise ValueError("start_fraction must be in [0, 1)")
        if self.lambda_g is not None and self.lambda_g < 0:
            raise ValueError("lambda_g must be >= 0")
        if self.guidance_sign not in (-1, 1):
            raise ValueError("guidance_sign must be -1 or +1")
        validate_label(self.target)

    def resolved_lambda(self, text_len: int, cond_dim: int) -> float:
        if self.lambda_g is not None:
            return self.lambda_g
        return 0.05 * (text_len * cond_dim) ** 0.5


@contextmanager
def frozen(model: torch.nn.Module):
    """Disable parameter grads for the duration (restored afterwards)."""
    states = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, s in zip(model.parameters(), states):
            p.requires_grad_(s)


def guidance_loss(x0_hat: Sample | torch.Tensor, y: int, classifier: torch.nn.Module) -> torch.Tensor:
    """Cross-entropy of the classifier's probability at the target class."""
    x = x0_hat.x if isinstance(x0_hat, Sample) else x0_hat
    if x.dim() == 3:
        x = x[None]
    y = validate_label(y)
    probs = torch.softmax(classifier(x), dim=-1)
    return -torch.log(probs[:, y].clamp_min(PROB_FLOOR)).squeeze(0)


def _batch_guidance_loss(x0_hat: torch.Tensor, targets: torch.Tensor,
                         classifier: torch.nn.Module) -> torch.Tensor:
    probs = torch.softmax(classifier(x0_hat), dim=-1)
    picked = probs.gather(1, targets[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def update_text_embedding(text: TextCondition, grad: torch.Tensor, lambda_g: float) -> TextCondition:
    """One normalized-gradient step; returns a new condition, input untouched.

    The direction is grad / ||grad||_2 with the norm taken globally over the
    whole L x d matrix, so every fired update has L2 size exactly lambda_g.
    """
    if grad.shape != text.embeddings.shape:
        raise ValueError("gradient shape must match the embedding matrix")
    norm = float(grad.norm())
    if norm < GRAD_FLOOR:
        raise ZeroDivisionError("gradient norm below floor; no defined update direction")
    new_emb = text.embeddings + lambda_g * (grad / norm)
    return TextCondition(text.tokens.copy(), new_emb)


def sample_loop(
    model: UNetDenoiser,
    sched: NoiseSchedule,
    x_start: torch.Tensor,
    text_emb: torch.Tensor,
    au_tokens: torch.Tensor | None,
    lambda_au: float,
    gcfg: GuidanceConfig | None = None,
    targets: torch.Tensor | None = None,
    collect_trace: bool = False,
):
    """Batched deterministic denoising from t=T to t=0.

    When gcfg carries a classifier and lambda_g > 0, the late steps update
    the per-sample text embeddings before each DDIM step. Returns (x0 batch,
    trace list). Weights and inputs are never mutated.
    """
    T = sched.total_steps
    xt = x_start.clone()
    emb = text_emb.clone()
    emb0 = text_emb.clone()
    trace: list[dict] = []

    guided_from = 0
    lam = 0.0
    if gcfg is not None and gcfg.classifier is not None:
        lam = gcfg.resolved_lambda(emb.shape[-2], emb.shape[-1])
        guided_from = int(gcfg.start_fraction * T)

    with frozen(model):
        for t in range(T, 0, -1):
            fired = False
            loss_val = None
            if lam > 0 and t <= guided_from:
                e = emb.detach().requires_grad_(True)
                eps_pred, _ = model(xt, t, e, au_tokens, lambda_au=lambda_au)
                x0_hat = predict_x0_x(xt, t, eps_pred, sched)
                if not torch.isfinite(x0_hat).all():
                    raise FloatingPointError(f"non-finite one-step prediction at t={t}")
                loss_vec = _batch_guidance_loss(x0_hat, targets, gcfg.classifier)
                loss_vec.sum().backward()
                grad = e.grad
                norms = grad.flatten(1).norm(dim=1)
                ok = norms >= GRAD_FLOOR
                if not ok.all():
                    log.warning("zero guidance gradient at t=%d for %d samples; update skipped",
                                t, int((~ok).sum()))
                direction = torch.where(
                    ok[:, None, None], grad / norms.clamp_min(GRAD_FLOOR)[:, None, None],
                    torch.zeros_like(grad),
                )
                emb = (emb + gcfg.guidance_sign * lam * direction).detach()
                fired = bool(ok.any())
                loss_val = float(loss_vec.detach().mean())
            with torch.no_grad():
                eps_pred, _ = model(xt, t, emb, au_tokens, lambda_au=lambda_au)
                xt = ddim_step_x(xt, t, eps_pred, sched, clamp_x0=1.0)
            if not torch.isfinite(xt).all():
                raise FloatingPointError(f"non-finite sample at t={t - 1}")
            if collect_trace:
                trace.append(
                    {
                        "t": t,
                        "loss": loss_val,
                        "drift": float((emb - emb0).flatten(1).norm(dim=1).mean()),
                        "update_fired": fired,
                    }
                )
    return xt, trace


def guided_sample(
    layout_source: Sample,
    text: TextCondition,
    au: AUCondition | None,
    gcfg: GuidanceConfig,
    sched: NoiseSchedule,
    model: UNetDenoiser,
    seed: int,
    lambda_au: float | None = None,
) -> tuple[Sample, list[dict]]:
    """Full guided generation for one sample.

    Layout comes from inverting a real face to t=T with seeded noise; early
    steps are plain conditional DDIM; from floor(start_fraction * T) down the
    text embedding is nudged once per step before the conditioned update.
    """
    if layout_source.t != 0:
        raise ValueError("layout source must be a clean sample")
    if lambda_au is None:
        lambda_au = model.cfg.lambda_au
    x_T = invert(layout_source, sched.total_steps, seed, sched)
    au_tokens = au.au_tokens[None] if au is not None else None
    targets = torch.tensor([gcfg.target]) if gcfg.classifier is not None else None
    x0, trace = sample_loop(
        model, sched, x_T.x[None], text.embeddings[None], au_tokens, lambda_au,
        gcfg=gcfg, targets=targets, collect_trace=True,
    )
    return Sample(x0[0], 0), trace


def write_trace(path, trace: list[dict]) -> None:
    import json

    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
