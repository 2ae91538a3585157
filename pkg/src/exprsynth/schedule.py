"""Diffusion timestep mathematics.

Forward noising, deterministic DDIM stepping, seeded inversion, and the
one-step clean-image prediction. All coefficient arithmetic happens in
float64 and is applied to tensors in their own dtype, so the round-trip and
step-consistency identities hold to float32 precision.

Convention: ``alpha_bar[t]`` is the cumulative signal coefficient, with
``alpha_bar[0] == 1`` (clean) and ``alpha_bar`` strictly decreasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class Sample:
    """An image tensor together with its diffusion timestep.

    ``x`` is channels x height x width in [-1, 1] pixel units at t=0;
    at t>0 it lives in noised space and is unbounded.
    """

    x: torch.Tensor
    t: int

    def __post_init__(self):
        if self.x.dim() != 3:
            raise ValueError(f"Sample.x must be CxHxW, got shape {tuple(self.x.shape)}")
        if self.t < 0:
            raise ValueError(f"timestep must be >= 0, got {self.t}")


@dataclass(frozen=True)
class NoiseSchedule:
    """The cumulative signal coefficient sequence governing the forward
    process, DDIM stepping, and inversion. Immutable after construction."""

    total_steps: int
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.total_steps + 1,):
            raise ValueError(
                f"alpha_bar must have length T+1={self.total_steps + 1}, got {ab.shape}"
            )
        if not np.all(np.isfinite(ab)):
            raise ValueError("alpha_bar entries must be finite")
        if ab[0] != 1.0:
            raise ValueError(f"alpha_bar[0] must be exactly 1, got {ab[0]}")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def cosine(total_steps: int = 100, floor: float = 1e-4) -> "NoiseSchedule":
        """Cosine-shaped alpha_bar with a positive floor at t=T."""
        t = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        ab = np.cos(0.5 * math.pi * t) ** 2
        # Affine squeeze into [floor, 1] keeps ab[0]=1 exactly and ab[T]=floor.
        ab = floor + (1.0 - floor) * (ab - ab[-1]) / (ab[0] - ab[-1])
        ab[0] = 1.0
        return NoiseSchedule(total_steps, ab)

    @staticmethod
    def linear(total_steps: int = 100, floor: float = 1e-4) -> "NoiseSchedule":
        """Linear decay of alpha_bar from 1 to the floor."""
        ab = np.linspace(1.0, floor, total_steps + 1)
        return NoiseSchedule(total_steps, ab)

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        shape = cfg.get("shape", "cosine")
        maker = {"cosine": NoiseSchedule.cosine, "linear": NoiseSchedule.linear}.get(shape)
        if maker is None:
            raise ValueError(f"unknown schedule shape {shape!r}")
        return maker(int(cfg.get("total_steps", 100)), float(cfg.get("floor", 1e-4)))

    def to_config(self, shape: str = "cosine", floor: float | None = None) -> dict:
        return {
            "total_steps": self.total_steps,
            "shape": shape,
            "floor": float(self.alpha_bar[-1]) if floor is None else floor,
        }

    # -- coefficient access ------------------------------------------------

    def ab(self, t: int) -> float:
        if not (0 <= t <= self.total_steps):
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[t])

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio alpha_bar/(1-alpha_bar) for t=1..T."""
        ab = self.alpha_bar[1:]
        return ab / (1.0 - ab)


def _check_t(sched: NoiseSchedule, t: int, lo: int = 1) -> None:
    if not (lo <= t <= sched.total_steps):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.total_steps}]")


# -- tensor-level core (batched callers use these directly) ----------------

def add_noise_x(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    _check_t(sched, t)
    ab = sched.ab(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_step_x(
    xt: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    sched: NoiseSchedule,
    clamp_x0: float | None = None,
) -> torch.Tensor:
    if t == 0:
        raise ValueError("no previous timestep below t=0")
    _check_t(sched, t)
    ab_t = sched.ab(t)
    ab_prev = sched.ab(t - 1)
    if clamp_x0 is not None:
        # Clamp the implied clean image and recompute the implied noise from
        # it. With an imperfect eps_pred the 1/sqrt(ab_t) factor amplifies
        # prediction error without bound at high t; the clamp keeps sampling
        # trajectories in the image range. With oracle noise and x0 inside
        # the range the step is unchanged.
        x0 = predict_x0_x(xt, t, eps_pred, sched).clamp(-clamp_x0, clamp_x0)
        eps_impl = (xt - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
        return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_impl
    scale = math.sqrt(ab_prev) / math.sqrt(ab_t)
    shift = math.sqrt(ab_prev) * (
        math.sqrt(1.0 / ab_prev - 1.0) - math.sqrt(1.0 / ab_t - 1.0)
    )
    return scale * xt + shift * eps_pred


def predict_x0_x(xt: torch.Tensor, t: int, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _check_t(sched, t)
    ab = sched.ab(t)
    return (xt - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def add_noise_batch(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Vectorized forward noising with a per-sample timestep vector."""
    if eps.shape != x0.shape:
        raise ValueError("noise shape mismatch")
    if t.min() < 1 or t.max() > sched.total_steps:
        raise ValueError("timesteps outside [1, T]")
    ab = torch.from_numpy(sched.alpha_bar).to(x0.dtype)[t]
    ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


# -- Sample-level operations ------------------------------------------------

def add_noise(x0: Sample, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> Sample:
    """Forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if x0.t != 0:
        raise ValueError(f"add_noise expects a clean sample (t=0), got t={x0.t}")
    return Sample(add_noise_x(x0.x, t, eps, sched), t)


def invert(x0: Sample, t_target: int, seed: int, sched: NoiseSchedule) -> Sample:
    """Map a clean image to its noised sample at t_target with seeded noise.

    Same seed gives bit-identical output; t_target=T initializes layout-
    preserving generation, t_target=1 feeds feature extraction.
    """
    _check_t(sched, t_target)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(x0.x.shape, generator=gen, dtype=x0.x.dtype)
    return add_noise(x0, t_target, eps, sched)


def ddim_step(xt: Sample, eps_pred: torch.Tensor, sched: NoiseSchedule) -> Sample:
    """Deterministic DDIM update from level t to level t-1."""
    return Sample(ddim_step_x(xt.x, xt.t, eps_pred, sched), xt.t - 1)


def predict_x0(xt: Sample, eps_pred: torch.Tensor, sched: NoiseSchedule) -> Sample:
    """One-step clean-image estimate; the algebraic inverse of add_noise.

    The output is intentionally unclamped: the guidance classifier must see a
    differentiable path, and clamping would cut it.
    """
    return Sample(predict_x0_x(xt.x, xt.t, eps_pred, sched), 0)
