"""Procedural face sprites with ground-truth labels, AUs, and captions.

The renderer is a pure function from AU bits plus nuisance parameters to a
48x48 grayscale sprite in [-1, 1]. Each action unit moves a specific facial
element, so a per-AU detector and an expression classifier are both
learnable from this corpus, and every downstream accuracy metric has an
exact oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .faceprior import AU_VOCAB, AU_INDEX, LABELS, NUM_AUS, NUM_CLASSES, FauPriorTable
from .manifest import config_digest, save_image, write_manifest, DatasetManifest
from .prompts import caption_for

IMAGE_SIZE = 48

# Nuisance bounds (inclusive); render_face rejects anything outside.
NUISANCE_BOUNDS = {
    "width_scale": (0.85, 1.15),
    "height_scale": (0.85, 1.15),
    "eye_spacing": (0.8, 1.2),
    "brightness": (0.7, 1.3),
    "dx": (-2.0, 2.0),
    "dy": (-2.0, 2.0),
}


@dataclass(frozen=True)
class ToyFaceParams:
    au_bits: np.ndarray
    label: int = 0
    width_scale: float = 1.0
    height_scale: float = 1.0
    eye_spacing: float = 1.0
    brightness: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        bits = np.asarray(self.au_bits, dtype=np.int64)
        object.__setattr__(self, "au_bits", bits)
        if bits.shape != (NUM_AUS,):
            raise ValueError(f"au_bits must have length {NUM_AUS}, got {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("au_bits must be binary")
        for name, (lo, hi) in NUISANCE_BOUNDS.items():
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


def _soft(dist: np.ndarray, softness: float = 0.45) -> np.ndarray:
    """Smooth inside-mask from a signed distance (positive = inside)."""
    return 1.0 / (1.0 + np.exp(-dist / softness))


def _ellipse(xs, ys, cx, cy, rx, ry, softness=0.45):
    # Signed distance approximated in scaled units, rescaled to pixels.
    e = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    return _soft((1.0 - e) * min(rx, ry), softness)

def _capsule(xs, ys, x0, y0, x1, y1, thickness, softness=0.35):
    """Stroke along a segment with round caps."""
    vx, vy = x1 - x0, y1 - y0
    L2 = vx * vx + vy * vy
    if L2 < 1e-9:
        d = np.sqrt((xs - x0) ** 2 + (ys - y0) ** 2)
    else:
        u = np.clip(((xs - x0) * vx + (ys - y0) * vy) / L2, 0.0, 1.0)
        d = np.sqrt((xs - (x0 + u * vx)) ** 2 + (ys - (y0 + u * vy)) ** 2)
    return _soft(thickness - d, softness)


def _polyline(xs, ys, pts, thickness, softness=0.35):
    mask = np.zeros_like(xs)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        mask = np.maximum(mask, _capsule(xs, ys, x0, y0, x1, y1, thickness, softness))
    return mask


def _paint(canvas, mask, value):
    return canvas * (1.0 - mask) + value * mask


def render_face(params: ToyFaceParams) -> np.ndarray:
    """Deterministic 48x48 sprite in [-1, 1] for the given parameters."""
    au = {a: float(params.au_bits[AU_INDEX[a]]) for a in AU_VOCAB}
    ws, hs = params.width_scale, params.height_scale
    es, b = params.eye_spacing, params.brightness

    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
    cx, cy = 24.0 + params.dx, 23.0 + params.dy

    canvas = np.full((IMAGE_SIZE, IMAGE_SIZE), -1.0)

    # Head.
    face_val = 0.20 * b
    canvas = _paint(canvas, _ellipse(xs, ys, cx, cy + 1.0, 15.5 * ws, 19.5 * hs, 0.6), face_val)

    # Eyes: AU5 widens the aperture, AU7 narrows it, AU6 narrows it slightly.
    eye_y = cy - 4.0 * hs
    eye_dx = 7.0 * ws * es
    aperture = max(0.3, 1.0 + 0.9 * au[5] - 0.45 * au[7] - 0.25 * au[6])
    for sx in (-1.0, 1.0):
        ex = cx + sx * eye_dx
        canvas = _paint(canvas, _ellipse(xs, ys, ex, eye_y, 2.9 * ws, 1.5 * hs * aperture, 0.3), -0.85)

    # Brows: AU1 raises inner ends, AU2 raises outer ends, AU4 lowers both
    # and pulls the inner ends toward the midline.
    brow_y = eye_y - 4.6 * hs
    for sx in (-1.0, 1.0):
        ex = cx + sx * eye_dx
        xi = ex - sx * (3.4 * ws - 1.0 * au[4])
        xo = ex + sx * 3.4 * ws
        yi = brow_y - 2.3 * au[1] + 2.3 * au[4]
        yo = brow_y - 2.3 * au[2] + 1.0 * au[4]
        canvas = _paint(canvas, _capsule(xs, ys, xi, yi, xo, yo, 0.95), -0.8)

    # Nose; AU9 adds wrinkle strokes on the bridge.
    canvas = _paint(canvas, _capsule(xs, ys, cx, cy - 0.5, cx, cy + 4.0, 0.7), -0.45)
    if au[9] > 0:
        for wy, ww in ((cy - 3.2, 2.6), (cy - 1.6, 2.1)):
            canvas = _paint(canvas, _capsule(xs, ys, cx - ww, wy, cx + ww, wy, 0.55), -0.6)

    # Cheek bumps for AU6 (brighter patches beside the nose).
    if au[6] > 0:
        for sx in (-1.0, 1.0):
            bump = _ellipse(xs, ys, cx + sx * 8.0 * ws, cy + 5.0 * hs, 3.0 * ws, 2.2 * hs, 0.8)
            canvas = _paint(canvas, bump * 0.8, face_val + 0.28)

    # Mouth: curvature from AU12 (up) / AU15 (down), width from AU20,
    # thickness from AU23, jaw opening from AU26.
    mouth_y = cy + 10.0 * hs
    half_w = 5.5 * ws * (1.0 + 0.45 * au[20])
    curv = 3.2 * au[12] * (1.0 + 0.25 * au[6]) - 2.8 * au[15]
    thick = 1.35 * (1.0 - 0.45 * au[23]) + 0.1
    if au[26] > 0:
        gap = 1.0 + 4.0 * au[26]
        canvas = _paint(
            canvas, _ellipse(xs, ys, cx, mouth_y + gap * 0.5, half_w * 0.6, gap * 0.5 + 0.8, 0.4), -0.9
        )
    us = np.linspace(-1.0, 1.0, 17)
    pts = [(cx + u * half_w, mouth_y - curv * u * u) for u in us]
    canvas = _paint(canvas, _polyline(xs, ys, pts, thick), -0.8)

    return np.clip(canvas, -1.0, 1.0).astype(np.float32)


def sample_nuisance(rng: np.random.Generator) -> dict:
    out = {}
    for name, (lo, hi) in NUISANCE_BOUNDS.items():
        # Keep draws inside a central band so bounds never trip on noise.
        lo_c = lo + 0.05 * (hi - lo)
        hi_c = hi - 0.05 * (hi - lo)
        out[name] = float(rng.uniform(lo_c, hi_c))
    return out


def sample_corpus(
    n: int,
    class_mix: np.ndarray | None,
    table: FauPriorTable,
    rng: np.random.Generator,
    out_dir: str | Path,
    run_seed: int | None = None,
) -> DatasetManifest:
    """Render n labeled faces with captions into out_dir.

    Deterministic given the rng state; the manifest shares the synthesis
    pipeline's format so every consumer treats real and synthetic alike.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mix = np.full(NUM_CLASSES, 1.0 / NUM_CLASSES) if class_mix is None else np.asarray(class_mix, float)
    if mix.shape != (NUM_CLASSES,) or not np.isclose(mix.sum(), 1.0):
        raise ValueError("class_mix must be a distribution over the 7 labels")

    records = []
    for i in range(n):
        label = int(rng.choice(NUM_CLASSES, p=mix))
        bits = table.sample_bits(label, rng)
        params = ToyFaceParams(au_bits=bits, label=label, **sample_nuisance(rng))
        img = render_face(params)
        caption = caption_for(label, bits, rng, table=table)
        name = f"toy_{i:06d}.png"
        save_image(out_dir / name, img)
        records.append(
            {
                "id": i,
                "image": name,
                "label": label,
                "label_name": LABELS[label],
                "au_bits": bits.tolist(),
                "caption": caption,
                "accepted": True,
            }
        )

    header = {
        "kind": "toyfaces",
        "run_seed": run_seed,
        "n": n,
        "config_digest": config_digest({"noise_prob": table.noise_prob, "mix": mix.tolist()}),
    }
    return write_manifest(out_dir / "manifest.jsonl", header, records)
