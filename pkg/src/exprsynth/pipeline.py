"""End-to-end synthesis orchestration.

For each record: draw a label, expand the prompt, sample an AU configuration
from the prior, run guided (or ablated) generation from an inverted real
layout source, pseudo-label with the CNN experts plus the diffusion-feature
calibrator, vote/rectify/filter, and write the image plus one manifest
record. Per-record seeds derive from (run seed, record index) so any prefix
of a run is reproducible on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .denoiser import UNetDenoiser
from .faceprior import LABELS, NUM_CLASSES, FauPriorTable
from .guidance import GuidanceConfig, sample_loop
from .manifest import DatasetManifest, config_digest, save_image, write_manifest
from .prompts import SEED_DESCRIPTIONS, LlmClient, expand_prompt, tokenize
from .schedule import NoiseSchedule, add_noise_x
from .calibrator import FusionHead, annotate_batch
from .training import ArrayDataset, ExpressionClassifier


def sample_au_config(label_id: int, table: FauPriorTable, rng: np.random.Generator) -> np.ndarray:
    """Base AUs always on; non-base AUs flip on with the table's noise."""
    return table.sample_bits(label_id, rng)


def ensemble_vote(
    y_pre: int,
    expert_probs: list,
    agree_threshold: int = 2,
    conf_floor: float = 0.5,
) -> tuple[int, bool]:
    """Confirm the predefined label by expert agreement, else rectify.

    Each expert votes its argmax. If at least agree_threshold experts vote
    y_pre the label stands. Otherwise the label becomes the argmax of the
    mean probability vector, accepted only when that mean peak clears
    conf_floor.
    """
    if len(expert_probs) < 2:
        raise ValueError("ensemble_vote needs at least 2 experts")
    probs = [np.asarray(p, dtype=np.float64) for p in expert_probs]
    for p in probs:
        if p.shape != (NUM_CLASSES,) or not np.isclose(p.sum(), 1.0, atol=1e-4):
            raise ValueError("expert outputs must be probability vectors over the 7 classes")
    votes = [int(np.argmax(p)) for p in probs]
    if sum(v == y_pre for v in votes) >= agree_threshold:
        return y_pre, True
    mean = np.mean(probs, axis=0)
    final = int(np.argmax(mean))
    return final, bool(mean.max() >= conf_floor)


@dataclass
class PipelineConfig:
    """Knobs for one synthesis run; the ablation flags gate each mechanism."""

    use_text: bool = True
    use_au: bool = True
    use_guidance: bool = True
    use_layout: bool = True
    vote_enabled: bool = True
    lambda_au: float = 1.0
    lambda_g: float | None = None
    start_fraction: float = 0.5
    guidance_sign: int = -1
    agree_threshold: int = 2
    conf_floor: float = 0.5
    noise_prob: float = 0.15
    batch_size: int = 64

    def guidance_digest(self) -> str:
        return config_digest(
            {
                "use_guidance": self.use_guidance,
                "lambda_g": self.lambda_g,
                "start_fraction": self.start_fraction,
                "sign": self.guidance_sign,
            }
        )

    @staticmethod
    def variant(name: str, **overrides) -> "PipelineConfig":
        presets = {
            "guided": {},
            "au_only": {"use_guidance": False},
            "text_only": {"use_guidance": False, "use_au": False},
            "unconditional": {
                "use_text": False, "use_au": False, "use_guidance": False,
                "use_layout": False, "vote_enabled": False,
            },
        }
        if name not in presets:
            raise ValueError(f"unknown variant {name!r}")
        return PipelineConfig(**{**presets[name], **overrides})


@dataclass
class SynthesisBundle:
    """Frozen models the pipeline consumes; all loaded from checkpoints."""

    model: UNetDenoiser
    sched: NoiseSchedule
    guidance_classifier: ExpressionClassifier
    experts: list                     # CNN experts (the calibrator joins them)
    fusion_head: FusionHead
    layout_data: ArrayDataset         # toy-real training images for layout init
    table: FauPriorTable
    llm: LlmClient | None = None


def _record_rng(run_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([run_seed, index]))


def _record_noise_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index, 7]).generate_state(1)[0])


def synthesize_dataset(
    n: int,
    class_mix: np.ndarray | None,
    bundle: SynthesisBundle,
    cfg: PipelineConfig,
    out_dir: str | Path,
    run_seed: int = 0,
) -> DatasetManifest:
    """Generate n records into out_dir and write the manifest.

    The manifest lists every record including rejected ones; rerunning with
    the same run seed rewrites identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mix = np.full(NUM_CLASSES, 1.0 / NUM_CLASSES) if class_mix is None else np.asarray(class_mix, float)
    if mix.shape != (NUM_CLASSES,) or not np.isclose(mix.sum(), 1.0):
        raise ValueError("class_mix must be a distribution over the 7 labels")
    table = bundle.table
    header = {
        "kind": "synthetic",
        "run_seed": run_seed,
        "n": n,
        "config_digest": config_digest(asdict(cfg)),
    }

    # Plan all records first; generation then runs in fixed-size batches.
    plans = []
    for i in range(n):
        rng = _record_rng(run_seed, i)
        label = int(rng.choice(NUM_CLASSES, p=mix))
        seed_desc = SEED_DESCRIPTIONS[int(rng.integers(len(SEED_DESCRIPTIONS)))]
        prompt = expand_prompt(seed_desc, label, rng, table=table, llm=bundle.llm)
        au_bits = sample_au_config(label, table, rng)
        layout_idx = int(rng.integers(len(bundle.layout_data))) if cfg.use_layout else -1
        plans.append(
            {
                "id": i,
                "label": label,
                "prompt": prompt,
                "au_bits": au_bits,
                "layout_idx": layout_idx,
                "noise_seed": _record_noise_seed(run_seed, i),
            }
        )

    records = []
    try:
        for start in range(0, n, cfg.batch_size):
            chunk = plans[start:start + cfg.batch_size]
            records.extend(_generate_chunk(chunk, bundle, cfg, out_dir))
    except OSError:
        header["partial"] = True
        write_manifest(out_dir / "manifest.jsonl", header, records)
        raise

    return write_manifest(out_dir / "manifest.jsonl", header, records)


def _generate_chunk(chunk: list, bundle: SynthesisBundle, cfg: PipelineConfig,
                    out_dir: Path) -> list:
    model, sched = bundle.model, bundle.sched
    mc = model.cfg
    T = sched.total_steps
    B = len(chunk)

    with torch.no_grad():
        if cfg.use_text:
            tokens = torch.from_numpy(np.stack([tokenize(p["prompt"], mc.text_len) for p in chunk]))
            text_emb = model.text_encoder.encode_tokens(tokens)
        else:
            text_emb = model.text_encoder.null_embedding[None].expand(B, -1, -1).clone()
        au_bits = torch.tensor(np.stack([p["au_bits"] for p in chunk]), dtype=torch.float32)
        au_tokens = model.au_adapter(au_bits) if cfg.use_au else None

    # Layout initialization: seeded inversion of a real face (or pure noise).
    x_T = []
    for p in chunk:
        gen = torch.Generator().manual_seed(p["noise_seed"])
        eps = torch.randn(1, mc.image_size, mc.image_size, generator=gen)
        if cfg.use_layout:
            src = bundle.layout_data.images[p["layout_idx"]]
            x_T.append(add_noise_x(src, T, eps, sched))
        else:
            x_T.append(eps)
    x_T = torch.stack(x_T)

    gcfg = None
    targets = None
    if cfg.use_guidance:
        gcfg = GuidanceConfig(
            classifier=bundle.guidance_classifier,
            lambda_g=cfg.lambda_g,
            start_fraction=cfg.start_fraction,
            guidance_sign=cfg.guidance_sign,
        )
        targets = torch.tensor([p["label"] for p in chunk])

    lam_au = cfg.lambda_au if cfg.use_au else 0.0
    x0, _ = sample_loop(model, sched, x_T, text_emb, au_tokens, lam_au,
                        gcfg=gcfg, targets=targets)
    x0 = x0.clamp(-1.0, 1.0)
    # Quantize to the exported 8-bit range before scoring, so pseudo-labels
    # are a pure function of the saved image bytes (sub-quantum float noise
    # cannot flip a rounded probability).
    x0 = torch.round((x0 + 1.0) * 127.5) / 127.5 - 1.0

    # Pseudo-labels: CNN experts plus the diffusion-feature calibrator.
    with torch.no_grad():
        expert_probs = [expert.probs(x0) for expert in bundle.experts]
    expert_probs.append(
        annotate_batch(x0, text_emb, au_tokens, model, bundle.fusion_head, sched)
    )

    records = []
    gdigest = cfg.guidance_digest()
    for j, p in enumerate(chunk):
        probs_j = [pe[j].numpy() for pe in expert_probs]
        if cfg.vote_enabled:
            final, accepted = ensemble_vote(
                p["label"], probs_j, cfg.agree_threshold, cfg.conf_floor
            )
        else:
            final, accepted = p["label"], True
        name = f"syn_{p['id']:06d}.png"
        save_image(out_dir / name, x0[j, 0].numpy())
        records.append(
            {
                "id": p["id"],
                "image": name,
                "prompt": p["prompt"],
                "label": p["label"],
                "label_name": LABELS[p["label"]],
                "au_bits": p["au_bits"].tolist(),
                "guidance_digest": gdigest,
                "expert_probs": [np.round(q, 6).tolist() for q in probs_j],
                "label_final": final,
                "accepted": accepted,
                "seed": p["noise_seed"],
            }
        )
    return records
