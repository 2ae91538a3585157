#!/usr/bin/env python3
"""Sample one guided image from a trained run and dump the per-step guidance
trace (loss, drift, whether the update fired) as JSONL plus a console table.

Requires the run's training stages to exist (run `exprsynth train` first).

Usage: python scripts/guidance_trace.py [--profile smoke] [--out RUN_ROOT]
                                        [--label 3] [--seed 0]
"""

import argparse
import sys

import torch

from exprsynth.config import resolve_config
from exprsynth.faceprior import LABELS
from exprsynth.guidance import GuidanceConfig, guided_sample, write_trace
from exprsynth.prompts import caption_for
from exprsynth.reference import ReferenceRun
from exprsynth.schedule import Sample


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--profile", default="reference")
    ap.add_argument("--out", default=None)
    ap.add_argument("--label", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = resolve_config(args.profile)
    if args.out:
        cfg.out_root = args.out
    run = ReferenceRun(cfg)
    bundle = run.load_bundle()
    model = bundle.model

    import numpy as np
    rng = np.random.default_rng(args.seed)
    au_bits = bundle.table.sample_bits(args.label, rng)
    prompt = caption_for(args.label, au_bits, rng, table=bundle.table)
    text = model.text_encoder.encode(prompt)
    au = model.au_adapter.embed(au_bits)
    gcfg = GuidanceConfig(classifier=bundle.guidance_classifier,
                          target=args.label,
                          lambda_g=cfg.guidance.lambda_g,
                          start_fraction=cfg.guidance.start_fraction,
                          guidance_sign=cfg.guidance.guidance_sign)
    layout = Sample(torch.zeros(1, model.cfg.image_size, model.cfg.image_size), 0)
    out, trace = guided_sample(layout, text, au.au_tokens, gcfg, run.sched,
                               model, seed=args.seed)

    print(f"label={LABELS[args.label]!r} prompt={prompt!r}")
    print(f"{'t':>4} {'fired':>6} {'loss':>10} {'drift':>10}")
    for rec in trace:
        print(f"{rec['t']:>4} {str(rec['update_fired']):>6} "
              f"{rec['loss']:>10.4f} {rec['drift']:>10.4f}")
    trace_path = run.report_path("guidance_trace.jsonl")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    write_trace(trace_path, trace)
    print(f"trace written to {trace_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
