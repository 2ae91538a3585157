"""Command-line entry point.

Subcommands: toyfaces, train, synth, annotate, eval, repro. Configuration is
layered (profile defaults < --config YAML < EXPRSYNTH_* environment <
--set key=value flags). Exit codes: 0 success, 2 usage / unknown subcommand,
3 configuration validation failure (with a machine-readable error record on
stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import PROFILES, resolve_config
from .manifest import read_manifest, write_manifest
from .pipeline import ensemble_vote
from .prompts import tokenize

log = logging.getLogger("exprsynth")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exprsynth",
        description="Desk-scale facial-expression data synthesis pipeline.",
    )
    parser.add_argument("--profile", default="reference", choices=sorted(PROFILES),
                        help="base configuration profile")
    parser.add_argument("--config", default=None, help="YAML config file overlay")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override (repeatable)")
    parser.add_argument("--out", default=None, help="output root (overrides config)")
    parser.add_argument("--workers", type=int, default=None,
                        help="torch thread count (0 leaves the default)")
    parser.add_argument("--force", action="store_true",
                        help="rebuild stages even when cached")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.add_parser("toyfaces", help="render the procedural train/test corpora")

    p_train = sub.add_parser("train", help="run the training stages")
    p_train.add_argument("--stage", default=None,
                         choices=["base", "adapter", "oracle", "expert1", "expert2",
                                  "au_detector", "fusion_head"],
                         help="run a single stage (and its prerequisites)")

    p_synth = sub.add_parser("synth", help="generate synthetic datasets")
    p_synth.add_argument("--variant", default=None,
                         choices=["guided", "au_only", "text_only", "unconditional"],
                         help="generate one variant only")
    p_synth.add_argument("--seed", type=int, default=None,
                         help="generate for one synthesis seed only")

    p_ann = sub.add_parser("annotate", help="pseudo-label an existing manifest")
    p_ann.add_argument("manifest", help="path to the manifest to annotate")
    p_ann.add_argument("--output", default=None,
                       help="output manifest path (default: manifest_annotated.jsonl)")

    sub.add_parser("eval", help="run the evaluation suites and print the summary")
    sub.add_parser("repro", help="full end-to-end run with acceptance checks")
    return parser


def _fail_config(err: Exception) -> int:
    record = {"error": "config", "type": type(err).__name__, "message": str(err)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return EXIT_CONFIG


def cmd_toyfaces(run) -> int:
    paths = run.build_corpora()
    for split, path in paths.items():
        print(f"{split}: {path}")
    return EXIT_OK


def cmd_train(run, stage: str | None) -> int:
    paths = run.train_all()
    names = [stage] if stage else [k for k in paths if k not in ("train", "test")]
    for name in names:
        print(f"{name}: {paths[name]}")
    return EXIT_OK


def cmd_synth(run, variant: str | None, seed: int | None) -> int:
    from .reference import VARIANTS

    if seed is not None:
        run.cfg.synth.seeds = [seed]
    if variant is not None:
        # zero out the counts of the variants we skip
        keep = {v: (v == variant) for v in VARIANTS}
        if not keep["guided"]:
            run.cfg.synth.n_guided = 0
        if not (keep["au_only"] or keep["text_only"]):
            run.cfg.synth.n_ablation = 0
        if not keep["unconditional"]:
            run.cfg.synth.n_unconditional = 0
    sets = run.synthesize_all()
    for (var, s), path in sorted(sets.items()):
        if variant is None or var == variant:
            print(f"{var} seed={s}: {path}")
    return EXIT_OK


def cmd_annotate(run, manifest_path: str, output: str | None) -> int:
    from .calibrator import annotate_batch

    src = read_manifest(manifest_path)
    if not src.records:
        raise ValueError(f"nothing to annotate in {manifest_path}")
    bundle = run.load_bundle()
    model = bundle.model
    text_len = model.cfg.text_len
    batch = run.cfg.synth.batch_size
    records = []
    for start in range(0, len(src.records), batch):
        recs = src.records[start:start + batch]
        images = torch.from_numpy(src.load_images(recs)).unsqueeze(1)
        texts = [r.get("caption", r.get("prompt", "")) for r in recs]
        tokens = torch.from_numpy(np.stack([tokenize(t, text_len) for t in texts]))
        au_bits = torch.tensor([r["au_bits"] for r in recs], dtype=torch.float32)
        with torch.no_grad():
            text_emb = model.text_encoder.encode_tokens(tokens)
            au_tokens = model.au_adapter(au_bits)
            probs = [e.probs(images) for e in bundle.experts]
        probs.append(annotate_batch(images, text_emb, au_tokens, model,
                                    bundle.fusion_head, run.sched))
        for j, rec in enumerate(recs):
            probs_j = [np.round(p[j].numpy(), 6).tolist() for p in probs]
            final, accepted = ensemble_vote(
                rec.get("label", int(np.argmax(np.mean(probs_j, axis=0)))),
                probs_j, run.cfg.synth.agree_threshold, run.cfg.synth.conf_floor)
            records.append({**rec, "expert_probs": probs_j,
                            "label_final": final, "accepted": accepted})
    out_path = Path(output) if output else Path(manifest_path).with_name("manifest_annotated.jsonl")
    write_manifest(out_path, {**src.header, "kind": "annotated"}, records)
    print(out_path)
    return EXIT_OK


def cmd_eval(run) -> int:
    summary = run.run_all()
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_repro(cfg, force: bool) -> int:
    from .reference import run_reference

    summary = run_reference(cfg, force=force)
    for chk in summary["checks"]:
        status = "PASS" if chk["passed"] else "FAIL"
        print(f"[{status}] {chk['criterion']}: value={chk['value']} "
              f"threshold={chk['threshold']}")
    return EXIT_OK


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        cfg = resolve_config(args.profile, args.config, args.overrides)
        if args.out is not None:
            cfg.out_root = args.out
        if args.workers is not None:
            cfg.workers = args.workers
    except (KeyError, ValueError, OSError, TypeError) as err:
        return _fail_config(err)

    if args.command == "repro":
        return cmd_repro(cfg, args.force)

    from .reference import ReferenceRun

    run = ReferenceRun(cfg, force=args.force)
    if args.command == "toyfaces":
        return cmd_toyfaces(run)
    if args.command == "train":
        return cmd_train(run, args.stage)
    if args.command == "synth":
        return cmd_synth(run, args.variant, args.seed)
    if args.command == "annotate":
        return cmd_annotate(run, args.manifest, args.output)
    if args.command == "eval":
        return cmd_eval(run)
    parser.print_usage(sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
