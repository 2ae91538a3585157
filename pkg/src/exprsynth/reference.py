"""Reference run orchestration: corpora, training stages, synthesis sets,
and the evaluation suites, with per-stage caching keyed by config digests.

Every stage writes a stamp file next to its output; a rerun with the same
configuration reuses the artifact, and a changed digest rebuilds it. The
``repro`` CLI subcommand drives this module end to end.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .calibrator import train_fusion_head, load_fusion_head
from .config import RunConfig
from .denoiser import DenoiserConfig
from .evaluation import (downstream_train_eval, fau_accuracy, fer_accuracy,
                         frechet_distance, manifest_stats, scaling_sweep,
                         write_results, write_scaling_csv)
from .faceprior import FauPriorTable
from .manifest import DatasetManifest, config_digest, read_manifest
from .pipeline import (PipelineConfig, SynthesisBundle, ensemble_vote,
                       synthesize_dataset)
from .schedule import NoiseSchedule
from .toyfaces import sample_corpus
from .training import (TrainConfig, load_au_detector, load_classifier,
                       load_dataset, load_denoiser, train_au_detector,
                       train_expression_classifier, train_stage)
from .manifest import write_manifest

log = logging.getLogger(__name__)

VARIANTS = ("guided", "au_only", "text_only", "unconditional")
_VARIANT_ID = {v: i for i, v in enumerate(VARIANTS)}

# classifier roles and their seed offsets relative to the run seed
ROLES = {"oracle": 101, "expert1": 201, "expert2": 202, "au_detector": 301}


def _stamp_path(target: Path) -> Path:
    return target.with_name(target.name + ".stamp")


def _is_cached(target: Path, digest: str, force: bool) -> bool:
    stamp = _stamp_path(target)
    return (not force and target.exists() and stamp.exists()
            and stamp.read_text().strip() == digest)


def _write_stamp(target: Path, digest: str) -> None:
    _stamp_path(target).write_text(digest + "\n")


def _accepted_prefix(manifest, k: int) -> DatasetManifest:
    """First k accepted records of a voted manifest (k <= 0 means all)."""
    m = manifest if isinstance(manifest, DatasetManifest) else read_manifest(manifest)
    recs = [r for r in m.records if r.get("accepted", True)]
    if k > 0:
        recs = recs[:k]
    return DatasetManifest(m.path, m.header, recs)


class ReferenceRun:
    """Paths and lazily loaded models for one output root."""

    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.root = Path(cfg.out_root)
        self.root.mkdir(parents=True, exist_ok=True)
        if cfg.workers > 0:
            torch.set_num_threads(cfg.workers)
        self.sched = NoiseSchedule.from_config(vars(cfg.schedule))
        self.model_cfg = DenoiserConfig(
            image_size=cfg.model.image_size,
            channels=tuple(cfg.model.channels),
            blocks_per_level=cfg.model.blocks_per_level,
            cond_dim=cfg.model.cond_dim,
            text_len=cfg.model.text_len,
            au_tokens=cfg.model.au_tokens,
            lambda_au=cfg.model.lambda_au,
            time_dim=cfg.model.time_dim,
        )
        self.table = FauPriorTable(noise_prob=cfg.corpus.noise_prob)

    # -- path helpers -----------------------------------------------------

    def corpus_dir(self, split: str) -> Path:
        return self.root / "corpus" / split

    def ckpt(self, name: str) -> Path:
        return self.root / "ckpt" / f"{name}.pt"

    def synth_dir(self, variant: str, seed: int) -> Path:
        return self.root / "synth" / f"seed{seed}" / variant

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / name

    # -- stages -----------------------------------------------------------

    def build_corpora(self) -> dict:
        out = {}
        for split, n, seed_off in (("train", self.cfg.corpus.n_train, 0),
                                   ("test", self.cfg.corpus.n_test, 1)):
            target = self.corpus_dir(split) / "manifest.jsonl"
            digest = config_digest({"n": n, "seed": self.cfg.seed + seed_off,
                                    "noise_prob": self.table.noise_prob})
            if not _is_cached(target, digest, self.force):
                log.info("rendering %s corpus (n=%d)", split, n)
                rng = np.random.default_rng(self.cfg.seed + seed_off)
                sample_corpus(n, None, self.table, rng, target.parent,
                              run_seed=self.cfg.seed + seed_off)
                _write_stamp(target, digest)
            out[split] = target
        return out

    def train_all(self) -> dict:
        cfg, tr = self.cfg, self.cfg.train
        corpora = self.build_corpora()
        train_manifest = corpora["train"]
        logs = self.root / "logs"
        out = dict(corpora)

        def stage(name, digest_extra, builder):
            target = self.ckpt(name)
            # The digest covers the whole training config so a change to any
            # stage's recipe rebuilds every checkpoint; stages feed each other
            # (base -> adapter -> fusion head), so partial invalidation would
            # leave stale downstream artifacts.
            digest = config_digest({"stage": name, "seed": cfg.seed,
                                    "schedule": vars(cfg.schedule),
                                    "model": self.model_cfg.to_dict(),
                                    "train": vars(cfg.train),
                                    **digest_extra})
            if not _is_cached(target, digest, self.force):
                log.info("training stage %s", name)
                builder(target)
                _write_stamp(target, digest)
            out[name] = target

        stage("base", {"steps": tr.base_steps, "batch": tr.base_batch, "lr": tr.base_lr,
                       "dropout": tr.cond_dropout},
              lambda target: train_stage(
                  TrainConfig("base", steps=tr.base_steps, batch_size=tr.base_batch,
                              lr=tr.base_lr, seed=cfg.seed, cond_dropout=tr.cond_dropout,
                              ema_decay=tr.ema_decay,
                              out_path=str(target), metrics_path=str(logs / "base.jsonl")),
                  train_manifest, sched=self.sched, model_cfg=self.model_cfg))

        stage("adapter", {"steps": tr.adapter_steps, "lr": tr.adapter_lr},
              lambda target: train_stage(
                  TrainConfig("au_adapter", steps=tr.adapter_steps, batch_size=tr.adapter_batch,
                              lr=tr.adapter_lr, seed=cfg.seed + 1,
                              cond_dropout=tr.adapter_text_dropout,
                              ema_decay=tr.ema_decay,
                              out_path=str(target), metrics_path=str(logs / "adapter.jsonl"),
                              inputs={"base": str(self.ckpt("base"))}),
                  train_manifest, sched=self.sched, model_cfg=self.model_cfg))

        data = load_dataset(train_manifest, text_len=self.model_cfg.text_len)
        for role, offset in ROLES.items():
            trainer = train_au_detector if role == "au_detector" else train_expression_classifier
            stage(role, {"steps": tr.classifier_steps, "lr": tr.classifier_lr, "role": role},
                  lambda target, trainer=trainer, offset=offset: trainer(
                      TrainConfig("classifier", steps=tr.classifier_steps,
                                  batch_size=tr.classifier_batch, lr=tr.classifier_lr,
                                  seed=cfg.seed + offset, out_path=str(target),
                                  metrics_path=str(logs / f"{role}.jsonl")),
                      data))

        stage("fusion_head", {"steps": tr.head_steps, "lr": tr.head_lr},
              lambda target: train_fusion_head(
                  TrainConfig("calibrator_head", steps=tr.head_steps, batch_size=tr.head_batch,
                              lr=tr.head_lr, seed=cfg.seed + 2, out_path=str(target),
                              metrics_path=str(logs / "fusion_head.jsonl"),
                              inputs={"denoiser": str(self.ckpt("adapter"))}),
                  data, self.sched))
        return out

    def load_bundle(self) -> SynthesisBundle:
        paths = self.train_all()
        return SynthesisBundle(
            model=load_denoiser(paths["adapter"]),
            sched=self.sched,
            guidance_classifier=load_classifier(paths["expert1"]),
            experts=[load_classifier(paths["expert1"]), load_classifier(paths["expert2"])],
            fusion_head=load_fusion_head(paths["fusion_head"]),
            layout_data=load_dataset(paths["train"], text_len=self.model_cfg.text_len),
            table=self.table,
        )

    def _variant_config(self, variant: str) -> PipelineConfig:
        g = self.cfg.guidance
        pc = PipelineConfig.variant(
            variant,
            lambda_g=g.lambda_g,
            start_fraction=g.start_fraction,
            guidance_sign=g.guidance_sign,
            noise_prob=self.table.noise_prob,
            batch_size=self.cfg.synth.batch_size,
            agree_threshold=self.cfg.synth.agree_threshold,
            conf_floor=self.cfg.synth.conf_floor,
        )
        # Fidelity sets keep the assigned labels; the voted view is derived
        # afterwards from the stored expert probabilities.
        pc.vote_enabled = False
        return pc

    def synthesize_all(self) -> dict:
        """All variants for every synthesis seed; returns manifest paths."""
        bundle = None
        out: dict = {}
        counts = {
            "guided": self.cfg.synth.n_guided,
            "au_only": self.cfg.synth.n_ablation,
            "text_only": self.cfg.synth.n_ablation,
            "unconditional": self.cfg.synth.n_unconditional,
        }
        for seed in self.cfg.synth.seeds:
            for variant in VARIANTS:
                target = self.synth_dir(variant, seed) / "manifest.jsonl"
                pc = self._variant_config(variant)
                digest = config_digest({
                    "variant": variant, "seed": seed, "n": counts[variant],
                    "pipeline": pc.guidance_digest(), "run": self.cfg.seed,
                    "schedule": vars(self.cfg.schedule),
                    "train": vars(self.cfg.train),   # new models, new sets
                })
                if not _is_cached(target, digest, self.force):
                    if bundle is None:
                        bundle = self.load_bundle()
                    run_seed = int(np.random.SeedSequence(
                        [self.cfg.seed, seed, _VARIANT_ID[variant]]).generate_state(1)[0])
                    log.info("synthesizing %s (seed %d, n=%d)", variant, seed, counts[variant])
                    synthesize_dataset(counts[variant], None, bundle, pc,
                                       target.parent, run_seed=run_seed)
                    _write_stamp(target, digest)
                out[(variant, seed)] = target
        return out

    # -- voted view ---------------------------------------------------------

    def voted_manifest(self, manifest_path: Path) -> Path:
        """Apply the ensemble vote posthoc from the stored expert probs."""
        target = manifest_path.with_name("manifest_voted.jsonl")
        digest = config_digest({"source": str(manifest_path),
                                "threshold": self.cfg.synth.agree_threshold,
                                "floor": self.cfg.synth.conf_floor})
        if not _is_cached(target, digest, self.force):
            src = read_manifest(manifest_path)
            records = []
            for rec in src.records:
                final, accepted = ensemble_vote(
                    rec["label"], rec["expert_probs"],
                    self.cfg.synth.agree_threshold, self.cfg.synth.conf_floor,
                )
                records.append({**rec, "label_final": final, "accepted": accepted})
            write_manifest(target, {**src.header, "kind": "synthetic_voted"}, records)
            _write_stamp(target, digest)
        return target

    # -- evaluation suites ----------------------------------------------------

    def _real_prefix(self, n: int) -> DatasetManifest:
        train = read_manifest(self.corpus_dir("train") / "manifest.jsonl")
        return DatasetManifest(train.path, train.header, train.records[:n])

    def eval_metrics(self) -> dict:
        """Fidelity metrics per seed: expression/AU accuracy and Fréchet
        distance of guided vs unconditional sets against the real test set."""
        target = self.report_path("metrics.json")
        digest = config_digest({"suite": "metrics", "cfg": self.cfg.digest()})
        if _is_cached(target, digest, self.force):
            return json.loads(target.read_text())
        sets = self.synthesize_all()
        paths = self.train_all()
        oracle = load_classifier(paths["oracle"])
        au_oracle = load_au_detector(paths["au_detector"])
        test_manifest = paths["test"]

        real_stats = manifest_stats(test_manifest, oracle)
        rows = []
        for seed in self.cfg.synth.seeds:
            row = {"seed": seed}
            for variant in ("guided", "au_only", "text_only"):
                m = sets[(variant, seed)]
                row[f"fer_{variant}"] = fer_accuracy(m, oracle)
                row[f"fau_{variant}"] = fau_accuracy(m, au_oracle)
            for variant in ("guided", "unconditional"):
                m = read_manifest(sets[(variant, seed)])
                n_fid = min(len(m.records), self.cfg.synth.n_unconditional)
                prefix = DatasetManifest(m.path, m.header, m.records[:n_fid])
                row[f"fid_{variant}"] = frechet_distance(
                    real_stats, manifest_stats(prefix, oracle))
            voted = read_manifest(self.voted_manifest(sets[("guided", seed)]))
            row["acceptance_rate"] = len(voted.accepted()) / max(len(voted.records), 1)
            rows.append(row)

        summary = {"rows": rows}
        for key in rows[0]:
            if key != "seed":
                summary[f"mean_{key}"] = float(np.mean([r[key] for r in rows]))
        write_results(self.report_path("metrics.jsonl"), rows)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(summary, indent=2, sort_keys=True))
        _write_stamp(target, digest)
        return summary

    def _mean_over_reps(self, train_manifests: list, test, seed: int) -> float:
        """Downstream accuracy averaged over train_reps training replicates;
        one replicate's init/batch noise otherwise dominates the comparison."""
        ev = self.cfg.eval
        reps = max(1, int(ev.train_reps))
        accs = [downstream_train_eval(train_manifests, test, "supervised",
                                      seed + 1000 * r,
                                      steps=ev.downstream_steps,
                                      batch_size=ev.downstream_batch,
                                      lr=ev.downstream_lr)
                for r in range(reps)]
        return float(np.mean(accs))

    def eval_downstream(self) -> dict:
        """Supervised downstream: real-only vs real+synthetic per seed."""
        target = self.report_path("downstream.json")
        digest = config_digest({"suite": "downstream", "cfg": self.cfg.digest()})
        if _is_cached(target, digest, self.force):
            return json.loads(target.read_text())
        sets = self.synthesize_all()
        paths = self.train_all()
        ev = self.cfg.eval
        real = self._real_prefix(ev.downstream_real)
        test = paths["test"]
        rows = []
        for seed in ev.seeds:
            voted = self.voted_manifest(sets[("guided", seed)]) \
                if (("guided", seed) in sets) else None
            synth = _accepted_prefix(voted, ev.downstream_synth)
            acc_real = self._mean_over_reps([real], test, seed)
            acc_mix = self._mean_over_reps([real, synth], test, seed)
            rows.append({"seed": seed, "real_only": acc_real, "real_plus_synth": acc_mix})
        summary = {
            "rows": rows,
            "mean_real_only": float(np.mean([r["real_only"] for r in rows])),
            "mean_real_plus_synth": float(np.mean([r["real_plus_synth"] for r in rows])),
        }
        write_results(self.report_path("downstream.jsonl"), rows)
        target.write_text(json.dumps(summary, indent=2, sort_keys=True))
        _write_stamp(target, digest)
        return summary

    def eval_scaling(self) -> dict:
        """Synthetic-only accuracy over nested prefix sizes, per seed."""
        target = self.report_path("scaling.json")
        digest = config_digest({"suite": "scaling", "cfg": self.cfg.digest()})
        if _is_cached(target, digest, self.force):
            return json.loads(target.read_text())
        sets = self.synthesize_all()
        paths = self.train_all()
        ev = self.cfg.eval
        reps = [1000 * r for r in range(max(1, int(ev.train_reps)))]
        results: dict = {}
        for seed in ev.seeds:
            voted = self.voted_manifest(sets[("guided", seed)])
            accepted = _accepted_prefix(voted, 0)
            sweep = scaling_sweep(accepted, paths["test"], ev.scaling_sizes,
                                  [seed + r for r in reps],
                                  steps=ev.downstream_steps,
                                  batch_size=ev.downstream_batch, lr=ev.downstream_lr)
            results[str(seed)] = {
                str(size): float(np.mean(list(sweep[size].values())))
                for size in ev.scaling_sizes
            }
        write_scaling_csv(self.report_path("scaling.csv"),
                          {int(size): {int(s): accs[size]
                                       for s, accs in results.items()}
                           for size in results[str(ev.seeds[0])]})
        target.write_text(json.dumps(results, indent=2, sort_keys=True))
        _write_stamp(target, digest)
        return results

    def run_all(self) -> dict:
        summary = {
            "config_digest": self.cfg.digest(),
            "metrics": self.eval_metrics(),
            "downstream": self.eval_downstream(),
            "scaling": self.eval_scaling(),
        }
        out = self.report_path("summary.json")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(summary, indent=2, sort_keys=True))
        return summary


# -- directional criteria over a finished run ---------------------------------

def directional_checks(summary: dict, cfg: RunConfig) -> list:
    """Numeric pass/fail rows for the directional acceptance criteria."""
    m = summary["metrics"]
    d = summary["downstream"]
    s = summary["scaling"]
    checks = []
    checks.append({
        "criterion": "guidance_fer_gain",
        "value": m["mean_fer_guided"] - m["mean_fer_au_only"],
        "threshold": 0.05,
        "passed": m["mean_fer_guided"] >= m["mean_fer_au_only"] + 0.05,
    })
    checks.append({
        "criterion": "au_adapter_fau_gain",
        "value": m["mean_fau_au_only"] - m["mean_fau_text_only"],
        "threshold": 0.02,
        "passed": m["mean_fau_au_only"] >= m["mean_fau_text_only"] + 0.02,
    })
    checks.append({
        "criterion": "downstream_synth_gain",
        "value": d["mean_real_plus_synth"] - d["mean_real_only"],
        "threshold": 0.01,
        "passed": d["mean_real_plus_synth"] >= d["mean_real_only"] + 0.01,
    })
    nondecreasing = 0
    for seed, accs in s.items():
        series = [accs[str(size)] for size in sorted(int(k) for k in accs)]
        if all(b >= a for a, b in zip(series, series[1:])):
            nondecreasing += 1
    need = min(2, len(s))
    checks.append({
        "criterion": "scaling_nondecreasing_seeds",
        "value": nondecreasing,
        "threshold": need,
        "passed": nondecreasing >= need,
    })
    fid_wins = sum(1 for row in m["rows"] if row["fid_guided"] < row["fid_unconditional"])
    checks.append({
        "criterion": "fid_guided_beats_unconditional",
        "value": fid_wins,
        "threshold": len(m["rows"]),
        "passed": fid_wins == len(m["rows"]),
    })
    return checks


def run_reference(cfg: RunConfig, force: bool = False) -> dict:
    """Full sequence: corpora, training, synthesis, evaluation, checks."""
    run = ReferenceRun(cfg, force=force)
    summary = run.run_all()
    checks = directional_checks(summary, cfg)
    report_lines = []
    for chk in checks:
        status = "PASS" if chk["passed"] else "FAIL"
        report_lines.append(
            f"[{status}] {chk['criterion']}: value={chk['value']} threshold={chk['threshold']}"
        )
    report = run.report_path("acceptance.txt")
    report.write_text("\n".join(report_lines) + "\n")
    summary["checks"] = checks
    (run.report_path("summary.json")).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
