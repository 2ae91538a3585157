import itertools

import numpy as np
import pytest
import torch

from exprsynth.calibrator import FusionHead, FusionHeadConfig
from exprsynth.faceprior import NUM_CLASSES, FauPriorTable
from exprsynth.manifest import read_manifest
from exprsynth.pipeline import (PipelineConfig, SynthesisBundle, ensemble_vote,
                                sample_au_config, synthesize_dataset)
from exprsynth.schedule import NoiseSchedule
from exprsynth.training import ArrayDataset, ExpressionClassifier


def one_hot(k, conf=1.0):
    p = np.full(NUM_CLASSES, (1.0 - conf) / (NUM_CLASSES - 1))
    p[k] = conf
    return p


# -- vote engine (criterion 9) -------------------------------------------------

def test_acc9_vote_engine_exhaustive():
    """All 3-expert argmax patterns x 7 classes follow the documented rule:
    >= 2 votes for y_pre confirm it; otherwise the mean-probability argmax
    wins and must clear the confidence floor to stay accepted."""
    conf = 0.9
    for y_pre in range(NUM_CLASSES):
        for votes in itertools.product(range(NUM_CLASSES), repeat=3):
            probs = [one_hot(v, conf) for v in votes]
            final, accepted = ensemble_vote(y_pre, probs, 2, 0.5)
            agree = sum(v == y_pre for v in votes)
            if agree >= 2:
                assert final == y_pre and accepted
            else:
                mean = np.mean(probs, axis=0)
                assert final == int(np.argmax(mean))
                assert accepted == (mean.max() >= 0.5)
    print("\n[PASS] criterion 9a: exhaustive 3-expert x 7-class vote patterns")


def test_vote_rectify_and_floor():
    # Experts disagree with y_pre but agree with each other: rectified.
    final, accepted = ensemble_vote(0, [one_hot(3, 0.9), one_hot(3, 0.9), one_hot(2, 0.9)], 2, 0.5)
    assert final == 3 and accepted
    # Uniform experts: mean peak 1/7 < floor, rejected.
    uniform = np.full(NUM_CLASSES, 1.0 / NUM_CLASSES)
    final, accepted = ensemble_vote(4, [uniform, uniform, uniform], 2, 0.5)
    assert final == 0 and not accepted          # argmax ties break low
    # Two experts suffice.
    final, accepted = ensemble_vote(1, [one_hot(1), one_hot(1)], 2, 0.5)
    assert final == 1 and accepted


def test_vote_validation():
    with pytest.raises(ValueError):
        ensemble_vote(0, [one_hot(0)], 2, 0.5)              # fewer than 2 experts
    with pytest.raises(ValueError):
        ensemble_vote(0, [one_hot(0), np.ones(NUM_CLASSES)], 2, 0.5)  # not a distribution
    with pytest.raises(ValueError):
        ensemble_vote(0, [one_hot(0), np.ones(3) / 3], 2, 0.5)        # wrong arity


def test_sample_au_config_superset(table):
    rng = np.random.default_rng(0)
    for label in range(NUM_CLASSES):
        bits = sample_au_config(label, table, rng)
        assert np.all(bits >= table.base_bits(label))


# -- pipeline config -------------------------------------------------------------

def test_variants():
    guided = PipelineConfig.variant("guided")
    assert guided.use_text and guided.use_au and guided.use_guidance and guided.use_layout
    au_only = PipelineConfig.variant("au_only")
    assert au_only.use_au and not au_only.use_guidance
    text_only = PipelineConfig.variant("text_only")
    assert text_only.use_text and not text_only.use_au and not text_only.use_guidance
    uncond = PipelineConfig.variant("unconditional")
    assert not (uncond.use_text or uncond.use_au or uncond.use_guidance or uncond.use_layout)
    with pytest.raises(ValueError):
        PipelineConfig.variant("freestyle")
    override = PipelineConfig.variant("guided", lambda_g=0.25)
    assert override.lambda_g == 0.25


def test_guidance_digest_tracks_guidance_knobs():
    a = PipelineConfig().guidance_digest()
    assert PipelineConfig(batch_size=4).guidance_digest() == a   # unrelated knob
    assert PipelineConfig(lambda_g=9.0).guidance_digest() != a


# -- end-to-end synthesis at toy scale ---------------------------------------------


@pytest.fixture(scope="module")
def bundle(tiny_cfg):
    from exprsynth.denoiser import UNetDenoiser

    torch.manual_seed(2)
    model = UNetDenoiser(tiny_cfg)
    torch.nn.init.normal_(model.out_conv.weight, std=0.05)
    model.eval()
    gen = torch.Generator().manual_seed(3)
    n = 8
    layout = ArrayDataset(
        torch.rand(n, 1, tiny_cfg.image_size, tiny_cfg.image_size, generator=gen) * 2 - 1,
        torch.randint(0, NUM_CLASSES, (n,), generator=gen),
        (torch.rand(n, 12, generator=gen) > 0.5).float(),
        torch.zeros(n, tiny_cfg.text_len, dtype=torch.long),
    )
    torch.manual_seed(4)
    return SynthesisBundle(
        model=model,
        sched=NoiseSchedule.cosine(6),
        guidance_classifier=ExpressionClassifier().eval(),
        experts=[ExpressionClassifier().eval(), ExpressionClassifier().eval()],
        fusion_head=FusionHead(FusionHeadConfig.for_denoiser(tiny_cfg)).eval(),
        layout_data=layout,
        table=FauPriorTable(),
    )


def test_synthesize_dataset_records(tmp_path, bundle):
    cfg = PipelineConfig(batch_size=4, lambda_g=0.2)
    m = synthesize_dataset(6, None, bundle, cfg, tmp_path / "run", run_seed=7)
    assert len(m.records) == 6
    for rec in m.records:
        assert set(rec) >= {"id", "image", "prompt", "label", "label_name", "au_bits",
                            "guidance_digest", "expert_probs", "label_final",
                            "accepted", "seed"}
        assert len(rec["expert_probs"]) == 3         # 2 CNN experts + calibrator
        for p in rec["expert_probs"]:
            assert len(p) == NUM_CLASSES
            assert abs(sum(p) - 1.0) < 1e-3
        assert (tmp_path / "run" / rec["image"]).exists()
    assert m.header["run_seed"] == 7
    reread = read_manifest(tmp_path / "run" / "manifest.jsonl")
    assert reread.records == m.records


def test_synthesis_prefix_reproducible(tmp_path, bundle):
    """A shorter run is a byte-exact prefix of a longer one (same seed)."""
    cfg = PipelineConfig(batch_size=4, lambda_g=0.2)
    long = synthesize_dataset(6, None, bundle, cfg, tmp_path / "long", run_seed=11)
    short = synthesize_dataset(3, None, bundle, cfg, tmp_path / "short", run_seed=11)
    for a, b in zip(short.records, long.records[:3]):
        assert {k: v for k, v in a.items() if k != "image"} == \
               {k: v for k, v in b.items() if k != "image"}
        img_a = (tmp_path / "short" / a["image"]).read_bytes()
        img_b = (tmp_path / "long" / b["image"]).read_bytes()
        assert img_a == img_b


def test_synthesis_deterministic_across_runs(tmp_path, bundle):
    cfg = PipelineConfig(batch_size=4, lambda_g=0.2)
    a = synthesize_dataset(4, None, bundle, cfg, tmp_path / "a", run_seed=5)
    b = synthesize_dataset(4, None, bundle, cfg, tmp_path / "b", run_seed=5)
    assert a.records == b.records
    c = synthesize_dataset(4, None, bundle, cfg, tmp_path / "c", run_seed=6)
    assert c.records != a.records


def test_vote_disabled_keeps_assigned_labels(tmp_path, bundle):
    cfg = PipelineConfig(batch_size=4, vote_enabled=False, use_guidance=False)
    m = synthesize_dataset(4, None, bundle, cfg, tmp_path / "nv", run_seed=1)
    for rec in m.records:
        assert rec["label_final"] == rec["label"]
        assert rec["accepted"] is True


def test_rejected_records_never_reach_training_splits(tmp_path, bundle):
    """Criterion 9 (second half): load_dataset excludes rejected records."""
    from exprsynth.training import load_dataset

    cfg = PipelineConfig(batch_size=4, use_guidance=False, conf_floor=2.0)
    # conf_floor > 1 forces rejection whenever the experts disagree with y_pre.
    m = synthesize_dataset(8, None, bundle, cfg, tmp_path / "rej", run_seed=2)
    rejected = [r for r in m.records if not r["accepted"]]
    assert rejected                               # untrained experts disagree
    kept = len(m.records) - len(rejected)
    if kept:
        data = load_dataset(tmp_path / "rej" / "manifest.jsonl", accepted_only=True)
        assert len(data) == kept
    else:
        with pytest.raises(ValueError):           # empty splits refuse to load
            load_dataset(tmp_path / "rej" / "manifest.jsonl", accepted_only=True)
    print("\n[PASS] criterion 9b: rejected records excluded from training splits")


def test_bad_class_mix_rejected(tmp_path, bundle):
    with pytest.raises(ValueError):
        synthesize_dataset(2, np.ones(NUM_CLASSES), bundle, PipelineConfig(), tmp_path)
