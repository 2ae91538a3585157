import numpy as np
import pytest
import torch

from exprsynth.calibrator import (FusionHead, FusionHeadConfig, annotate,
                                  annotate_batch, extract, extract_batch, fuse,
                                  head_inputs, load_fusion_head, regroup,
                                  save_fusion_head, train_fusion_head)
from exprsynth.denoiser import DenoiserConfig, TextCondition, UNetDenoiser
from exprsynth.faceprior import NUM_CLASSES
from exprsynth.schedule import Sample
from exprsynth.training import TrainConfig


def _conds(model, cfg, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(batch, 1, cfg.image_size, cfg.image_size, generator=gen) * 2 - 1
    text = torch.randn(batch, cfg.text_len, cfg.cond_dim, generator=gen)
    return images, text


def test_extract_counts_and_partition(tiny_model, tiny_cfg, sched8):
    images, text = _conds(tiny_model, tiny_cfg)
    feats = extract_batch(images, text, None, tiny_model, sched8)
    groups, total = feats.counts()
    assert groups == tiny_cfg.levels
    assert total == tiny_cfg.attention_blocks
    # Partition property: group sizes sum to the total count, and every map
    # carries its group's resolution.
    assert sum(len(g) for g in feats.feature_groups) == total
    assert sum(len(g) for g in feats.attention_groups) == total
    for level, group in enumerate(feats.feature_groups):
        side = tiny_cfg.image_size // (2 ** level)
        for fmap in group:
            assert fmap.shape[-2:] == (side, side)
    for level, group in enumerate(feats.attention_groups):
        side = tiny_cfg.image_size // (2 ** level)
        for amap in group:
            assert amap.shape[1:] == (side, side, tiny_cfg.text_len)
        assert feats.attention_mean[level].shape == (2, side, side, tiny_cfg.text_len)


def test_acc4_default_config_plumbing(sched8):
    """Criterion 4: the default model yields exactly 4 feature groups and 16
    attention maps regrouped into 4 groups, and fuse emits a valid 7-class
    probability vector."""
    torch.manual_seed(0)
    cfg = DenoiserConfig()
    model = UNetDenoiser(cfg).eval()
    image = Sample(torch.rand(1, cfg.image_size, cfg.image_size) * 2 - 1, 0)
    text = TextCondition(np.zeros(cfg.text_len, dtype=np.int64),
                         torch.randn(cfg.text_len, cfg.cond_dim))
    feats = extract(image, text, None, model, sched8)
    groups, total = feats.counts()
    assert groups == 4
    assert total == 16
    assert len(feats.attention_groups) == 4
    assert sum(len(g) for g in feats.attention_groups) == 16
    head = FusionHead(FusionHeadConfig.for_denoiser(cfg))
    probs = fuse(feats, head)
    assert probs.shape == (NUM_CLASSES,)
    assert float(probs.sum()) == pytest.approx(1.0, abs=1e-5)
    assert (probs >= 0).all()
    print("\n[PASS] criterion 4: calibrator plumbing (4 groups, 16 maps, valid probs)")


def test_extraction_deterministic(tiny_model, tiny_cfg, sched8):
    images, text = _conds(tiny_model, tiny_cfg)
    a = extract_batch(images, text, None, tiny_model, sched8)
    b = extract_batch(images, text, None, tiny_model, sched8)
    for ga, gb in zip(a.feature_groups, b.feature_groups):
        for fa, fb in zip(ga, gb):
            assert torch.equal(fa, fb)
    c = extract_batch(images, text, None, tiny_model, sched8, seed=1)
    assert not torch.equal(a.feature_groups[0][0], c.feature_groups[0][0])


def test_extract_requires_clean_sample(tiny_model, tiny_cfg, sched8):
    text = TextCondition(np.zeros(tiny_cfg.text_len, dtype=np.int64),
                         torch.randn(tiny_cfg.text_len, tiny_cfg.cond_dim))
    noisy = Sample(torch.zeros(1, tiny_cfg.image_size, tiny_cfg.image_size), 3)
    with pytest.raises(ValueError):
        extract(noisy, text, None, tiny_model, sched8)


def test_regroup_rejects_nothing_but_partitions(tiny_model, tiny_cfg):
    images, text = _conds(tiny_model, tiny_cfg)
    with torch.no_grad():
        _, cap = tiny_model(images, 1, text, None, capture=True)
    feats = regroup(cap, tiny_cfg.levels, tiny_cfg.image_size)
    flat = [id(m) for g in feats.feature_groups for m in g]
    assert len(flat) == len(set(flat))          # each map in exactly one group


def test_annotate_and_batch_agree(tiny_model, tiny_cfg, sched8):
    torch.manual_seed(3)
    head = FusionHead(FusionHeadConfig.for_denoiser(tiny_cfg)).eval()
    images, text = _conds(tiny_model, tiny_cfg, batch=3)
    batch_probs = annotate_batch(images, text, None, tiny_model, head, sched8)
    assert batch_probs.shape == (3, NUM_CLASSES)
    sums = batch_probs.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    label, probs = annotate(
        Sample(images[0], 0),
        TextCondition(np.zeros(tiny_cfg.text_len, dtype=np.int64), text[0]),
        None, tiny_model, head, sched8,
    )
    assert 0 <= label < NUM_CLASSES
    assert torch.allclose(probs, batch_probs[0], atol=1e-5)
    assert label == int(torch.argmax(batch_probs[0]))


def test_argmax_tie_breaks_low():
    probs = torch.tensor([0.2, 0.2, 0.2, 0.2, 0.1, 0.05, 0.05])
    assert int(torch.argmax(probs)) == 0


def test_fusion_head_config_roundtrip(tiny_cfg):
    cfg = FusionHeadConfig.for_denoiser(tiny_cfg)
    assert cfg.levels == tiny_cfg.levels
    assert cfg.attention_channels == tiny_cfg.text_len
    assert cfg.feature_channels == tuple(
        2 * tiny_cfg.blocks_per_level * c for c in tiny_cfg.channels)
    assert FusionHeadConfig.from_dict(cfg.to_dict()) == cfg


def test_save_load_fusion_head(tmp_path, tiny_cfg):
    torch.manual_seed(4)
    head = FusionHead(FusionHeadConfig.for_denoiser(tiny_cfg))
    save_fusion_head(tmp_path / "h.pt", head)
    loaded = load_fusion_head(tmp_path / "h.pt")
    for a, b in zip(loaded.parameters(), head.parameters()):
        assert torch.equal(a, b)


def test_train_fusion_head_freezes_denoiser(tmp_path, tiny_model, tiny_cfg, sched8):
    from exprsynth.training import ArrayDataset, save_checkpoint

    den_path = tmp_path / "den.pt"
    save_checkpoint(den_path, "denoiser", tiny_model.state_dict(),
                    config=tiny_cfg.to_dict())
    gen = torch.Generator().manual_seed(5)
    n = 12
    data = ArrayDataset(
        torch.rand(n, 1, tiny_cfg.image_size, tiny_cfg.image_size, generator=gen) * 2 - 1,
        torch.randint(0, NUM_CLASSES, (n,), generator=gen),
        (torch.rand(n, 12, generator=gen) > 0.5).float(),
        torch.zeros(n, tiny_cfg.text_len, dtype=torch.long),
    )
    cfg = TrainConfig("calibrator_head", steps=2, batch_size=6, lr=1e-3, seed=0,
                      out_path=str(tmp_path / "head.pt"),
                      inputs={"denoiser": str(den_path)})
    train_fusion_head(cfg, data, sched8)
    head = load_fusion_head(tmp_path / "head.pt")
    assert isinstance(head, FusionHead)
    # The denoiser on disk is untouched by head training.
    from exprsynth.training import load_denoiser
    reloaded = load_denoiser(den_path)
    for a, b in zip(reloaded.parameters(), tiny_model.parameters()):
        assert torch.equal(a, b)


def test_train_fusion_head_requires_denoiser(tmp_path, sched8):
    from exprsynth.training import ArrayDataset

    cfg = TrainConfig("calibrator_head", steps=1, out_path=str(tmp_path / "h.pt"))
    with pytest.raises(FileNotFoundError):
        train_fusion_head(cfg, None, sched8)
