import numpy as np
import pytest
import torch

from dcss.backbone import VisualTokens
from dcss.cas import (
    MaskPrediction,
    PretrainConfig,
    Segmenter,
    aggregate_masks,
    centroid_prompt_indices,
    mask_iou,
    patch_fractions,
    pretrain_segmenter,
    segment,
)
from dcss.errors import StateError, ValidationError
from dcss.pretrained import FIXTURE_DIR, PRETEXT_SPEC, load_grounder, load_segmenter
from dcss.synth_data import DatasetSpec, class_agnostic_pairs, generate_dataset


@pytest.fixture(scope="module")
def seg():
    return load_segmenter()


@pytest.fixture(scope="module")
def grounder():
    return load_grounder()


def tokens(grounder, seed=0):
    img = np.random.default_rng(seed).random((1, 32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        return grounder.encoder(torch.from_numpy(img))


def test_zero_prompt_deterministic(seg, grounder):
    vt = tokens(grounder)
    a = segment(vt, np.zeros((6, 32)), seg)
    b = segment(vt, np.zeros((6, 32)), seg)
    assert a.mask.shape == (32, 32)
    assert np.array_equal(a.mask, b.mask) and a.confidence == b.confidence


def test_confidence_bounded_over_random_prompts(seg, grounder):
    vt = tokens(grounder, 1)
    g = torch.Generator().manual_seed(0)
    P = torch.randn(1000, 6, 32, generator=g) * torch.rand(1000, 1, 1, generator=g) * 5
    with torch.no_grad():
        logits, conf = seg(vt.tokens.expand(1000, -1, -1), P)
    probs = torch.sigmoid(logits)
    assert ((conf >= 0) & (conf <= 1)).all()
    assert ((probs >= 0) & (probs <= 1)).all()


def test_unfrozen_segmenter_rejected(grounder):
    fresh = Segmenter()
    with pytest.raises(StateError):
        segment(tokens(grounder), np.zeros((6, 32)), fresh)


def test_shape_validation(seg):
    with pytest.raises(ValidationError):
        seg(torch.zeros(1, 10, 32), torch.zeros(1, 6, 32))
    with pytest.raises(ValidationError):
        seg(torch.zeros(1, 64, 32), torch.zeros(1, 6, 16))


def test_freeze_blocks_updates(seg):
    before = seg.checksum()
    assert all(not p.requires_grad for p in seg.parameters())
    opt = torch.optim.SGD([p for p in seg.parameters() if p.requires_grad] or [torch.zeros(1, requires_grad=True)],
                          lr=1.0)
    logits, conf = seg(torch.randn(2, 64, 32), torch.randn(2, 6, 32))
    assert not logits.requires_grad
    opt.step()
    assert seg.checksum() == before


def test_fixture_checksums_and_report():
    import json

    report = json.loads((FIXTURE_DIR / "fixtures.json").read_text())
    assert report["holdout_iou"] >= 0.7
    assert load_segmenter().checksum() == report["segmenter"]
    assert load_grounder().checksums() == {"backbone": report["backbone"], "fusion": report["fusion"]}


def test_fixture_generalizes_to_fresh_objects(seg, grounder):
    """Class-agnostic IoU on objects from a seed the fixture never saw."""
    spec = DatasetSpec(num_classes=PRETEXT_SPEC.num_classes, samples_per_class=4, seed=999)
    pairs = class_agnostic_pairs(generate_dataset(spec))
    ious = []
    with torch.no_grad():
        for img, mask in pairs:
            vt = grounder.encoder(torch.from_numpy(img[None]))
            idx = torch.from_numpy(centroid_prompt_indices(mask, 4, 6))
            logits, _ = seg(vt.tokens, vt.tokens[:, idx])
            ious.append(mask_iou(logits[0].numpy() > 0, mask))
    assert np.mean(ious) >= 0.7


def test_pretrain_requires_enough_pairs(grounder):
    pairs = [(np.zeros((32, 32, 3), np.float32), np.ones((32, 32), bool))] * 99
    with pytest.raises(ValidationError):
        pretrain_segmenter(pairs, grounder)


def test_pretrain_seeded_determinism(grounder):
    pairs = class_agnostic_pairs(generate_dataset(DatasetSpec(num_classes=6, samples_per_class=10, seed=3)))
    cfg = PretrainConfig(steps=15, batch_size=8)
    a, ra = pretrain_segmenter(pairs, grounder, cfg)
    b, rb = pretrain_segmenter(pairs, grounder, cfg)
    assert a.checksum() == b.checksum() and ra == rb
    assert a.frozen and all(not p.requires_grad for p in a.parameters())


def test_segmenter_file_round_trip(tmp_path, seg):
    seg.save(tmp_path / "s.bin")
    assert (tmp_path / "s.bin").read_bytes()[:4] == b"CASM"
    back = Segmenter.load(tmp_path / "s.bin")
    assert back.checksum() == seg.checksum() and back.frozen


def pred(mask, conf):
    return MaskPrediction(np.asarray(mask, dtype=np.float64), conf)


def test_aggregate_examples():
    left = np.zeros((4, 4))
    left[:, :2] = 0.9
    out = aggregate_masks([(3, pred(left, 0.5))])
    assert (out[:, :2] == 3).all() and (out[:, 2:] == 0).all()
    full = np.ones((4, 4))
    out = aggregate_masks([(1, pred(full, 0.4)), (2, pred(left, 0.9))])
    assert (out[:, :2] == 2).all() and (out[:, 2:] == 1).all()
    assert (aggregate_masks([], shape=(4, 4)) == 0).all()
    with pytest.raises(ValidationError):
        aggregate_masks([])


def test_aggregate_permutation_invariant(rng):
    preds = [(c, pred(rng.random((8, 8)), float(conf))) for c, conf in zip([4, 1, 6, 2], rng.random(4))]
    base = aggregate_masks(preds)
    for _ in range(5):
        perm = [preds[i] for i in rng.permutation(4)]
        assert np.array_equal(aggregate_masks(perm), base)
    assert set(np.unique(base).tolist()) <= {0, 1, 2, 4, 6}


def test_patch_helpers():
    m = np.zeros((8, 8), bool)
    m[0:4, 4:8] = True
    assert patch_fractions(m, 4).tolist() == [0.0, 1.0, 0.0, 0.0]
    assert centroid_prompt_indices(m, 4, 3).tolist() == [1, 1, 1]
    assert mask_iou(m, m) == 1.0 and mask_iou(m, ~m) == 0.0
