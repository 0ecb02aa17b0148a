import dataclasses

import numpy as np
import pytest
import torch

from conceptfsl.backbone import FeatureMap, annotation_cell
from conceptfsl.data import ConceptAnnotation, SyntheticConfig, generate_synthetic_dataset
from conceptfsl.detector import (
    ConceptDetectors,
    DetectorTrainConfig,
    build_detector_examples,
    detect_concept,
    detect_from_scores,
    fit_detector,
    localization_rate,
    train_detectors,
)

from conftest import make_backbone

FAST = DetectorTrainConfig(epochs=2, batch_size=64, hidden=8)


@pytest.fixture(scope="module")
def bundle80():
    cfg = SyntheticConfig(n_base_classes=3, n_val_classes=2, n_novel_classes=2, images_per_class=4, image_size=80, grid_size=4)
    return generate_synthetic_dataset(cfg, 0)


def test_examples_from_5x5_map():
    values = np.random.default_rng(0).random((5, 5, 4))
    pos, neg = build_detector_examples(FeatureMap(values, 0), ConceptAnnotation(0, 42.0, 42.0, True), 84)
    assert pos.shape == (1, 4) and neg.shape == (24, 4)
    assert np.array_equal(pos[0], values[2, 2])
    assert not any(np.array_equal(n, values[2, 2]) for n in neg)


def test_examples_from_1x1_map_and_invisible():
    fmap = FeatureMap(np.ones((1, 1, 3)), 0)
    pos, neg = build_detector_examples(fmap, ConceptAnnotation(0, 3.0, 3.0, True), 84)
    assert (len(pos), len(neg)) == (1, 0)
    pos, neg = build_detector_examples(fmap, ConceptAnnotation(0, 3.0, 3.0, False), 84)
    assert (len(pos), len(neg)) == (0, 0)


def test_positive_weight_and_frozen_backbone(bundle80):
    backbone = make_backbone(size=80, channels=4)
    backbone.train()  # detector training must not touch BN statistics either
    before = {k: v.clone() for k, v in backbone.state_dict().items()}
    detectors = train_detectors(bundle80, backbone, FAST)
    assert detectors.positive_class_weight == 24
    after = backbone.state_dict()
    for k, v in before.items():
        assert v.numpy().tobytes() == after[k].numpy().tobytes(), k
    assert all(p.requires_grad for p in backbone.parameters())
    assert backbone.training


def test_never_visible_concept_gets_stub(bundle80):
    def hide(img):
        return img.replace(annotations=tuple(dataclasses.replace(a, visible=False) if a.concept_id == 1 else a for a in img.annotations))

    hidden = dataclasses.replace(bundle80, base_split=[hide(i) for i in bundle80.base_split])
    with pytest.warns(UserWarning, match="concept 1"):
        detectors = train_detectors(hidden, make_backbone(size=80, channels=4), FAST)
    assert detectors.stub == [False, True, False]
    res = detect_concept(FeatureMap(np.random.default_rng(0).random((5, 5, 4)), 1), detectors)
    assert res.probability == 0.5 and res.cell == (0, 0)


def test_argmax_and_tie_break():
    fmap = FeatureMap(np.random.default_rng(0).random((5, 5, 3)), 2)
    scores = np.full((5, 5), 0.1)
    scores[2, 2] = 0.9
    res = detect_from_scores(fmap, scores)
    assert res.cell == (2, 2) and res.probability == 0.9
    assert np.array_equal(res.embedding.vector, fmap.values[2, 2])
    assert res.embedding.source == "detected" and res.embedding.detector_probability == 0.9

    tie = detect_from_scores(fmap, np.full((5, 5), 0.5))
    assert tie.cell == (0, 0)
    scores = np.zeros((5, 5))
    scores[1, 3] = scores[3, 1] = 1.0
    assert detect_from_scores(fmap, scores).cell == (1, 3)  # row-major first


def test_probabilities_in_unit_interval():
    det = ConceptDetectors(2, 4, 8)
    with torch.no_grad():
        det.classifiers[0][2].bias.fill_(50.0)
    vecs = np.random.default_rng(0).normal(scale=10, size=(100, 4))
    for j in range(2):
        p = det.probabilities(vecs, j)
        assert np.all((p >= 0) & (p <= 1))
    with pytest.raises(KeyError):
        det.probabilities(vecs, 2)


def test_fit_is_invariant_to_example_order():
    rng = np.random.default_rng(0)
    pos, neg = rng.normal(1, size=(10, 4)), rng.normal(-1, size=(90, 4))
    cfg = DetectorTrainConfig(epochs=3, batch_size=16, hidden=8, seed=4)
    a, b = ConceptDetectors(1, 4, 8, 9.0).double(), ConceptDetectors(1, 4, 8, 9.0).double()
    fit_detector(a, 0, pos, neg, cfg)
    fit_detector(b, 0, pos[rng.permutation(10)], neg[rng.permutation(90)], cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_fit_separates_separable_data():
    rng = np.random.default_rng(1)
    pos, neg = rng.normal(2, 0.3, size=(20, 4)), rng.normal(-2, 0.3, size=(200, 4))
    det = ConceptDetectors(1, 4, 8, 10.0).double()
    losses = fit_detector(det, 0, pos, neg, DetectorTrainConfig(epochs=30, batch_size=32, hidden=8, learning_rate=1e-2))
    assert losses[-1] < losses[0]
    assert det.probabilities(pos, 0).min() > 0.5 > det.probabilities(neg, 0).max()


class _Perfect(ConceptDetectors):
    def score_image(self, image, maps):
        scores = np.zeros(maps.shape[:3])
        for j in range(maps.shape[0]):
            cell = annotation_cell(image, j, maps.shape[1])
            if cell is not None:
                scores[j][cell] = 1.0
        return scores


def test_localization_rate_counts_visible_instances(bundle80):
    backbone = make_backbone(size=80, channels=4)
    assert localization_rate(backbone, _Perfect(3, 4), bundle80.novel_split) == {0: 1.0, 1: 1.0, 2: 1.0}
    stub = ConceptDetectors(3, 4)
    for j in range(3):
        stub.make_stub(j)
    rates = localization_rate(backbone, stub, bundle80.novel_split)
    expected = np.mean([annotation_cell(img, 0, 5) == (0, 0) for img in bundle80.novel_split])
    assert rates[0] == pytest.approx(expected)
