import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptfsl.backbone import ConceptEmbedding
from conceptfsl.data import AnnotatedImage, ConceptAnnotation
from conceptfsl.episodes import Episode, EpisodeSpec
from conceptfsl.prototypes import classify_query_training, compute_prototypes, summed_distance_probs
from conceptfsl.training import AugmentationConfig, TrainConfig, augment, episode_loss, train_concept_learners

from conftest import make_backbone, random_image


def _emb(v, j=0):
    return ConceptEmbedding(np.asarray(v, dtype=np.float64), j, "picked")


# ---------------------------------------------------------------- prototypes


def test_single_shot_prototype_is_the_embedding():
    v = np.random.default_rng(0).normal(size=6)
    bank = compute_prototypes([{0: [_emb(v)]}, {0: [_emb(-v)]}])
    assert np.array_equal(bank.prototype(0, 0), v)


def test_mean_of_two():
    bank = compute_prototypes([{0: [_emb([0, 0]), _emb([2, 4])]}])
    assert bank.prototype(0, 0).tolist() == [1.0, 2.0]


def test_bank_size_is_classes_times_concepts():
    per_class = [{j: [_emb(np.ones(3) * y, j)] for j in range(15)} for y in range(5)]
    assert len(compute_prototypes(per_class)) == 75


def test_mismatched_concepts_rejected():
    with pytest.raises(ValueError, match="class 1"):
        compute_prototypes([{0: [_emb([1.0])], 1: [_emb([1.0], 1)]}, {0: [_emb([1.0])]}])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_prototypes_are_permutation_invariant(n_way, k_shot, seed):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n_way, k_shot, 2, 4))
    per_class = [{j: [_emb(vecs[y, k, j], j) for k in range(k_shot)] for j in range(2)} for y in range(n_way)]
    shuffled = [{j: [embs[j][k] for k in rng.permutation(k_shot)] for j in embs} for embs in per_class]
    np.testing.assert_allclose(compute_prototypes(per_class).prototypes, compute_prototypes(shuffled).prototypes, atol=1e-12)


# ---------------------------------------------------------------- training classifier


def test_equal_sums_give_half_half():
    bank = compute_prototypes([{0: [_emb([1.0, 0.0])]}, {0: [_emb([-1.0, 0.0])]}])
    np.testing.assert_allclose(classify_query_training({0: _emb([0.0, 3.0])}, bank), [0.5, 0.5])


def test_ln3_gap_gives_three_to_one():
    bank = compute_prototypes([{0: [_emb([0.0])]}, {0: [_emb([math.log(3)])]}])
    np.testing.assert_allclose(classify_query_training({0: _emb([0.0])}, bank), [0.75, 0.25], atol=1e-12)


def test_summed_probs_shift_invariant():
    rng = np.random.default_rng(0)
    q, p = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 2, 4))
    probs = summed_distance_probs(q, p)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_allclose(summed_distance_probs(q + 5, p + 5), probs, atol=1e-12)


# ---------------------------------------------------------------- loss


def _dup_episode(rng, n_way=3):
    support = [random_image(rng, label=y, image_id=y) for y in range(n_way)]
    query = support[0].replace(image_id=99)
    def ep(label):
        return Episode(tuple((s,) for s in support), (query,), (label,), tuple(range(n_way)))
    return ep


def test_query_equal_to_own_support_gives_lowest_loss():
    model = make_backbone()
    make = _dup_episode(np.random.default_rng(0))
    own = episode_loss(model, make(0)).item()
    assert 0.0 <= own <= math.log(3)
    assert all(episode_loss(model, make(y)).item() > own for y in (1, 2))


def test_loss_nonnegative_on_random_episodes(tiny_bundle):
    from conceptfsl.episodes import episode_stream

    model = make_backbone()
    for ep in episode_stream(tiny_bundle.base_split, EpisodeSpec(3, 2, 2), 0, 5):
        loss = episode_loss(model, ep, AugmentationConfig(), np.random.default_rng(ep.index))
        assert torch.isfinite(loss) and loss.item() >= 0


def test_augmentation_needs_rng(tiny_bundle):
    from conceptfsl.episodes import episode_stream

    ep = next(episode_stream(tiny_bundle.base_split, EpisodeSpec(2, 1, 1), 0, 1))
    with pytest.raises(ValueError, match="rng"):
        episode_loss(make_backbone(), ep, AugmentationConfig())


# ---------------------------------------------------------------- augmentation


def _img(x, y, size=84):
    px = np.zeros((size, size, 3), np.float32)
    px[int(y), int(x)] = 1.0
    return AnnotatedImage(px, 0, (ConceptAnnotation(0, float(x), float(y), True), ConceptAnnotation(1, 5.0, 5.0, False)), 0)


def test_flip_mirrors_x():
    aug = AugmentationConfig(random_crop=False, rotation=False, color_jitter=False, flip_probability=1.0)
    out = augment(_img(10, 30), aug, np.random.default_rng(0))
    ann = out.annotation(0)
    assert (ann.x, ann.y) == (73.0, 30.0)
    assert out.pixels[30, 73].max() == 1.0
    assert out.annotation(1) == ConceptAnnotation(1, 5.0, 5.0, False)


def test_jitter_keeps_geometry():
    aug = AugmentationConfig(random_crop=False, rotation=False, horizontal_flip=False)
    img = _img(20, 40)
    img = img.replace(pixels=np.full((84, 84, 3), 0.4, np.float32) + img.pixels * 0.3)
    out = augment(img, aug, np.random.default_rng(1))
    assert out.annotations == img.annotations
    assert not np.array_equal(out.pixels, img.pixels)


def test_disabled_augmentation_is_identity():
    img = _img(20, 40)
    out = augment(img, AugmentationConfig.none(), np.random.default_rng(2))
    assert np.array_equal(out.pixels, img.pixels) and out.annotations == img.annotations


@pytest.mark.parametrize("seed", range(8))
def test_geometric_augmentation_moves_annotations_with_pixels(seed):
    aug = AugmentationConfig(color_jitter=False)
    px = np.zeros((84, 84, 3), np.float32)
    px[38:47, 28:37] = 1.0
    img = AnnotatedImage(px, 0, (ConceptAnnotation(0, 32.0, 42.0, True),), 0)
    out = augment(img, aug, np.random.default_rng(seed))
    ann = out.annotation(0)
    assert ann.visible
    assert out.pixels[int(round(ann.y)), int(round(ann.x))].min() > 0.5


def test_annotation_pushed_out_of_frame_becomes_invisible():
    aug = AugmentationConfig(rotation=False, horizontal_flip=False, color_jitter=False, crop_padding=8)
    hidden = 0
    for seed in range(20):
        out = augment(_img(1, 1), aug, np.random.default_rng(seed))
        ann = out.annotation(0)
        inside = 0 <= ann.x < 84 and 0 <= ann.y < 84
        assert ann.visible == inside
        hidden += not inside
    assert hidden > 0


# ---------------------------------------------------------------- training loop


def _train(bundle, **kw):
    cfg = TrainConfig(**{"episodes_per_epoch": 4, "max_epochs": 2, "val_episodes": 5, "episode_spec": EpisodeSpec(3, 2, 2), **kw})
    from conceptfsl.backbone import BackboneConfig

    bcfg = BackboneConfig(input_size=32, channels=8, n_concepts=bundle.n_concepts)
    return train_concept_learners(bundle, cfg, AugmentationConfig(), bcfg)


def test_zero_learning_rate_keeps_parameters(tiny_bundle):
    from conceptfsl.backbone import BackboneConfig, ConceptBackbone

    model, _ = _train(tiny_bundle, learning_rate=0.0, seed=5)
    fresh = ConceptBackbone.create(BackboneConfig(input_size=32, channels=8, n_concepts=3), seed=5)
    for (name, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
        assert torch.equal(a, b), name


def test_training_is_deterministic(tiny_bundle):
    m1, log1 = _train(tiny_bundle, seed=3)
    m2, log2 = _train(tiny_bundle, seed=3)
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_time"} for r in log]
    assert strip(log1) == strip(log2)
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_training_beats_chance(tiny_bundle):
    _, log = _train(tiny_bundle, max_epochs=3, episodes_per_epoch=10, val_episodes=10)
    assert max(r["val_accuracy"] for r in log) > 1 / 3
    assert {"epoch", "mean_loss", "val_accuracy", "wall_time"} <= set(log[0])


def test_early_stopping_respects_patience(tiny_bundle):
    _, log = _train(tiny_bundle, learning_rate=0.0, max_epochs=10, patience=2)
    acc = [r["val_accuracy"] for r in log]
    best = int(np.argmax(acc))
    assert len(log) == best + 3  # stopped two stale epochs after the best one
    assert max(acc[best + 1 :]) <= acc[best]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ValueError):
        AugmentationConfig(max_rotation=200)
