import numpy as np
import pytest

from conceptfsl.data import AnnotatedImage
from conceptfsl.episodes import EpisodeSpec, episode_rng, episode_stream, sample_episode
from conceptfsl.errors import SamplingError


def _split(counts):
    images, next_id = [], 0
    for label, n in counts.items():
        for _ in range(n):
            images.append(AnnotatedImage(np.zeros((4, 4, 3), np.float32), label, (), next_id))
            next_id += 1
    return images


def test_standard_episode_sizes(tiny_bundle):
    spec = EpisodeSpec(5, 5, 3)
    ep = sample_episode(tiny_bundle.novel_split, spec, np.random.default_rng(0))
    assert len(ep.support_flat()) == 25 and len(ep.query) == 15
    ep16 = sample_episode(_split({c: 21 for c in range(6)}), EpisodeSpec(5, 5, 16), np.random.default_rng(0))
    assert len(ep16.support_flat()) == 25 and len(ep16.query) == 80
    assert ep16.query_labels == tuple(y for y in range(5) for _ in range(16))


def test_support_and_query_are_disjoint_and_class_pure(tiny_bundle):
    ep = sample_episode(tiny_bundle.novel_split, EpisodeSpec(3, 2, 4), np.random.default_rng(3))
    ids = [i for g in ep.support_ids() for i in g] + ep.query_ids()
    assert len(ids) == len(set(ids))
    for y, group in enumerate(ep.support):
        assert {img.class_label for img in group} == {ep.class_map[y]}
    for img, y in zip(ep.query, ep.query_labels):
        assert img.class_label == ep.class_map[y]


def test_tight_split_is_partitioned():
    split = _split({10: 2, 20: 2})
    ep = sample_episode(split, EpisodeSpec(2, 1, 1), np.random.default_rng(5))
    used = sorted(ep.query_ids() + [i for g in ep.support_ids() for i in g])
    assert used == [0, 1, 2, 3]


def test_short_class_is_named():
    split = _split({1: 10, 2: 10, 3: 5 + 3 - 1})
    with pytest.raises(SamplingError, match="class 3 has 7 images"):
        sample_episode(split, EpisodeSpec(3, 5, 3), np.random.default_rng(0))


def test_too_few_classes():
    with pytest.raises(SamplingError, match="needs 5"):
        sample_episode(_split({1: 30, 2: 30}), EpisodeSpec(), np.random.default_rng(0))


@pytest.mark.parametrize("kw", [{"n_way": 1}, {"k_shot": 0}, {"n_query": 0}])
def test_spec_validation(kw):
    with pytest.raises(SamplingError):
        EpisodeSpec(**kw)


def test_stream_is_reproducible_and_counter_based():
    split = _split({c: 21 for c in range(8)})
    spec = EpisodeSpec(5, 5, 16)
    a = [e.fingerprint() for e in episode_stream(split, spec, 11, 600)]
    b = [e.fingerprint() for e in episode_stream(split, spec, 11, 600)]
    assert a == b and len(a) == 600
    assert all(e.n_way == 5 for e in episode_stream(split, spec, 11, 600))
    # episode i does not depend on how many episodes came before it
    assert sample_episode(split, spec, episode_rng(11, 599), 599).fingerprint() == a[599]
    assert len(set(a)) == 600


def test_empty_stream():
    assert list(episode_stream(_split({1: 5, 2: 5}), EpisodeSpec(2, 1, 1), 0, 0)) == []
