"""C-way K-shot episode sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import AnnotatedImage, group_by_class
from .errors import SamplingError


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 16

    def __post_init__(self):
        if self.n_way < 2:
            raise SamplingError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_shot < 1:
            raise SamplingError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.n_query < 1:
            raise SamplingError(f"n_query must be >= 1, got {self.n_query}")


@dataclass(frozen=True, eq=False)
class Episode:
    """Support grouped by episode-local class; queries flat, class-major."""

    support: tuple[tuple[AnnotatedImage, ...], ...]
    query: tuple[AnnotatedImage, ...]
    query_labels: tuple[int, ...]
    class_map: tuple[int, ...]
    index: int = 0

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])

    def support_flat(self) -> list[AnnotatedImage]:
        return [img for group in self.support for img in group]

    def support_ids(self) -> list[list[int]]:
        return [[img.image_id for img in group] for group in self.support]

    def query_ids(self) -> list[int]:
        return [img.image_id for img in self.query]

    def fingerprint(self) -> str:
        """Hash of the sampled image ids; equal fingerprints mean identical episodes."""
        text = f"{list(self.class_map)}|{self.support_ids()}|{self.query_ids()}|{list(self.query_labels)}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def sample_episode(
    split: Sequence[AnnotatedImage], spec: EpisodeSpec, rng: np.random.Generator, index: int = 0
) -> Episode:
    groups = group_by_class(split)
    need = spec.k_shot + spec.n_query
    if len(groups) < spec.n_way:
        raise SamplingError(f"split has {len(groups)} classes, episode needs {spec.n_way}")
    for label, imgs in groups.items():
        if len(imgs) < need:
            raise SamplingError(f"class {label} has {len(imgs)} images, episode needs {need}")

    labels = list(groups)
    drawn = rng.choice(len(labels), size=spec.n_way, replace=False)
    support, query, query_labels, class_map = [], [], [], []
    for local, pick in enumerate(drawn):
        label = labels[int(pick)]
        imgs = groups[label]
        order = rng.permutation(len(imgs))[:need]
        support.append(tuple(imgs[i] for i in order[: spec.k_shot]))
        query.extend(imgs[i] for i in order[spec.k_shot :])
        query_labels.extend([local] * spec.n_query)
        class_map.append(label)
    return Episode(tuple(support), tuple(query), tuple(query_labels), tuple(class_map), index)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based sub-generator: episode ``index`` of the stream rooted at ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def episode_stream(
    split: Sequence[AnnotatedImage], spec: EpisodeSpec, seed: int, count: int
) -> Iterator[Episode]:
    for i in range(count):
        yield sample_episode(split, spec, episode_rng(seed, i), index=i)
