"""Class prototypes per concept and the summed-distance episode classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import softmax

from .backbone import ConceptEmbedding, concept_distances, embeddings_to_array


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """``prototypes[y, k]`` is the prototype of episode class ``y`` for ``concept_ids[k]``."""

    prototypes: np.ndarray  # (Y, N, c) float64
    concept_ids: tuple[int, ...]
    class_map: tuple[int, ...] = ()

    def __post_init__(self):
        if self.prototypes.ndim != 3 or self.prototypes.shape[1] != len(self.concept_ids):
            raise ValueError(f"prototype array {self.prototypes.shape} does not match {len(self.concept_ids)} concepts")
        if self.class_map and len(self.class_map) != self.prototypes.shape[0]:
            raise ValueError("class_map length differs from the number of prototype classes")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]

    def __len__(self) -> int:
        return self.prototypes.shape[0] * self.prototypes.shape[1]

    def prototype(self, y: int, concept_id: int) -> np.ndarray:
        return self.prototypes[y, self.concept_ids.index(concept_id)]


def class_prototypes(per_class: Sequence[np.ndarray]) -> np.ndarray:
    """Mean over each class's ``(K_y, N, c)`` support embeddings -> ``(Y, N, c)``."""
    out = []
    for y, emb in enumerate(per_class):
        if len(emb) == 0:
            raise ValueError(f"class {y} has no support embeddings")
        out.append(np.asarray(emb, dtype=np.float64).mean(axis=0))
    return np.stack(out)


def compute_prototypes(
    support_embeddings: Sequence[Mapping[int, Sequence[ConceptEmbedding]]],
    class_map: Sequence[int] = (),
) -> PrototypeBank:
    """Prototype per (class, concept): the mean of that class's support embeddings.

    ``support_embeddings[y][j]`` lists the concept-``j`` embeddings of class
    ``y``'s support images (GAP fallbacks included).
    """
    if not support_embeddings:
        raise ValueError("no classes in support set")
    concept_ids = tuple(sorted(support_embeddings[0]))
    per_class = []
    for y, by_concept in enumerate(support_embeddings):
        if tuple(sorted(by_concept)) != concept_ids:
            raise ValueError(f"class {y} has concepts {sorted(by_concept)}, expected {list(concept_ids)}")
        columns = []
        for j in concept_ids:
            embs = by_concept[j]
            if len(embs) == 0:
                raise ValueError(f"class {y}, concept {j}: empty embedding list")
            columns.append(np.stack([e.vector for e in embs]))
        sizes = {len(col) for col in columns}
        if len(sizes) == 1:
            per_class.append(np.stack(columns, axis=1))
        else:
            # ragged per-concept counts: average each column on its own
            per_class.append(np.stack([col.mean(axis=0) for col in columns])[None])
    return PrototypeBank(class_prototypes(per_class), concept_ids, tuple(class_map))


def summed_distance_probs(queries: np.ndarray, prototypes: np.ndarray, distance: str = "euclidean") -> np.ndarray:
    """``softmax_y(-sum_j d(q_j, P_yj))`` for queries ``(Q, N, c)`` -> ``(Q, Y)``."""
    totals = concept_distances(queries, prototypes, distance).sum(axis=-1)
    return softmax(-totals, axis=-1)


def classify_query_training(
    query_embeddings: Mapping[int, ConceptEmbedding], bank: PrototypeBank, distance: str = "euclidean"
) -> np.ndarray:
    q = embeddings_to_array(query_embeddings, bank.concept_ids)
    return summed_distance_probs(q[None], bank.prototypes, distance)[0]
