"""Presence-weighted aggregation of per-concept prototype distances.

A query's distance to class ``y`` is the weighted mean over concepts of
``d(e_j, P_yj)``; class scores are ``softmax(-D_y)``.  The weight of a concept
depends on the mode: detector probability, its inverse, a constant, or (oracle)
a constant with ground-truth concept cells.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import softmax

from .backbone import (
    ConceptBackbone,
    ConceptEmbedding,
    FeatureMap,
    annotation_cell,
    compute_feature_maps,
    concept_distances,
    embed_from_maps,
    embeddings_to_array,
    gap_embedding,
    pick_concept_embedding,
)
from .data import AnnotatedImage, ConceptSpec
from .detector import ConceptDetectors, detect_from_scores
from .prototypes import PrototypeBank, compute_prototypes

INVERSE_EPS = 1e-6
EXPLANATION_SCHEMA = 1


class WeightingMode(str, enum.Enum):
    PROBABILITY = "probability"
    INVERSE_PROBABILITY = "inverse_probability"
    EQUAL = "equal"
    ORACLE = "oracle"


def concept_weight(mode: WeightingMode, probability: float) -> float:
    mode = WeightingMode(mode)
    if mode is WeightingMode.PROBABILITY:
        return float(probability)
    if mode is WeightingMode.INVERSE_PROBABILITY:
        return 1.0 / max(float(probability), INVERSE_EPS)
    return 1.0


def effective_weights(weights: np.ndarray) -> np.ndarray:
    """Validate weights ``(..., N)``; rows summing to zero become all-ones."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("concept weights must be finite and nonnegative")
    zero = w.sum(axis=-1) == 0
    if np.any(zero):
        w = w.copy()
        w[zero] = 1.0
    return w


def weighted_class_distances(distances: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``D_y = sum_j w_j d_yj / sum_j w_j`` for distances ``(..., Y, N)`` and weights ``(..., N)``."""
    w = effective_weights(weights)
    num = (np.asarray(distances, dtype=np.float64) * w[..., None, :]).sum(axis=-1)
    return num / w.sum(axis=-1)[..., None]


def aggregate_distance(
    embeddings: Mapping[int, ConceptEmbedding],
    weights: Mapping[int, float],
    bank: PrototypeBank,
    y: int,
    distance: str = "euclidean",
) -> float:
    if set(weights) != set(bank.concept_ids):
        raise KeyError(f"weight keys {sorted(weights)} do not match bank concepts {list(bank.concept_ids)}")
    q = embeddings_to_array(embeddings, bank.concept_ids)
    d = concept_distances(q[None], bank.prototypes[y : y + 1], distance)[0, 0]
    w = np.array([weights[j] for j in bank.concept_ids], dtype=np.float64)
    return float(weighted_class_distances(d[None], w)[0])


# ---------------------------------------------------------------- classification


@dataclass
class ConceptDecision:
    concept_id: int
    cell: tuple[int, int] | None  # None for a GAP fallback
    source: str
    weight: float
    normalized_weight: float
    probability: float | None
    distances: list[float]  # to each episode class


@dataclass
class ClassificationResult:
    predicted_class: int
    class_scores: np.ndarray
    class_distances: np.ndarray
    per_concept: list[ConceptDecision]
    mode: WeightingMode


def classify_from_maps(
    maps: np.ndarray,
    scores: np.ndarray | None,
    query: AnnotatedImage,
    bank: PrototypeBank,
    mode: WeightingMode,
    distance: str = "euclidean",
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ClassificationResult:
    """Classify one query from its precomputed ``(N, h, w, c)`` concept maps.

    ``scores`` holds detector probabilities per cell ``(N, h, w)`` and is
    ignored in oracle mode.  With ``noise > 0`` each detection is replaced,
    with that probability, by a uniformly random cell (drawn from ``rng``).
    """
    mode = WeightingMode(mode)
    map_size = maps.shape[1]
    if mode is WeightingMode.ORACLE and not query.annotations:
        raise ValueError(f"oracle mode needs query annotations (image {query.image_id} has none)")
    if mode is not WeightingMode.ORACLE and scores is None:
        raise ValueError(f"{mode.value} mode needs detector scores")
    if noise > 0 and rng is None:
        raise ValueError("detector noise needs an rng")

    embs, weights, cells, probs = {}, [], [], []
    for j in bank.concept_ids:
        fmap = FeatureMap(maps[j], j)
        if mode is WeightingMode.ORACLE:
            cell = annotation_cell(query, j, map_size)
            embs[j] = gap_embedding(fmap) if cell is None else pick_concept_embedding(fmap, cell)
            weights.append(1.0)
            probs.append(None)
        else:
            forced = None
            if noise > 0 and rng.random() < noise:
                forced = (int(rng.integers(map_size)), int(rng.integers(map_size)))
            det = detect_from_scores(fmap, scores[j], forced)
            cell = det.cell
            embs[j] = det.embedding
            weights.append(concept_weight(mode, det.probability))
            probs.append(det.probability)
        cells.append(cell)

    q = embeddings_to_array(embs, bank.concept_ids)
    dist = concept_distances(q[None], bank.prototypes, distance)[0]  # (Y, N)
    w = np.array(weights)
    eff = effective_weights(w)
    class_distances = weighted_class_distances(dist, w)
    class_scores = softmax(-class_distances)
    norm = eff / eff.sum()
    per_concept = [
        ConceptDecision(
            concept_id=j,
            cell=cells[k],
            source=embs[j].source,
            weight=float(w[k]),
            normalized_weight=float(norm[k]),
            probability=probs[k],
            distances=[float(v) for v in dist[:, k]],
        )
        for k, j in enumerate(bank.concept_ids)
    ]
    return ClassificationResult(int(np.argmax(class_scores)), class_scores, class_distances, per_concept, mode)


def classify(
    model: ConceptBackbone,
    detectors: ConceptDetectors | None,
    bank: PrototypeBank,
    query: AnnotatedImage,
    mode: WeightingMode = WeightingMode.PROBABILITY,
) -> ClassificationResult:
    """Classify an image; outside oracle mode its annotations are never read."""
    mode = WeightingMode(mode)
    maps = compute_feature_maps(model, [query])[0]
    scores = None
    if mode is not WeightingMode.ORACLE:
        if detectors is None:
            raise ValueError(f"{mode.value} mode needs trained detectors")
        bare = query.replace(annotations=())
        scores = detectors.score_image(bare, maps)
        query = bare
    return classify_from_maps(maps, scores, query, bank, mode, model.distance)


def build_prototype_bank_novel(
    model: ConceptBackbone, support: Sequence[Sequence[AnnotatedImage]], class_map: Sequence[int] = ()
) -> PrototypeBank:
    """Prototypes from an annotated support set (GAP for invisible concepts)."""
    per_class = []
    for group in support:
        maps = compute_feature_maps(model, list(group))
        by_concept: dict[int, list[ConceptEmbedding]] = {j: [] for j in range(model.config.n_concepts)}
        for img_maps, img in zip(maps, group):
            for j, emb in embed_from_maps(img_maps, img).items():
                by_concept[j].append(emb)
        per_class.append(by_concept)
    return compute_prototypes(per_class, class_map)


# ---------------------------------------------------------------- explanation


@dataclass
class ConceptExplanation:
    concept_id: int
    name: str
    weight: float
    normalized_weight: float
    cell: list[int] | None
    source: str
    probability: float | None
    distances: list[float]
    nearest_class: int
    contributions: list[float]  # normalized_weight * distance, per class


@dataclass
class Explanation:
    mode: str
    predicted_class: int
    predicted_label: int | None
    class_labels: list[int]
    class_scores: list[float]
    class_distances: list[float]
    concepts: list[ConceptExplanation]
    episode_id: str | None = None
    query_id: int | None = None
    schema_version: int = EXPLANATION_SCHEMA

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Explanation":
        doc = dict(doc)
        if doc.get("schema_version") != EXPLANATION_SCHEMA:
            raise ValueError(f"unsupported explanation schema {doc.get('schema_version')}")
        doc["concepts"] = [ConceptExplanation(**c) for c in doc["concepts"]]
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Explanation":
        return cls.from_dict(json.loads(text))

    def render_text(self) -> str:
        labels = [str(lab) for lab in self.class_labels]
        width = max(10, *(len(s) for s in labels))
        head = f"{'concept':<12} {'weight':>8} {'cell':>7} {'nearest':>{width}} " + " ".join(
            f"{s:>{width}}" for s in labels
        )
        lines = [
            f"mode: {self.mode}   predicted: class {self.predicted_class} (label {self.predicted_label})",
            "contribution of each concept to each class distance:",
            head,
            "-" * len(head),
        ]
        for c in self.concepts:
            cell = "gap" if c.cell is None else f"{c.cell[0]},{c.cell[1]}"
            lines.append(
                f"{c.name[:12]:<12} {c.normalized_weight:>8.3f} {cell:>7} {self.class_labels[c.nearest_class]:>{width}} "
                + " ".join(f"{v:>{width}.4f}" for v in c.contributions)
            )
        lines.append("-" * len(head))
        lines.append(f"{'distance':<12} {'':>8} {'':>7} {'':>{width}} " + " ".join(f"{v:>{width}.4f}" for v in self.class_distances))
        lines.append(f"{'score':<12} {'':>8} {'':>7} {'':>{width}} " + " ".join(f"{v:>{width}.4f}" for v in self.class_scores))
        return "\n".join(lines) + "\n"


def explain(
    result: ClassificationResult,
    concept_specs: Sequence[ConceptSpec],
    class_map: Sequence[int] = (),
    episode_id: str | None = None,
    query_id: int | None = None,
) -> Explanation:
    names = {c.concept_id: c.name for c in concept_specs}
    n_classes = len(result.class_scores)
    labels = list(class_map) if class_map else list(range(n_classes))
    concepts = []
    for dec in result.per_concept:
        d = np.asarray(dec.distances)
        concepts.append(
            ConceptExplanation(
                concept_id=dec.concept_id,
                name=names.get(dec.concept_id, f"concept{dec.concept_id}"),
                weight=dec.weight,
                normalized_weight=dec.normalized_weight,
                cell=None if dec.cell is None else [int(dec.cell[0]), int(dec.cell[1])],
                source=dec.source,
                probability=dec.probability,
                distances=[float(v) for v in d],
                nearest_class=int(np.argmin(d)),
                contributions=[float(dec.normalized_weight * v) for v in d],
            )
        )
    return Explanation(
        mode=WeightingMode(result.mode).value,
        predicted_class=result.predicted_class,
        predicted_label=int(labels[result.predicted_class]),
        class_labels=[int(v) for v in labels],
        class_scores=[float(v) for v in result.class_scores],
        class_distances=[float(v) for v in result.class_distances],
        concepts=concepts,
        episode_id=episode_id,
        query_id=query_id,
    )
