"""Per-concept cell detectors on top of frozen concept feature maps.

Each detector is a two-layer perceptron scoring one ``c``-vector; the concept
is localized at the best-scoring cell of its head's feature map.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import (
    ConceptBackbone,
    ConceptEmbedding,
    FeatureMap,
    annotation_cell,
    compute_feature_maps,
    map_image_coords_to_cell,
    pick_concept_embedding,
)
from .data import AnnotatedImage, ConceptAnnotation, DatasetBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden: int = 64
    seed: int = 0


@dataclass(frozen=True, eq=False)
class DetectionResult:
    cell: tuple[int, int]
    probability: float
    embedding: ConceptEmbedding


def _mlp(in_dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))


class ConceptDetectors(nn.Module):
    """One binary classifier per concept: ``c -> hidden -> 1`` with a sigmoid output."""

    def __init__(self, n_concepts: int, in_dim: int, hidden: int = 64, positive_class_weight: float = 1.0):
        super().__init__()
        self.n_concepts = n_concepts
        self.in_dim = in_dim
        self.hidden = hidden
        self.positive_class_weight = float(positive_class_weight)
        self.classifiers = nn.ModuleList(_mlp(in_dim, hidden) for _ in range(n_concepts))
        self.stub = [False] * n_concepts

    def make_stub(self, concept_id: int) -> None:
        """Turn a classifier into a constant 0.5 scorer."""
        with torch.no_grad():
            for p in self.classifiers[concept_id].parameters():
                p.zero_()
        self.stub[concept_id] = True

    def logits(self, vectors: torch.Tensor, concept_id: int) -> torch.Tensor:
        return self.classifiers[concept_id](vectors).squeeze(-1)

    def probabilities(self, vectors: np.ndarray, concept_id: int) -> np.ndarray:
        if not 0 <= concept_id < self.n_concepts:
            raise KeyError(f"no detector for concept {concept_id}")
        dtype = self.classifiers[concept_id][0].weight.dtype
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(vectors)).to(dtype)
            return torch.sigmoid(self.logits(x, concept_id)).double().numpy()

    def score_maps(self, maps: np.ndarray) -> np.ndarray:
        """Scores for every cell of every concept map: ``(N, h, w, c)`` -> ``(N, h, w)``."""
        return np.stack([self.probabilities(maps[j], j) for j in range(maps.shape[0])])

    def score_image(self, image: AnnotatedImage, maps: np.ndarray) -> np.ndarray:
        """Hook for callers that score whole images; the learned detectors ignore ``image``."""
        return self.score_maps(maps)


# ---------------------------------------------------------------- examples


def build_detector_examples(
    fmap: FeatureMap, annotation: ConceptAnnotation, image_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Positive vector at the concept's cell, negatives at every other cell.

    An invisible annotation yields two empty arrays.
    """
    h, w, c = fmap.shape
    if not annotation.visible:
        empty = np.zeros((0, c), dtype=fmap.values.dtype)
        return empty, empty.copy()
    if h != w:
        raise ValueError("square feature maps expected")
    row, col = map_image_coords_to_cell(annotation.x, annotation.y, image_size, h)
    flat = fmap.values.reshape(h * w, c)
    target = row * w + col
    mask = np.ones(h * w, dtype=bool)
    mask[target] = False
    return flat[target : target + 1].copy(), flat[mask].copy()


def fit_detector(
    detectors: ConceptDetectors,
    concept_id: int,
    positives: np.ndarray,
    negatives: np.ndarray,
    config: DetectorTrainConfig,
) -> list[float]:
    """Weighted-BCE mini-batch training of one concept's classifier.

    Rows are put in a canonical (lexicographic) order before the seeded
    shuffle, so the result does not depend on the order examples arrive in.
    """
    x = np.concatenate([positives, negatives]).astype(np.float64)
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    order = np.lexsort(np.column_stack([x, y]).T[::-1])
    x, y = x[order], y[order]

    clf = detectors.classifiers[concept_id]
    dtype = clf[0].weight.dtype
    xt = torch.from_numpy(x).to(dtype)
    yt = torch.from_numpy(y).to(dtype)
    gen = torch.Generator().manual_seed(config.seed * 1009 + concept_id)
    with torch.no_grad():
        for layer in clf:
            if isinstance(layer, nn.Linear):
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)
    optimizer = torch.optim.Adam(clf.parameters(), lr=config.learning_rate)
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=torch.tensor(detectors.positive_class_weight, dtype=dtype))
    losses = []
    for _ in range(config.epochs):
        perm = torch.randperm(len(xt), generator=gen)
        total = 0.0
        for start in range(0, len(xt), config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss = loss_fn(clf(xt[idx]).squeeze(-1), yt[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        losses.append(total / max(len(xt), 1))
    return losses


def train_detectors(
    bundle: DatasetBundle,
    backbone: ConceptBackbone,
    config: DetectorTrainConfig | None = None,
    images: Sequence[AnnotatedImage] | None = None,
) -> ConceptDetectors:
    """Train every concept's detector on frozen base-split feature maps.

    The positive class is weighted by ``h*w - 1`` (negatives per positive).
    A concept never visible in the training images gets a constant-0.5 stub
    and a warning.
    """
    config = config or DetectorTrainConfig()
    images = bundle.base_split if images is None else images
    cfg = backbone.config
    for p in backbone.parameters():
        p.requires_grad_(False)
    try:
        maps = compute_feature_maps(backbone, images)
    finally:
        for p in backbone.parameters():
            p.requires_grad_(True)
    m = maps.shape[2]
    detectors = ConceptDetectors(cfg.n_concepts, cfg.channels, config.hidden, positive_class_weight=m * m - 1)
    detectors.to(backbone.dtype)
    for j in range(cfg.n_concepts):
        pos, neg = [], []
        for img_maps, img in zip(maps, images):
            ann = img.annotation(j)
            if ann is None or not ann.visible:
                continue
            p, n = build_detector_examples(FeatureMap(img_maps[j], j), ann, img.width)
            pos.append(p)
            neg.append(n)
        if not pos:
            warnings.warn(f"concept {j} is never visible in the training images; using a constant 0.5 detector")
            detectors.make_stub(j)
            continue
        losses = fit_detector(detectors, j, np.concatenate(pos), np.concatenate(neg), config)
        log.info("detector %d: final loss %.4f", j, losses[-1] if losses else float("nan"))
    detectors.eval()
    return detectors


# ---------------------------------------------------------------- detection


def detect_from_scores(fmap: FeatureMap, scores: np.ndarray, cell: tuple[int, int] | None = None) -> DetectionResult:
    """Detection at the argmax of ``scores`` (row-major first on ties), or at a forced cell."""
    if scores.shape != fmap.shape[:2]:
        raise ValueError(f"scores {scores.shape} do not match map {fmap.shape[:2]}")
    if cell is None:
        flat = int(np.argmax(scores))
        cell = divmod(flat, scores.shape[1])
    prob = float(scores[cell])
    picked = pick_concept_embedding(fmap, cell)
    emb = ConceptEmbedding(picked.vector, fmap.concept_id, "detected", prob)
    return DetectionResult((int(cell[0]), int(cell[1])), prob, emb)


def detect_concept(fmap: FeatureMap, detectors: ConceptDetectors) -> DetectionResult:
    h, w, c = fmap.shape
    scores = detectors.probabilities(fmap.values.reshape(h * w, c), fmap.concept_id).reshape(h, w)
    return detect_from_scores(fmap, scores)


def localization_rate(
    backbone: ConceptBackbone, detectors: ConceptDetectors, images: Sequence[AnnotatedImage]
) -> dict[int, float]:
    """Fraction of visible concept instances whose detected cell is the annotated cell."""
    maps = compute_feature_maps(backbone, images)
    hits = np.zeros(backbone.config.n_concepts)
    counts = np.zeros(backbone.config.n_concepts)
    for img_maps, img in zip(maps, images):
        scores = detectors.score_image(img, img_maps)
        for j in range(img_maps.shape[0]):
            truth = annotation_cell(img, j, img_maps.shape[1])
            if truth is None:
                continue
            counts[j] += 1
            hits[j] += detect_from_scores(FeatureMap(img_maps[j], j), scores[j]).cell == truth
    return {j: float(hits[j] / counts[j]) for j in range(len(counts)) if counts[j]}
