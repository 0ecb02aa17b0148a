"""Episodic training of the concept learners."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import (
    BackboneConfig,
    ConceptBackbone,
    annotation_cells,
    compute_feature_maps,
    concept_distances_torch,
    embed_from_maps,
    gather_annotated,
)
from .data import AnnotatedImage, ConceptAnnotation, DatasetBundle
from .episodes import EpisodeSpec, Episode, episode_stream
from .errors import TrainingError
from .prototypes import class_prototypes, summed_distance_probs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationConfig:
    random_crop: bool = True
    crop_padding: int = 8
    rotation: bool = True
    max_rotation: float = 15.0  # degrees
    horizontal_flip: bool = True
    flip_probability: float = 0.5
    color_jitter: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.max_rotation <= 180.0:
            raise ValueError("max_rotation must be within [0, 180] degrees")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @classmethod
    def none(cls) -> "AugmentationConfig":
        return cls(random_crop=False, rotation=False, horizontal_flip=False, color_jitter=False)

    @property
    def enabled(self) -> bool:
        return self.random_crop or self.rotation or self.horizontal_flip or self.color_jitter


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    episodes_per_epoch: int = 100
    max_epochs: int = 100
    val_episodes: int = 100
    patience: int = 10
    episode_spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    seed: int = 0
    distance: str = "euclidean"

    def __post_init__(self):
        # zero is allowed: it is the "no update" control run
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1 or self.episodes_per_epoch < 1 or self.val_episodes < 1:
            raise ValueError("max_epochs, episodes_per_epoch and val_episodes must be >= 1")


# ---------------------------------------------------------------- augmentation

_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _translate(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def _warp(pixels: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Resample so that input point ``(x, y)`` lands at ``forward @ (x, y, 1)``."""
    inv = np.linalg.inv(forward)
    # ndimage indexes (row, col) = (y, x)
    matrix = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    offset = np.array([inv[1, 2], inv[0, 2]])
    return np.stack(
        [
            ndimage.affine_transform(pixels[..., ch], matrix, offset, order=1, mode="constant", cval=0.0)
            for ch in range(pixels.shape[2])
        ],
        axis=-1,
    )


def _jitter(pixels: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    px = pixels * np.float32(rng.uniform(1 - aug.brightness, 1 + aug.brightness))
    mean = np.float32((px @ _GRAY).mean())
    px = (px - mean) * np.float32(rng.uniform(1 - aug.contrast, 1 + aug.contrast)) + mean
    gray = (px @ _GRAY)[..., None]
    px = (px - gray) * np.float32(rng.uniform(1 - aug.saturation, 1 + aug.saturation)) + gray
    return np.clip(px, 0.0, 1.0).astype(np.float32)


def augment(image: AnnotatedImage, aug: AugmentationConfig, rng: np.random.Generator) -> AnnotatedImage:
    """Random crop/rotation/flip/color jitter with annotations moved alongside.

    Annotations that leave the frame become invisible.
    """
    if not aug.enabled:
        return image
    h, w = image.height, image.width
    forward = np.eye(3)
    if aug.horizontal_flip and rng.random() < aug.flip_probability:
        forward = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ forward
    if aug.rotation and aug.max_rotation > 0:
        theta = np.deg2rad(rng.uniform(-aug.max_rotation, aug.max_rotation))
        cos, sin = np.cos(theta), np.sin(theta)
        rot = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        forward = _translate(cx, cy) @ rot @ _translate(-cx, -cy) @ forward
    if aug.random_crop and aug.crop_padding > 0:
        # pad-then-crop is a shift by up to crop_padding pixels
        dx, dy = rng.integers(-aug.crop_padding, aug.crop_padding + 1, size=2)
        forward = _translate(float(dx), float(dy)) @ forward

    pixels = image.pixels
    if not np.array_equal(forward, np.eye(3)):
        pixels = _warp(pixels, forward)
    if aug.color_jitter:
        pixels = _jitter(pixels, aug, rng)

    anns = []
    for ann in image.annotations:
        if not ann.visible:
            anns.append(ann)
            continue
        x, y, _ = forward @ np.array([ann.x, ann.y, 1.0])
        if 0 <= x < w and 0 <= y < h:
            anns.append(ConceptAnnotation(ann.concept_id, float(x), float(y), True))
        else:
            anns.append(ConceptAnnotation(ann.concept_id, float(x), float(y), False))
    return image.replace(pixels=pixels.astype(np.float32), annotations=tuple(anns))


# ---------------------------------------------------------------- loss


def episode_loss(
    model: ConceptBackbone,
    episode: Episode,
    aug: AugmentationConfig | None = None,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Mean negative log-likelihood of the true class over the episode's queries.

    Support and queries are embedded with annotated extraction (pick at the
    concept's cell, GAP when invisible); class probabilities are the softmax of
    minus the distance summed over concepts.
    """
    images = episode.support_flat() + list(episode.query)
    if aug is not None and aug.enabled:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        images = [augment(img, aug, rng) for img in images]
    cfg = model.config
    maps = model(model.preprocess(np.stack([img.pixels for img in images])))
    cells, visible = annotation_cells(images, cfg.n_concepts, maps.shape[-1])
    emb = gather_annotated(maps, cells, visible)
    n_way, k_shot = episode.n_way, episode.k_shot
    n_support = n_way * k_shot
    prototypes = emb[:n_support].reshape(n_way, k_shot, cfg.n_concepts, -1).mean(dim=1)
    logits = -concept_distances_torch(emb[n_support:], prototypes, model.distance).sum(dim=-1)
    labels = torch.tensor(episode.query_labels, dtype=torch.long)
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------- validation


def annotated_embedding_array(maps: np.ndarray, images: Sequence[AnnotatedImage]) -> np.ndarray:
    """Annotated embeddings for many images, ``(B, N, c)`` float64."""
    out = []
    for img_maps, img in zip(maps, images):
        emb = embed_from_maps(img_maps, img)
        out.append(np.stack([emb[j].vector for j in range(len(emb))]))
    return np.stack(out)


def oracle_accuracy(
    model: ConceptBackbone,
    split: Sequence[AnnotatedImage],
    spec: EpisodeSpec,
    seed: int,
    n_episodes: int,
) -> float:
    """Mean episode accuracy with ground-truth concept cells for the queries."""
    index = {img.image_id: i for i, img in enumerate(split)}
    emb = annotated_embedding_array(compute_feature_maps(model, split), split)
    accs = []
    for ep in episode_stream(split, spec, seed, n_episodes):
        protos = class_prototypes([emb[[index[i] for i in ids]] for ids in ep.support_ids()])
        probs = summed_distance_probs(emb[[index[i] for i in ep.query_ids()]], protos, model.distance)
        accs.append(float(np.mean(probs.argmax(axis=1) == np.asarray(ep.query_labels))))
    return float(np.mean(accs))


# ---------------------------------------------------------------- loop


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def train_concept_learners(
    bundle: DatasetBundle,
    config: TrainConfig,
    aug: AugmentationConfig | None = None,
    backbone_config: BackboneConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ConceptBackbone, list[dict]]:
    """Train the trunk and heads on base-class episodes with Adam.

    After each epoch the model is scored on ``val_episodes`` fixed validation
    episodes (ground-truth query annotations); the best-scoring weights are
    returned along with one log record per epoch.  Training stops early after
    ``patience`` epochs without improvement.
    """
    aug = aug or AugmentationConfig()
    bcfg = backbone_config or BackboneConfig(input_size=bundle.image_size, n_concepts=bundle.n_concepts)
    if bcfg.n_concepts != bundle.n_concepts or bcfg.input_size != bundle.image_size:
        raise ValueError("backbone config does not match the bundle's concepts or image size")
    model = ConceptBackbone.create(
        bcfg, seed=config.seed, norm_mean=bundle.norm_mean, norm_std=bundle.norm_std, distance=config.distance
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    aug_rng = np.random.default_rng(derive_seed(config.seed, 1))
    val_seed = derive_seed(config.seed, 2)

    best_acc, best_state, stale = -1.0, copy.deepcopy(model.state_dict()), 0
    records = []
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        model.train()
        losses = []
        stream = episode_stream(
            bundle.base_split, config.episode_spec, derive_seed(config.seed, 3, epoch), config.episodes_per_epoch
        )
        for ep in stream:
            loss = episode_loss(model, ep, aug, aug_rng)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, episode {ep.index} "
                    f"(classes {list(ep.class_map)})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        val_acc = oracle_accuracy(model, bundle.val_split, config.episode_spec, val_seed, config.val_episodes)
        record = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "val_accuracy": val_acc,
            "wall_time": time.perf_counter() - start,
        }
        records.append(record)
        log.info("epoch %d loss %.4f val %.4f", epoch, record["mean_loss"], val_acc)
        if on_epoch is not None:
            on_epoch(record)
        if val_acc > best_acc:
            best_acc, best_state, stale = val_acc, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, records
