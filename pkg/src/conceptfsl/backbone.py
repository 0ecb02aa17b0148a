"""Concept learners: a shared Conv-4 trunk with one head per concept.

The embedding network for concept ``j`` is ``heads[j] ∘ trunk``.  Feature maps
leave torch as numpy arrays laid out ``(h, w, c)``; concept embeddings are
float64 vectors of length ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import AnnotatedImage, IMAGENET_MEAN, IMAGENET_STD

EmbeddingSource = Literal["picked", "gap", "detected"]
DISTANCES = ("euclidean", "sqeuclidean")


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 84
    n_blocks_shared: int = 3
    n_blocks_head: int = 1
    channels: int = 64
    n_concepts: int = 15

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.n_concepts < 1:
            raise ValueError("n_concepts must be >= 1")
        if self.n_blocks_shared < 0 or self.n_blocks_head < 1:
            raise ValueError("need n_blocks_shared >= 0 and n_blocks_head >= 1")
        if self.map_size < 1:
            raise ValueError(f"input_size {self.input_size} too small for {self.n_blocks} pooling blocks")

    @property
    def n_blocks(self) -> int:
        return self.n_blocks_shared + self.n_blocks_head

    @property
    def map_size(self) -> int:
        size = self.input_size
        for _ in range(self.n_blocks):
            size //= 2
        return size


def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class ConceptBackbone(nn.Module):
    """Shared trunk ``h`` and per-concept heads ``g_j``.

    ``forward`` returns all concept maps at once, shape ``(B, N, c, h, w)``;
    the trunk runs once per batch.  Normalization constants are buffers so they
    are saved with the weights.
    """

    def __init__(
        self,
        config: BackboneConfig,
        norm_mean: Sequence[float] = IMAGENET_MEAN,
        norm_std: Sequence[float] = IMAGENET_STD,
        distance: str = "euclidean",
    ):
        super().__init__()
        if distance not in DISTANCES:
            raise ValueError(f"unknown distance {distance!r}; expected one of {DISTANCES}")
        self.config = config
        self.distance = distance
        c = config.channels
        trunk = []
        for i in range(config.n_blocks_shared):
            trunk.append(conv_block(3 if i == 0 else c, c))
        self.trunk = nn.Sequential(*trunk)
        head_in = 3 if config.n_blocks_shared == 0 else c
        self.heads = nn.ModuleList(
            nn.Sequential(*[conv_block(head_in if i == 0 else c, c) for i in range(config.n_blocks_head)])
            for _ in range(config.n_concepts)
        )
        self.register_buffer("norm_mean", torch.tensor(norm_mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("norm_std", torch.tensor(norm_std, dtype=torch.float32).view(1, 3, 1, 1))

    @classmethod
    def create(cls, config: BackboneConfig, seed: int = 0, **kwargs) -> "ConceptBackbone":
        """Build with a seeded initialization, leaving the global torch RNG untouched."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(config, **kwargs)

    @property
    def dtype(self) -> torch.dtype:
        return self.norm_mean.dtype

    def preprocess(self, pixels: np.ndarray) -> torch.Tensor:
        """``(B, H, W, 3)`` or ``(H, W, 3)`` pixels in [0, 1] to a normalized NCHW tensor."""
        arr = np.asarray(pixels)
        if arr.ndim == 3:
            arr = arr[None]
        size = self.config.input_size
        if arr.shape[1:] != (size, size, 3):
            raise ValueError(f"expected images of shape ({size}, {size}, 3), got {arr.shape[1:]}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.dtype)
        return (x - self.norm_mean) / self.norm_std

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shared = self.trunk(x)
        return torch.stack([head(shared) for head in self.heads], dim=1)

    def concept_map(self, x: torch.Tensor, concept_id: int) -> torch.Tensor:
        return self.heads[concept_id](self.trunk(x))


# ---------------------------------------------------------------- feature maps


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray  # (h, w, c)
    concept_id: int

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"feature map must be (h, w, c) with positive sizes, got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class ConceptEmbedding:
    vector: np.ndarray
    concept_id: int
    source: EmbeddingSource
    detector_probability: float | None = None

    def __post_init__(self):
        if self.source not in ("picked", "gap", "detected"):
            raise ValueError(f"unknown embedding source {self.source!r}")
        if (self.detector_probability is None) != (self.source != "detected"):
            raise ValueError("detector_probability is set exactly when source is 'detected'")
        if self.detector_probability is not None and not 0.0 <= self.detector_probability <= 1.0:
            raise ValueError(f"detector probability {self.detector_probability} outside [0, 1]")


class _eval_mode:
    def __init__(self, module: nn.Module):
        self.module = module

    def __enter__(self):
        self.was_training = self.module.training
        self.module.eval()
        self.grad = torch.no_grad()
        self.grad.__enter__()

    def __exit__(self, *exc):
        self.grad.__exit__(*exc)
        self.module.train(self.was_training)


def forward_feature_map(model: ConceptBackbone, pixels: np.ndarray, concept_id: int) -> FeatureMap:
    """``g_j(h(image))`` for one image, in inference mode."""
    if not 0 <= concept_id < model.config.n_concepts:
        raise ValueError(f"concept_id {concept_id} out of range [0, {model.config.n_concepts})")
    x = model.preprocess(pixels)
    if x.shape[0] != 1:
        raise ValueError("forward_feature_map takes a single image")
    with _eval_mode(model):
        out = model.concept_map(x, concept_id)[0]
    return FeatureMap(out.permute(1, 2, 0).numpy().copy(), concept_id)


def compute_feature_maps(model: ConceptBackbone, images: Sequence[AnnotatedImage], batch_size: int = 64) -> np.ndarray:
    """All concept maps for many images: ``(B, N, h, w, c)``, inference mode."""
    chunks = []
    with _eval_mode(model):
        for start in range(0, len(images), batch_size):
            batch = np.stack([img.pixels for img in images[start : start + batch_size]])
            maps = model(model.preprocess(batch))
            chunks.append(maps.permute(0, 1, 3, 4, 2).numpy())
    if not chunks:
        m, c = model.config.map_size, model.config.channels
        return np.zeros((0, model.config.n_concepts, m, m, c), dtype=np.float32)
    return np.concatenate(chunks)


def map_image_coords_to_cell(x: float, y: float, image_size: int, map_size: int) -> tuple[int, int]:
    if not (0 <= x < image_size and 0 <= y < image_size):
        raise ValueError(f"coordinates ({x}, {y}) outside a {image_size}px image")
    row = min(max(math.floor(y * map_size / image_size), 0), map_size - 1)
    col = min(max(math.floor(x * map_size / image_size), 0), map_size - 1)
    return row, col


def pick_concept_embedding(fmap: FeatureMap, cell: tuple[int, int]) -> ConceptEmbedding:
    row, col = cell
    h, w, _ = fmap.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"cell {cell} outside a {h}x{w} feature map")
    return ConceptEmbedding(fmap.values[row, col].astype(np.float64), fmap.concept_id, "picked")


def gap_embedding(fmap: FeatureMap) -> ConceptEmbedding:
    vector = fmap.values.astype(np.float64).mean(axis=(0, 1))
    return ConceptEmbedding(vector, fmap.concept_id, "gap")


def annotation_cell(image: AnnotatedImage, concept_id: int, map_size: int) -> tuple[int, int] | None:
    """Ground-truth cell of a concept, or ``None`` when absent or not visible."""
    ann = image.annotation(concept_id)
    if ann is None or not ann.visible:
        return None
    return map_image_coords_to_cell(ann.x, ann.y, image.width, map_size)


def embed_from_maps(maps: np.ndarray, image: AnnotatedImage) -> dict[int, ConceptEmbedding]:
    """Annotated extraction from precomputed ``(N, h, w, c)`` maps: pick if visible, else GAP."""
    out = {}
    for j in range(maps.shape[0]):
        fmap = FeatureMap(maps[j], j)
        cell = annotation_cell(image, j, maps.shape[1])
        out[j] = gap_embedding(fmap) if cell is None else pick_concept_embedding(fmap, cell)
    return out


def embed_concepts_annotated(model: ConceptBackbone, image: AnnotatedImage) -> dict[int, ConceptEmbedding]:
    return embed_from_maps(compute_feature_maps(model, [image])[0], image)


# ---------------------------------------------------------------- batched (training) path


def annotation_cells(images: Sequence[AnnotatedImage], n_concepts: int, map_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth cells ``(B, N, 2)`` and visibility ``(B, N)`` for a batch."""
    cells = np.zeros((len(images), n_concepts, 2), dtype=np.int64)
    visible = np.zeros((len(images), n_concepts), dtype=bool)
    for b, img in enumerate(images):
        for j in range(n_concepts):
            cell = annotation_cell(img, j, map_size)
            if cell is not None:
                cells[b, j] = cell
                visible[b, j] = True
    return cells, visible


def gather_annotated(maps: torch.Tensor, cells: np.ndarray, visible: np.ndarray) -> torch.Tensor:
    """Differentiable annotated extraction: ``(B, N, c, h, w)`` maps to ``(B, N, c)``."""
    b_idx = torch.arange(maps.shape[0])[:, None]
    j_idx = torch.arange(maps.shape[1])[None, :]
    rows = torch.from_numpy(cells[..., 0])
    cols = torch.from_numpy(cells[..., 1])
    picked = maps[b_idx, j_idx, :, rows, cols]
    pooled = maps.mean(dim=(-2, -1))
    return torch.where(torch.from_numpy(visible)[..., None], picked, pooled)


def concept_distances_torch(queries: torch.Tensor, prototypes: torch.Tensor, distance: str) -> torch.Tensor:
    """``(Q, N, c)`` against ``(Y, N, c)`` -> per-concept distances ``(Q, Y, N)``."""
    diff = queries[:, None] - prototypes[None]
    if distance == "sqeuclidean":
        return diff.pow(2).sum(-1)
    return torch.linalg.vector_norm(diff, dim=-1)


def concept_distances(queries: np.ndarray, prototypes: np.ndarray, distance: str = "euclidean") -> np.ndarray:
    """Numpy twin of :func:`concept_distances_torch`, float64."""
    diff = np.asarray(queries, dtype=np.float64)[:, None] - np.asarray(prototypes, dtype=np.float64)[None]
    sq = np.einsum("qync,qync->qyn", diff, diff)
    if distance == "sqeuclidean":
        return sq
    if distance == "euclidean":
        return np.sqrt(sq)
    raise ValueError(f"unknown distance {distance!r}")


def embeddings_to_array(embeddings: Mapping[int, ConceptEmbedding], concept_ids: Sequence[int]) -> np.ndarray:
    missing = [j for j in concept_ids if j not in embeddings]
    extra = sorted(set(embeddings) - set(concept_ids))
    if missing or extra:
        raise KeyError(f"concept mismatch: missing {missing}, unexpected {extra}")
    return np.stack([embeddings[j].vector for j in concept_ids])
