from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from conceptfsl.backbone import BackboneConfig, ConceptBackbone
from conceptfsl.data import AnnotatedImage, ConceptAnnotation, SyntheticConfig, generate_synthetic_dataset

torch.set_num_threads(1)

TINY_SYNTH = SyntheticConfig(
    n_base_classes=6, n_val_classes=5, n_novel_classes=5, images_per_class=8, image_size=32, grid_size=4
)


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate_synthetic_dataset(TINY_SYNTH, seed=0)


def make_backbone(size=32, channels=8, n_concepts=3, seed=0, **kw):
    cfg = BackboneConfig(input_size=size, n_blocks_shared=3, n_blocks_head=1, channels=channels, n_concepts=n_concepts)
    return ConceptBackbone.create(cfg, seed=seed, norm_mean=(0.5,) * 3, norm_std=(0.25,) * 3, **kw)


def random_image(rng, size=32, label=0, image_id=0, n_concepts=3, visible=None):
    visible = visible if visible is not None else [True] * n_concepts
    anns = tuple(
        ConceptAnnotation(j, float(rng.integers(size)), float(rng.integers(size)), bool(v))
        for j, v in enumerate(visible)
    )
    return AnnotatedImage(rng.random((size, size, 3)).astype(np.float32), label, anns, image_id)


def write_cub(
    root: Path,
    n_classes: int,
    images_per_class: int = 1,
    n_parts: int = 15,
    image_size: tuple[int, int] = (8, 8),
    locs: dict[int, list[tuple[int, float, float, int]]] | None = None,
    sizes: dict[int, tuple[int, int]] | None = None,
) -> Path:
    """Minimal CUB-200-2011 layout with solid-color images."""
    (root / "images").mkdir(parents=True)
    (root / "parts").mkdir()
    images, labels, classes, part_rows = [], [], [], []
    image_id = 1
    for c in range(1, n_classes + 1):
        name = f"{c:03d}.Class_{c}"
        classes.append(f"{c} {name}")
        (root / "images" / name).mkdir()
        for k in range(images_per_class):
            rel = f"{name}/img_{k}.png"
            w, h = (sizes or {}).get(image_id, image_size)
            Image.new("RGB", (w, h), (c % 256, 40, 90)).save(root / "images" / rel)
            images.append(f"{image_id} {rel}")
            labels.append(f"{image_id} {c}")
            rows = (locs or {}).get(image_id)
            if rows is None:
                rows = [(p, w / 2, h / 2, 1) for p in range(1, n_parts + 1)]
            part_rows += [f"{image_id} {p} {x} {y} {v}" for p, x, y, v in rows]
            image_id += 1
    (root / "images.txt").write_text("\n".join(images) + "\n")
    (root / "image_class_labels.txt").write_text("\n".join(labels) + "\n")
    (root / "classes.txt").write_text("\n".join(classes) + "\n")
    (root / "parts" / "parts.txt").write_text("\n".join(f"{p} part_{p}" for p in range(1, n_parts + 1)) + "\n")
    (root / "parts" / "part_locs.txt").write_text("\n".join(part_rows) + "\n")
    return root


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
