"""Dataset schema, CUB-200-2011 ingestion, synthetic data and validation.

Pixels are stored as float32 ``(height, width, 3)`` arrays in ``[0, 1]``; the
per-channel mean/std used by the backbone travels in ``bundle.metadata``.
Annotation coordinates are pixel positions with ``x`` horizontal and ``y``
vertical, both measured at the bundle's image size.
"""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import _archive
from .config import read_kv_file, update_dataclass
from .errors import ConfigError, DataError

SPLITS = ("base", "val", "novel")
BUNDLE_FORMAT = "conceptfsl-bundle"
BUNDLE_FORMAT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CUB_REQUIRED = ("images.txt", "image_class_labels.txt", "parts/parts.txt", "parts/part_locs.txt")


@dataclass(frozen=True)
class ConceptSpec:
    concept_id: int
    name: str


@dataclass(frozen=True)
class ConceptAnnotation:
    """Center location of one concept; ``x``/``y`` are meaningless when not visible."""

    concept_id: int
    x: float
    y: float
    visible: bool


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    pixels: np.ndarray
    class_label: int
    annotations: tuple[ConceptAnnotation, ...] = ()
    image_id: int = -1

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"image {self.image_id}: expected (H, W, 3) pixels, got {self.pixels.shape}")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        seen = set()
        for ann in self.annotations:
            if ann.concept_id in seen:
                raise DataError(f"image {self.image_id}: duplicate annotation for concept {ann.concept_id}")
            seen.add(ann.concept_id)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def annotation(self, concept_id: int) -> ConceptAnnotation | None:
        for ann in self.annotations:
            if ann.concept_id == concept_id:
                return ann
        return None

    def replace(self, **changes) -> "AnnotatedImage":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    concept_specs: tuple[ConceptSpec, ...]
    base_split: tuple[AnnotatedImage, ...]
    val_split: tuple[AnnotatedImage, ...]
    novel_split: tuple[AnnotatedImage, ...]
    class_names: Mapping[int, str]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("concept_specs", "base_split", "val_split", "novel_split"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def n_concepts(self) -> int:
        return len(self.concept_specs)

    @property
    def image_size(self) -> int:
        return int(self.metadata["image_size"])

    @property
    def norm_mean(self) -> tuple[float, ...]:
        return tuple(self.metadata.get("norm_mean", IMAGENET_MEAN))

    @property
    def norm_std(self) -> tuple[float, ...]:
        return tuple(self.metadata.get("norm_std", IMAGENET_STD))

    def split(self, name: str) -> tuple[AnnotatedImage, ...]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, f"{name}_split")

    def labels(self, name: str) -> set[int]:
        return {img.class_label for img in self.split(name)}


# ---------------------------------------------------------------- coordinates


def rescale_coordinate(value: float, src_size: int, dst_size: int) -> int:
    """Proportional rescale, rounded half-up and clamped to ``[0, dst_size)``."""
    scaled = math.floor(value * dst_size / src_size + 0.5)
    return min(max(scaled, 0), dst_size - 1)


# ---------------------------------------------------------------- split files


def parse_split_text(text: str, source: str = "<split>") -> dict[str, list[str]]:
    """Parse ``[base]``/``[val]``/``[novel]`` sections listing one class name per line."""
    splits: dict[str, list[str]] = {name: [] for name in SPLITS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in splits:
                raise DataError(f"{source}:{lineno}: unknown split header {line}")
            continue
        if current is None:
            raise DataError(f"{source}:{lineno}: class name before any split header")
        splits[current].append(line)
    return splits


def read_split_file(path: str | Path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing split file: {path}")
    return parse_split_text(path.read_text(), str(path))


def default_split(class_ids: Sequence[int]) -> dict[str, list[int]]:
    """The 100/50/50 CUB protocol: alternate classes to base, then val/novel."""
    out: dict[str, list[int]] = {name: [] for name in SPLITS}
    for i, cid in enumerate(sorted(class_ids)):
        if i % 2 == 0:
            out["base"].append(cid)
        elif i % 4 == 1:
            out["val"].append(cid)
        else:
            out["novel"].append(cid)
    return out


# ---------------------------------------------------------------- CUB loader


def _read_rows(path: Path, min_fields: int, maxsplit: int = -1) -> list[tuple[int, list[str]]]:
    rows = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(None, maxsplit) if maxsplit >= 0 else line.split()
            if len(parts) < min_fields:
                raise DataError(f"{path}:{lineno}: malformed row {line!r}")
            rows.append((lineno, parts))
    return rows


def _as_int(path: Path, lineno: int, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: expected an integer, got {text!r}") from None


def _as_float(path: Path, lineno: int, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: expected a number, got {text!r}") from None


def read_part_locs(path: str | Path) -> dict[int, list[tuple[int, float, float, bool]]]:
    """Rows ``<image_id> <part_id> <x> <y> <visible>`` grouped by image id."""
    path = Path(path)
    out: dict[int, list[tuple[int, float, float, bool]]] = {}
    for lineno, parts in _read_rows(path, 5):
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        image_id = _as_int(path, lineno, parts[0])
        part_id = _as_int(path, lineno, parts[1])
        x = _as_float(path, lineno, parts[2])
        y = _as_float(path, lineno, parts[3])
        flag = _as_int(path, lineno, parts[4])
        if flag not in (0, 1):
            raise DataError(f"{path}:{lineno}: visibility flag must be 0 or 1, got {flag}")
        out.setdefault(image_id, []).append((part_id, x, y, bool(flag)))
    return out


def _load_pixels(path: Path, size: int) -> tuple[np.ndarray, int, int]:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            width, height = im.size
            resized = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(resized, dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0), width, height


def load_cub_dataset(
    root: str | Path,
    split_config: str | Path | Mapping[str, Sequence[str]] | None = None,
    image_size: int = 84,
) -> DatasetBundle:
    """Load a CUB-200-2011 directory into a bundle.

    ``split_config`` is a split-file path, a mapping ``split -> class names``,
    or ``None`` for the default 100/50/50 protocol.  Part ids (1-based) are
    mapped to contiguous 0-based concept ids in part-id order; the mapping is
    kept in ``metadata["part_id_map"]``.
    """
    root = Path(root)
    for rel in CUB_REQUIRED:
        if not (root / rel).is_file():
            raise DataError(f"missing CUB file: {root / rel}")
    if not (root / "images").is_dir():
        raise DataError(f"missing CUB file: {root / 'images'}")

    paths = {}
    images_txt = root / "images.txt"
    for lineno, parts in _read_rows(images_txt, 2, maxsplit=1):
        paths[_as_int(images_txt, lineno, parts[0])] = parts[1]

    labels = {}
    labels_txt = root / "image_class_labels.txt"
    for lineno, parts in _read_rows(labels_txt, 2):
        labels[_as_int(labels_txt, lineno, parts[0])] = _as_int(labels_txt, lineno, parts[1])

    class_names: dict[int, str] = {}
    classes_txt = root / "classes.txt"
    if classes_txt.is_file():
        for lineno, parts in _read_rows(classes_txt, 2, maxsplit=1):
            class_names[_as_int(classes_txt, lineno, parts[0])] = parts[1]
    else:
        for image_id, rel in paths.items():
            if image_id in labels:
                class_names.setdefault(labels[image_id], Path(rel).parent.name)

    parts_txt = root / "parts" / "parts.txt"
    part_names = {}
    for lineno, parts in _read_rows(parts_txt, 2, maxsplit=1):
        part_names[_as_int(parts_txt, lineno, parts[0])] = parts[1]
    part_id_map = {pid: cid for cid, pid in enumerate(sorted(part_names))}
    concepts = tuple(ConceptSpec(cid, part_names[pid]) for pid, cid in part_id_map.items())

    locs = read_part_locs(root / "parts" / "part_locs.txt")

    by_name = {name: cid for cid, name in class_names.items()}
    if split_config is None:
        split_ids = default_split(sorted(class_names))
    else:
        named = read_split_file(split_config) if isinstance(split_config, (str, Path)) else split_config
        split_ids = {}
        for split in SPLITS:
            ids = []
            for name in named.get(split, ()):
                if name not in by_name:
                    raise DataError(f"split config references unknown class {name!r}")
                ids.append(by_name[name])
            split_ids[split] = ids
    owner: dict[int, str] = {}
    for split, ids in split_ids.items():
        for cid in ids:
            if cid in owner:
                raise DataError(f"class {class_names[cid]!r} assigned to both {owner[cid]} and {split}")
            owner[cid] = split

    members: dict[str, list[AnnotatedImage]] = {name: [] for name in SPLITS}
    for image_id in sorted(paths):
        if image_id not in labels:
            raise DataError(f"image {image_id} has no entry in {labels_txt}")
        label = labels[image_id]
        split = owner.get(label)
        if split is None:
            continue
        pixels, width, height = _load_pixels(root / "images" / paths[image_id], image_size)
        anns = []
        for part_id, x, y, visible in locs.get(image_id, ()):
            if part_id not in part_id_map:
                raise DataError(f"part_locs.txt references unknown part id {part_id}")
            if visible:
                anns.append(
                    ConceptAnnotation(
                        part_id_map[part_id],
                        float(rescale_coordinate(x, width, image_size)),
                        float(rescale_coordinate(y, height, image_size)),
                        True,
                    )
                )
            else:
                anns.append(ConceptAnnotation(part_id_map[part_id], x, y, False))
        members[split].append(AnnotatedImage(pixels, label, tuple(anns), image_id))

    metadata = {
        "source": "cub",
        "image_size": image_size,
        "norm_mean": list(IMAGENET_MEAN),
        "norm_std": list(IMAGENET_STD),
        "part_id_map": {str(pid): cid for pid, cid in part_id_map.items()},
    }
    return DatasetBundle(
        concepts,
        members["base"],
        members["val"],
        members["novel"],
        {cid: class_names[cid] for cid in sorted(owner)},
        metadata,
    )


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    """Glyph-on-noise images: one glyph per concept, class = per-concept colors.

    Each concept has its own fixed glyph shape and its own hue band; each
    class assigns every concept one of ``n_attribute_values`` colors from that
    band, and no two classes share a full color combination.  Glyphs sit in distinct grid cells chosen at random
    per image.
    """

    n_base_classes: int = 20
    n_val_classes: int = 10
    n_novel_classes: int = 10
    n_concepts: int = 3
    n_attribute_values: int = 4
    images_per_class: int = 30
    image_size: int = 64
    grid_size: int = 4
    noise_level: float = 0.05
    drop_fraction: float = 0.0

    @property
    def n_classes(self) -> int:
        return self.n_base_classes + self.n_val_classes + self.n_novel_classes

    def validate(self) -> None:
        if self.n_concepts < 1:
            raise ConfigError("n_concepts must be >= 1")
        if self.n_attribute_values < 1:
            raise ConfigError("n_attribute_values must be >= 1")
        if min(self.n_base_classes, self.n_val_classes, self.n_novel_classes) < 1:
            raise ConfigError("every split needs at least one class")
        if self.images_per_class < 1:
            raise ConfigError("images_per_class must be >= 1")
        if self.grid_size < 1 or self.image_size % self.grid_size:
            raise ConfigError(f"grid_size {self.grid_size} does not divide image_size {self.image_size}")
        if self.image_size // self.grid_size < 4:
            raise ConfigError("grid cells must be at least 4 pixels wide")
        if self.n_concepts > self.grid_size**2:
            raise ConfigError(f"{self.n_concepts} concepts do not fit in a {self.grid_size}x{self.grid_size} grid")
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise ConfigError("drop_fraction must be in [0, 1]")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        combos = self.n_attribute_values**self.n_concepts
        if combos < self.n_classes:
            raise ConfigError(
                f"only {combos} attribute combinations ({self.n_attribute_values}^{self.n_concepts}) "
                f"for {self.n_classes} classes"
            )

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticConfig":
        return update_dataclass(cls(), read_kv_file(path))


def _glyph_patterns(n: int, rng: np.random.Generator) -> list[np.ndarray]:
    patterns: list[np.ndarray] = []
    seen = set()
    while len(patterns) < n:
        bits = rng.integers(0, 2, size=9)
        if bits.sum() < 5 or bits.tobytes() in seen:
            continue
        seen.add(bits.tobytes())
        patterns.append(bits.reshape(3, 3).astype(bool))
    return patterns


def _palette(n_concepts: int, n_values: int) -> np.ndarray:
    """``(n_concepts, n_values, 3)`` colors; each concept owns a disjoint hue band."""
    total = n_concepts * n_values
    hues = [[(j * n_values + a) / total for a in range(n_values)] for j in range(n_concepts)]
    return np.array([[colorsys.hsv_to_rgb(h, 0.9, 1.0) for h in row] for row in hues], dtype=np.float64)


def _class_combinations(cfg: SyntheticConfig, rng: np.random.Generator) -> list[tuple[int, ...]]:
    total = cfg.n_attribute_values**cfg.n_concepts
    picked: list[int] = []
    seen = set()
    while len(picked) < cfg.n_classes:
        code = int(rng.integers(0, total))
        if code not in seen:
            seen.add(code)
            picked.append(code)
    combos = []
    for code in picked:
        digits = []
        for _ in range(cfg.n_concepts):
            code, digit = divmod(code, cfg.n_attribute_values)
            digits.append(digit)
        combos.append(tuple(digits))
    return combos


def generate_synthetic_dataset(config: SyntheticConfig | None = None, seed: int = 0) -> DatasetBundle:
    """Deterministic synthetic bundle with known concept centers."""
    cfg = config or SyntheticConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    shapes = _glyph_patterns(cfg.n_concepts, rng)
    colors = _palette(cfg.n_concepts, cfg.n_attribute_values)
    combos = _class_combinations(cfg, rng)

    size, grid = cfg.image_size, cfg.grid_size
    cell = size // grid
    scale = max(1, (cell * 5 // 8) // 3)
    glyph = 3 * scale
    margin = (cell - glyph) // 2
    jitter = max(0, margin - 1)
    masks = [np.kron(s, np.ones((scale, scale), dtype=bool)) for s in shapes]

    split_counts = (cfg.n_base_classes, cfg.n_val_classes, cfg.n_novel_classes)
    members: dict[str, list[AnnotatedImage]] = {name: [] for name in SPLITS}
    class_names: dict[int, str] = {}
    label = 0
    image_id = 0
    for split, count in zip(SPLITS, split_counts):
        for _ in range(count):
            combo = combos[label]
            class_names[label] = "synth_%03d[%s]" % (label, ",".join(map(str, combo)))
            for _ in range(cfg.images_per_class):
                tone = rng.uniform(0.25, 0.45)
                img = tone + cfg.noise_level * rng.standard_normal((size, size, 3))
                cells = rng.choice(grid * grid, size=cfg.n_concepts, replace=False)
                anns = []
                for cid in range(cfg.n_concepts):
                    dropped = rng.random() < cfg.drop_fraction
                    offset = rng.integers(-jitter, jitter + 1, size=2)
                    shade = rng.uniform(0.85, 1.0)
                    if dropped:
                        anns.append(ConceptAnnotation(cid, 0.0, 0.0, False))
                        continue
                    row, col = divmod(int(cells[cid]), grid)
                    top = row * cell + margin + int(offset[0])
                    left = col * cell + margin + int(offset[1])
                    patch = img[top : top + glyph, left : left + glyph]
                    patch[masks[cid]] = colors[cid, combo[cid]] * shade
                    center = (glyph - 1) // 2
                    anns.append(ConceptAnnotation(cid, float(left + center), float(top + center), True))
                quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                pixels = quantized.astype(np.float32) / np.float32(255.0)
                members[split].append(AnnotatedImage(pixels, label, tuple(anns), image_id))
                image_id += 1
            label += 1

    metadata = {
        "source": "synthetic",
        "seed": seed,
        "image_size": size,
        "grid_size": grid,
        "norm_mean": [0.5, 0.5, 0.5],
        "norm_std": [0.25, 0.25, 0.25],
        "synthetic_config": dataclasses.asdict(cfg),
    }
    concepts = tuple(ConceptSpec(cid, f"glyph{cid}") for cid in range(cfg.n_concepts))
    return DatasetBundle(concepts, members["base"], members["val"], members["novel"], class_names, metadata)


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    class_counts: dict[str, dict[int, int]] = field(default_factory=dict)
    visibility_rates: dict[int, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "errors": list(self.errors),
            "warnings": list(self.warnings),
            "class_counts": {s: {str(k): v for k, v in c.items()} for s, c in self.class_counts.items()},
            "visibility_rates": {str(k): v for k, v in self.visibility_rates.items()},
        }

    def render(self) -> str:
        lines = [f"validation: {'PASS' if self.passed else 'FAIL'}"]
        lines += [f"  error: {e}" for e in self.errors]
        lines += [f"  warning: {w}" for w in self.warnings]
        for split, counts in self.class_counts.items():
            sizes = list(counts.values())
            if sizes:
                lines.append(f"  {split}: {len(counts)} classes, {min(sizes)}-{max(sizes)} images/class")
            else:
                lines.append(f"  {split}: empty")
        for cid, rate in self.visibility_rates.items():
            lines.append(f"  concept {cid}: visible in {rate:.3f} of images")
        return "\n".join(lines)


def validate_dataset(bundle: DatasetBundle) -> ValidationReport:
    """Check the bundle invariants; never raises on a bad bundle."""
    report = ValidationReport()
    ids = [c.concept_id for c in bundle.concept_specs]
    if not ids:
        report.errors.append("bundle defines no concepts")
    elif sorted(ids) != list(range(len(ids))):
        report.errors.append(f"concept ids are not contiguous and unique: {ids}")
    valid_ids = set(ids)

    label_sets = {}
    for split in SPLITS:
        counts: dict[int, int] = {}
        for img in bundle.split(split):
            counts[img.class_label] = counts.get(img.class_label, 0) + 1
        report.class_counts[split] = dict(sorted(counts.items()))
        label_sets[split] = set(counts)
        if not counts:
            report.errors.append(f"split {split} is empty")
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1 :]:
            shared = label_sets[a] & label_sets[b]
            if shared:
                report.errors.append(f"splits {a} and {b} share classes {sorted(shared)}")

    visible = dict.fromkeys(valid_ids, 0)
    total = 0
    for split in SPLITS:
        for img in bundle.split(split):
            total += 1
            px = img.pixels
            if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
                report.errors.append(f"image {img.image_id}: pixels outside [0, 1]")
            for ann in img.annotations:
                if ann.concept_id not in valid_ids:
                    report.errors.append(f"image {img.image_id}: unknown concept id {ann.concept_id}")
                    continue
                if ann.visible:
                    visible[ann.concept_id] += 1
                    if not (0 <= ann.x < img.width and 0 <= ann.y < img.height):
                        report.errors.append(
                            f"image {img.image_id}: concept {ann.concept_id} at ({ann.x}, {ann.y}) outside image"
                        )
    for cid in sorted(visible):
        rate = visible[cid] / total if total else 0.0
        report.visibility_rates[cid] = rate
        if rate == 0.0:
            report.warnings.append(f"concept {cid} is never visible (rate 0.0)")
    return report


# ---------------------------------------------------------------- persistence


def _split_arrays(images: Sequence[AnnotatedImage], n_concepts: int, size: int) -> dict[str, np.ndarray]:
    n = len(images)
    pixels = np.zeros((n, size, size, 3), dtype=np.uint8)
    ann = np.zeros((n, n_concepts, 4), dtype=np.float64)  # present, x, y, visible
    for i, img in enumerate(images):
        pixels[i] = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
        for a in img.annotations:
            ann[i, a.concept_id] = (1.0, a.x, a.y, float(a.visible))
    return {
        "pixels": pixels,
        "labels": np.array([img.class_label for img in images], dtype=np.int64),
        "ids": np.array([img.image_id for img in images], dtype=np.int64),
        "annotations": ann,
    }


def _bundle_payload(bundle: DatasetBundle) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    arrays = {}
    for split in SPLITS:
        for key, arr in _split_arrays(bundle.split(split), bundle.n_concepts, bundle.image_size).items():
            arrays[f"{split}_{key}"] = arr
    header = {
        "format": BUNDLE_FORMAT,
        "format_version": BUNDLE_FORMAT_VERSION,
        "concepts": [[c.concept_id, c.name] for c in bundle.concept_specs],
        "class_names": {str(k): v for k, v in sorted(bundle.class_names.items())},
        "metadata": dict(bundle.metadata),
    }
    return header, arrays


def save_bundle(bundle: DatasetBundle, path: str | Path) -> None:
    """Write a bundle archive (uint8 pixels; exact for images quantized to 1/255)."""
    header, arrays = _bundle_payload(bundle)
    _archive.write_archive(
        path, {"bundle.json": _archive.dumps_json(header), "arrays.npz": _archive.arrays_to_bytes(arrays)}
    )


def load_bundle(path: str | Path) -> DatasetBundle:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing bundle file: {path}")
    try:
        members = _archive.read_archive(path)
        header = json.loads(members["bundle.json"])
        arrays = _archive.arrays_from_bytes(members["arrays.npz"])
    except Exception as exc:
        raise DataError(f"corrupt bundle file {path}: {exc}") from exc
    if header.get("format") != BUNDLE_FORMAT or header.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported bundle format {header.get('format')} v{header.get('format_version')}")
    splits = {}
    for split in SPLITS:
        pixels = arrays[f"{split}_pixels"]
        ann = arrays[f"{split}_annotations"]
        images = []
        for i in range(len(pixels)):
            anns = tuple(
                ConceptAnnotation(cid, float(ann[i, cid, 1]), float(ann[i, cid, 2]), bool(ann[i, cid, 3]))
                for cid in range(ann.shape[1])
                if ann[i, cid, 0]
            )
            images.append(
                AnnotatedImage(
                    pixels[i].astype(np.float32) / np.float32(255.0),
                    int(arrays[f"{split}_labels"][i]),
                    anns,
                    int(arrays[f"{split}_ids"][i]),
                )
            )
        splits[split] = images
    return DatasetBundle(
        tuple(ConceptSpec(int(c), str(n)) for c, n in header["concepts"]),
        splits["base"],
        splits["val"],
        splits["novel"],
        {int(k): v for k, v in header["class_names"].items()},
        header["metadata"],
    )


def bundle_digest(bundle: DatasetBundle) -> str:
    """SHA-256 over the bundle's serialized content."""
    header, arrays = _bundle_payload(bundle)
    h = hashlib.sha256(_archive.dumps_json(header).encode())
    for key in sorted(arrays):
        h.update(key.encode())
        h.update(np.ascontiguousarray(arrays[key]).tobytes())
    return h.hexdigest()


def group_by_class(images: Iterable[AnnotatedImage]) -> dict[int, list[AnnotatedImage]]:
    groups: dict[int, list[AnnotatedImage]] = {}
    for img in images:
        groups.setdefault(img.class_label, []).append(img)
    return dict(sorted(groups.items()))
