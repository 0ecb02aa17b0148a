"""Model container: a zip archive holding backbone and detector weights.

Members::

    manifest.json    format name/version, backbone config, normalization,
                     distance, detector section description, free metadata
    backbone.npz     backbone state dict (trunk, heads, BN buffers)
    detectors.npz    detector state dict (optional section)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from . import _archive
from .backbone import BackboneConfig, ConceptBackbone
from .detector import ConceptDetectors, DetectorTrainConfig
from .errors import ContainerVersionError, CorruptContainerError

MODEL_FORMAT = "conceptfsl-model"
MODEL_FORMAT_VERSION = 1
NORM_LAYER = "BatchNorm2d(eps=1e-05, momentum=0.1); train mode while training, eval mode otherwise"


@dataclass
class LoadedModel:
    backbone: ConceptBackbone
    detectors: ConceptDetectors | None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def has_detectors(self) -> bool:
        return self.detectors is not None


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    module.load_state_dict(state, strict=True)


def save_model(
    path: str | Path,
    backbone: ConceptBackbone,
    detectors: ConceptDetectors | None = None,
    metadata: Mapping[str, Any] | None = None,
    detector_config: DetectorTrainConfig | None = None,
) -> None:
    manifest: dict[str, Any] = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "backbone": {
            "config": dataclasses.asdict(backbone.config),
            "distance": backbone.distance,
            "norm_mean": backbone.norm_mean.flatten().tolist(),
            "norm_std": backbone.norm_std.flatten().tolist(),
            "norm_layer": NORM_LAYER,
            "dtype": str(backbone.dtype).replace("torch.", ""),
        },
        "metadata": dict(metadata or {}),
    }
    members: dict[str, bytes | str] = {}
    members["backbone.npz"] = _archive.arrays_to_bytes(_state_arrays(backbone))
    if detectors is not None:
        manifest["detectors"] = {
            "n_concepts": detectors.n_concepts,
            "in_dim": detectors.in_dim,
            "hidden": detectors.hidden,
            "positive_class_weight": detectors.positive_class_weight,
            "stub": list(detectors.stub),
            "train_config": dataclasses.asdict(detector_config) if detector_config else None,
        }
        members["detectors.npz"] = _archive.arrays_to_bytes(_state_arrays(detectors))
    _archive.write_archive(path, {"manifest.json": _archive.dumps_json(manifest), **members})


def load_model(path: str | Path) -> LoadedModel:
    """Load a container; raises before constructing anything if it is damaged."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing model file: {path}")
    try:
        members = _archive.read_archive(path)
        manifest = json.loads(members["manifest.json"])
        backbone_arrays = _archive.arrays_from_bytes(members["backbone.npz"])
        detector_arrays = (
            _archive.arrays_from_bytes(members["detectors.npz"]) if "detectors.npz" in members else None
        )
    except (zipfile.BadZipFile, zlib.error, KeyError, EOFError, ValueError, OSError) as exc:
        raise CorruptContainerError(f"corrupt model container {path}: {exc}") from exc

    if manifest.get("format") != MODEL_FORMAT:
        raise CorruptContainerError(f"{path} is not a model container (format {manifest.get('format')!r})")
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path}: container version {manifest.get('format_version')}, expected {MODEL_FORMAT_VERSION}"
        )
    try:
        b = manifest["backbone"]
        backbone = ConceptBackbone(
            BackboneConfig(**b["config"]), norm_mean=b["norm_mean"], norm_std=b["norm_std"], distance=b["distance"]
        )
        backbone.to(getattr(torch, b["dtype"]))
        _load_state(backbone, backbone_arrays)
        backbone.eval()
        detectors = None
        if "detectors" in manifest and detector_arrays is not None:
            d = manifest["detectors"]
            detectors = ConceptDetectors(d["n_concepts"], d["in_dim"], d["hidden"], d["positive_class_weight"])
            detectors.to(backbone.dtype)
            _load_state(detectors, detector_arrays)
            detectors.stub = list(d["stub"])
            detectors.eval()
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CorruptContainerError(f"corrupt model container {path}: {exc}") from exc
    return LoadedModel(backbone, detectors, manifest.get("metadata", {}))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
