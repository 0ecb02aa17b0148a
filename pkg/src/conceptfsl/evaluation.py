"""Episode-level evaluation, paired ablations and report files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .aggregate import ClassificationResult, WeightingMode, classify_from_maps
from .backbone import ConceptBackbone, compute_feature_maps
from .checkpoint import load_model
from .data import AnnotatedImage, DatasetBundle, load_bundle, load_cub_dataset
from .detector import ConceptDetectors
from .episodes import Episode, EpisodeSpec, episode_stream
from .prototypes import PrototypeBank, class_prototypes
from .training import annotated_embedding_array, derive_seed

REPORT_SCHEMA = 1

Predictor = Callable[[Episode], np.ndarray]


@dataclass
class EvalReport:
    mode: str
    episode_spec: EpisodeSpec
    n_episodes: int
    mean_accuracy: float
    std_dev: float
    ci95_halfwidth: float
    per_episode_accuracies: list[float]
    seed: int
    episode_fingerprints: list[str] = field(default_factory=list)
    detector_noise: float = 0.0

    @classmethod
    def from_accuracies(
        cls,
        accuracies: Sequence[float],
        mode: str,
        spec: EpisodeSpec,
        seed: int,
        fingerprints: Sequence[str] = (),
        detector_noise: float = 0.0,
    ) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        n = len(acc)
        if n == 0:
            raise ValueError("no episodes evaluated")
        std = float(acc.std())
        return cls(
            mode=mode.value if isinstance(mode, WeightingMode) else str(mode),
            episode_spec=spec,
            n_episodes=n,
            mean_accuracy=float(acc.mean()),
            std_dev=std,
            ci95_halfwidth=1.96 * std / math.sqrt(n),
            per_episode_accuracies=[float(a) for a in acc],
            seed=seed,
            episode_fingerprints=list(fingerprints),
            detector_noise=detector_noise,
        )

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["schema_version"] = REPORT_SCHEMA
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EvalReport":
        doc = dict(doc)
        if doc.pop("schema_version", None) != REPORT_SCHEMA:
            raise ValueError("unsupported report schema")
        doc["episode_spec"] = EpisodeSpec(**doc["episode_spec"])
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def render_text(self) -> str:
        s = self.episode_spec
        return (
            f"{s.n_way}-way {s.k_shot}-shot, {s.n_query} queries/class, mode={self.mode}, seed={self.seed}\n"
            f"episodes: {self.n_episodes}\n"
            f"accuracy: {100 * self.mean_accuracy:.2f}% "
            f"(std {100 * self.std_dev:.2f}, 95% CI +/- {100 * self.ci95_halfwidth:.2f})\n"
        )


def evaluate_episodes(
    episodes: Iterable[Episode],
    predict: Predictor,
    mode: str,
    spec: EpisodeSpec,
    seed: int,
    detector_noise: float = 0.0,
) -> EvalReport:
    """Score any predictor (returns episode-local labels per query) episode by episode."""
    accs, prints = [], []
    for ep in episodes:
        pred = np.asarray(predict(ep))
        accs.append(float(np.mean(pred == np.asarray(ep.query_labels))))
        prints.append(ep.fingerprint())
    return EvalReport.from_accuracies(accs, mode, spec, seed, prints, detector_noise)


# ---------------------------------------------------------------- model-backed predictor


class SplitFeatures:
    """Feature maps, annotated embeddings and detector scores for every image of a split.

    Everything is computed once in inference mode; episodes then only index.
    """

    def __init__(
        self,
        backbone: ConceptBackbone,
        detectors: ConceptDetectors | None,
        images: Sequence[AnnotatedImage],
    ):
        self.backbone = backbone
        self.detectors = detectors
        self.images = list(images)
        self.index = {img.image_id: i for i, img in enumerate(self.images)}
        if len(self.index) != len(self.images):
            raise ValueError("image ids in a split must be unique")
        self.maps = compute_feature_maps(backbone, self.images)
        self.annotated = annotated_embedding_array(self.maps, self.images)
        self.scores = None
        if detectors is not None:
            self.scores = np.stack([detectors.score_image(img, m) for img, m in zip(self.images, self.maps)])

    def bank(self, episode: Episode) -> PrototypeBank:
        per_class = [self.annotated[[self.index[i] for i in ids]] for ids in episode.support_ids()]
        n = self.maps.shape[1]
        return PrototypeBank(class_prototypes(per_class), tuple(range(n)), episode.class_map)


class EpisodeClassifier:
    """Classify every query of an episode with a given weighting mode."""

    def __init__(self, features: SplitFeatures, mode: WeightingMode, detector_noise: float = 0.0, noise_seed: int = 0):
        self.features = features
        self.mode = WeightingMode(mode)
        self.detector_noise = detector_noise
        self.noise_seed = noise_seed
        if self.mode is not WeightingMode.ORACLE and features.scores is None:
            raise ValueError(f"{self.mode.value} mode needs trained detectors")

    def classify_episode(self, episode: Episode) -> list[ClassificationResult]:
        f = self.features
        bank = f.bank(episode)
        rng = None
        if self.detector_noise > 0:
            rng = np.random.default_rng(derive_seed(self.noise_seed, 7, episode.index))
        results = []
        for img in episode.query:
            i = f.index[img.image_id]
            scores = None if f.scores is None else f.scores[i]
            results.append(
                classify_from_maps(
                    f.maps[i], scores, img, bank, self.mode, f.backbone.distance, self.detector_noise, rng
                )
            )
        return results

    def __call__(self, episode: Episode) -> np.ndarray:
        return np.array([r.predicted_class for r in self.classify_episode(episode)])


def evaluate(
    backbone: ConceptBackbone,
    detectors: ConceptDetectors | None,
    images: Sequence[AnnotatedImage],
    spec: EpisodeSpec,
    n_episodes: int,
    mode: WeightingMode,
    seed: int,
    detector_noise: float = 0.0,
    features: SplitFeatures | None = None,
) -> EvalReport:
    features = features or SplitFeatures(backbone, detectors, images)
    clf = EpisodeClassifier(features, mode, detector_noise, seed)
    return evaluate_episodes(episode_stream(images, spec, seed, n_episodes), clf, clf.mode.value, spec, seed, detector_noise)


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = ""  # bundle archive or CUB root directory
    split_file: str = ""
    image_size: int = 84
    model: str = ""
    split: str = "novel"
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 16
    n_episodes: int = 600
    mode: str = "probability"
    seed: int = 0
    detector_noise: float = 0.0

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        WeightingMode(self.mode)
        if not 0.0 <= self.detector_noise <= 1.0:
            raise ValueError("detector_noise must be in [0, 1]")

    @property
    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.n_query)


def load_experiment_data(config: ExperimentConfig) -> DatasetBundle:
    path = Path(config.data)
    if not config.data:
        raise ValueError("no dataset given (set 'data')")
    if path.is_dir():
        return load_cub_dataset(path, config.split_file or None, config.image_size)
    return load_bundle(path)


def _load(config: ExperimentConfig, need_detectors: bool):
    if not config.model:
        raise ValueError("no model given (set 'model')")
    model = load_model(config.model)
    if need_detectors and not model.has_detectors:
        raise ValueError(f"{config.model} has no detector section; run train-detectors first")
    return model, load_experiment_data(config)


def run_evaluation(config: ExperimentConfig) -> EvalReport:
    mode = WeightingMode(config.mode)
    model, bundle = _load(config, mode is not WeightingMode.ORACLE)
    return evaluate(
        model.backbone,
        model.detectors,
        bundle.split(config.split),
        config.episode_spec,
        config.n_episodes,
        mode,
        config.seed,
        config.detector_noise,
    )


@dataclass
class Comparison:
    """Two arms evaluated on the same episode stream."""

    name: str
    arms: dict[str, EvalReport]

    def __post_init__(self):
        prints = [r.episode_fingerprints for r in self.arms.values()]
        if any(p != prints[0] for p in prints[1:]):
            raise ValueError("arms were not evaluated on identical episodes")

    @property
    def arm_names(self) -> list[str]:
        return list(self.arms)

    def deltas(self) -> list[float]:
        """Per-episode accuracy of the second arm minus the first."""
        a, b = (self.arms[n].per_episode_accuracies for n in self.arm_names[:2])
        return [y - x for x, y in zip(a, b)]

    def to_dict(self) -> dict[str, Any]:
        d = np.asarray(self.deltas())
        return {
            "schema_version": REPORT_SCHEMA,
            "name": self.name,
            "arms": {k: v.to_dict() for k, v in self.arms.items()},
            "mean_delta": float(d.mean()),
            "delta_ci95_halfwidth": float(1.96 * d.std() / math.sqrt(len(d))),
            "wins": int((d > 0).sum()),
            "losses": int((d < 0).sum()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def render_text(self) -> str:
        doc = self.to_dict()
        width = max(len(n) for n in self.arms) + 2
        lines = [self.name, f"{'arm':<{width}} {'accuracy':>9} {'std':>7} {'ci95':>7}"]
        for name, r in self.arms.items():
            lines.append(
                f"{name:<{width}} {100 * r.mean_accuracy:>8.2f}% {100 * r.std_dev:>7.2f} {100 * r.ci95_halfwidth:>7.2f}"
            )
        first, second = self.arm_names[:2]
        lines.append(
            f"paired delta ({second} - {first}): {100 * doc['mean_delta']:+.2f} "
            f"+/- {100 * doc['delta_ci95_halfwidth']:.2f} points, wins {doc['wins']}, losses {doc['losses']}"
        )
        return "\n".join(lines) + "\n"


def compare_modes(
    backbone: ConceptBackbone,
    detectors: ConceptDetectors | None,
    images: Sequence[AnnotatedImage],
    spec: EpisodeSpec,
    n_episodes: int,
    arms: Mapping[str, tuple[WeightingMode, float]],
    seed: int,
    name: str,
) -> Comparison:
    """Evaluate several (mode, detector noise) arms on one shared episode stream."""
    features = SplitFeatures(backbone, detectors, images)
    reports = {
        arm: evaluate(backbone, detectors, images, spec, n_episodes, mode, seed, noise, features)
        for arm, (mode, noise) in arms.items()
    }
    return Comparison(name, reports)


def run_weight_ablation(config: ExperimentConfig) -> Comparison:
    model, bundle = _load(config, True)
    return compare_modes(
        model.backbone,
        model.detectors,
        bundle.split(config.split),
        config.episode_spec,
        config.n_episodes,
        {"equal": (WeightingMode.EQUAL, config.detector_noise), "probability": (WeightingMode.PROBABILITY, config.detector_noise)},
        config.seed,
        "weight ablation: equal vs probability weights",
    )


def run_oracle_comparison(config: ExperimentConfig, detected_mode: WeightingMode | None = None) -> Comparison:
    """Ground-truth query cells with unit weights vs detector-based localization.

    The detected arm uses ``config.mode`` unless ``detected_mode`` is given and
    applies ``config.detector_noise``.
    """
    detected_mode = WeightingMode(detected_mode or config.mode)
    if detected_mode is WeightingMode.ORACLE:
        detected_mode = WeightingMode.PROBABILITY
    model, bundle = _load(config, True)
    return compare_modes(
        model.backbone,
        model.detectors,
        bundle.split(config.split),
        config.episode_spec,
        config.n_episodes,
        {"detected": (detected_mode, config.detector_noise), "oracle": (WeightingMode.ORACLE, 0.0)},
        config.seed,
        f"oracle comparison: detected ({detected_mode.value}) vs ground-truth concept cells",
    )
