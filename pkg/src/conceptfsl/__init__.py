"""Interpretable concept-based few-shot classification.

Per-concept metric spaces over a shared Conv-4 trunk, per-concept cell
detectors, and presence-weighted aggregation of per-concept prototype
distances.
"""

__version__ = "0.1.0"

from .aggregate import (
    ClassificationResult,
    Explanation,
    WeightingMode,
    aggregate_distance,
    build_prototype_bank_novel,
    classify,
    classify_from_maps,
    explain,
    weighted_class_distances,
)
from .backbone import (
    BackboneConfig,
    ConceptBackbone,
    ConceptEmbedding,
    FeatureMap,
    compute_feature_maps,
    embed_concepts_annotated,
    forward_feature_map,
    gap_embedding,
    map_image_coords_to_cell,
    pick_concept_embedding,
)
from .checkpoint import LoadedModel, load_model, save_model
from .data import (
    AnnotatedImage,
    ConceptAnnotation,
    ConceptSpec,
    DatasetBundle,
    SyntheticConfig,
    generate_synthetic_dataset,
    load_bundle,
    load_cub_dataset,
    save_bundle,
    validate_dataset,
)
from .detector import ConceptDetectors, DetectorTrainConfig, detect_concept, localization_rate, train_detectors
from .episodes import Episode, EpisodeSpec, episode_stream, sample_episode
from .errors import (
    ConceptFSLError,
    ConfigError,
    ContainerVersionError,
    CorruptContainerError,
    DataError,
    SamplingError,
    TrainingError,
)
from .evaluation import (
    Comparison,
    EvalReport,
    ExperimentConfig,
    evaluate,
    run_evaluation,
    run_oracle_comparison,
    run_weight_ablation,
)
from .prototypes import PrototypeBank, classify_query_training, compute_prototypes
from .training import AugmentationConfig, TrainConfig, augment, episode_loss, train_concept_learners
