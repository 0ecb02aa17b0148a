"""Command-line driver.

Every subcommand accepts ``--config FILE`` (key = value lines), ``--seed`` and
``--out DIR``; a few common keys also have flags (``--data``, ``--model``,
``--mode``).  Flags override config keys.  Each run writes its outputs and a
``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .aggregate import WeightingMode, classify_from_maps, explain
from .backbone import BackboneConfig
from .checkpoint import MODEL_FORMAT_VERSION, file_digest, load_model, save_model
from .config import read_kv_file, update_dataclass
from .data import (
    BUNDLE_FORMAT_VERSION,
    SyntheticConfig,
    generate_synthetic_dataset,
    save_bundle,
    validate_dataset,
)
from .detector import DetectorTrainConfig, localization_rate, train_detectors
from .episodes import EpisodeSpec, episode_rng, sample_episode
from .errors import ConceptFSLError
from .evaluation import (
    REPORT_SCHEMA,
    ExperimentConfig,
    SplitFeatures,
    load_experiment_data,
    run_evaluation,
    run_oracle_comparison,
    run_weight_ablation,
)
from .training import AugmentationConfig, TrainConfig, train_concept_learners

log = logging.getLogger("conceptfsl")

MANIFEST_SCHEMA = 1


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _write_manifest(out: Path, command: str, settings: dict[str, Any], seed: int, inputs: dict[str, str]) -> None:
    digests = {}
    for key, value in inputs.items():
        p = Path(value)
        digests[key] = {"path": value, "sha256": file_digest(p) if p.is_file() else None}
    doc = {
        "schema_version": MANIFEST_SCHEMA,
        "command": command,
        "package_version": __version__,
        "seed": seed,
        "settings": settings,
        "inputs": digests,
        "formats": {
            "model_container": MODEL_FORMAT_VERSION,
            "bundle": BUNDLE_FORMAT_VERSION,
            "report": REPORT_SCHEMA,
        },
    }
    _write(out, "manifest.json", json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n")


def _settings(args: argparse.Namespace) -> dict[str, str]:
    values = read_kv_file(args.config) if args.config else {}
    for key in ("data", "model", "mode"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def _experiment(values: dict[str, str]) -> ExperimentConfig:
    try:
        return update_dataclass(ExperimentConfig(), values)
    except (TypeError, ValueError) as exc:
        raise ConceptFSLError(f"bad experiment config: {exc}") from exc


# ---------------------------------------------------------------- subcommands


def cmd_gen_synth(args, values, out):
    cfg = update_dataclass(SyntheticConfig(), values)
    seed = int(values.get("seed", 0))
    bundle = generate_synthetic_dataset(cfg, seed)
    path = out / "bundle.zip"
    save_bundle(bundle, path)
    _write_manifest(out, "gen-synth", dataclasses.asdict(cfg), seed, {})
    print(f"wrote {path}: {len(bundle.base_split)}/{len(bundle.val_split)}/{len(bundle.novel_split)} images")
    return 0


def cmd_validate_data(args, values, out):
    bundle = load_experiment_data(_experiment(values))
    report = validate_dataset(bundle)
    _write(out, "validation.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    print(report.render())
    return 0 if report.passed else 1


def _episode_spec(values, prefix=""):
    base = EpisodeSpec()
    return EpisodeSpec(
        int(values.get(prefix + "n_way", base.n_way)),
        int(values.get(prefix + "k_shot", base.k_shot)),
        int(values.get(prefix + "n_query", base.n_query)),
    )


def cmd_train(args, values, out):
    exp = _experiment(values)
    bundle = load_experiment_data(exp)
    tcfg = update_dataclass(TrainConfig(), values)
    tcfg = dataclasses.replace(tcfg, episode_spec=_episode_spec(values, "train_"))
    aug = update_dataclass(AugmentationConfig(), values, prefix="aug_")
    bcfg = update_dataclass(
        BackboneConfig(input_size=bundle.image_size, n_concepts=bundle.n_concepts), values, prefix="backbone_"
    )
    log_path = out / "train_log.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    with log_path.open("w") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            print(f"epoch {record['epoch']}: loss {record['mean_loss']:.4f}, val acc {record['val_accuracy']:.4f}")

        model, records = train_concept_learners(bundle, tcfg, aug, bcfg, on_epoch)
    best = max(records, key=lambda r: r["val_accuracy"])
    model_path = out / "model.zip"
    save_model(model_path, model, metadata={"best_epoch": best["epoch"], "best_val_accuracy": best["val_accuracy"]})
    settings = {
        "train": dataclasses.asdict(tcfg),
        "augmentation": dataclasses.asdict(aug),
        "backbone": dataclasses.asdict(bcfg),
    }
    _write_manifest(out, "train", settings, tcfg.seed, {"data": exp.data})
    print(f"wrote {model_path} (best epoch {best['epoch']}, val acc {best['val_accuracy']:.4f})")
    return 0


def cmd_train_detectors(args, values, out):
    exp = _experiment(values)
    if not exp.model:
        raise ConceptFSLError("train-detectors needs a model (set 'model')")
    loaded = load_model(exp.model)
    bundle = load_experiment_data(exp)
    dcfg = update_dataclass(DetectorTrainConfig(seed=exp.seed), values, prefix="detector_")
    detectors = train_detectors(bundle, loaded.backbone, dcfg)
    rates = localization_rate(loaded.backbone, detectors, bundle.val_split)
    model_path = out / "model.zip"
    metadata = dict(loaded.metadata, val_localization=rates)
    save_model(model_path, loaded.backbone, detectors, metadata, dcfg)
    _write_manifest(out, "train-detectors", dataclasses.asdict(dcfg), dcfg.seed, {"model": exp.model, "data": exp.data})
    for j, rate in rates.items():
        print(f"concept {j}: val localization {rate:.3f}")
    print(f"wrote {model_path}")
    return 0


def cmd_eval(args, values, out):
    exp = _experiment(values)
    report = run_evaluation(exp)
    _write(out, "report.json", report.to_json())
    _write(out, "report.txt", report.render_text())
    _write_manifest(out, "eval", dataclasses.asdict(exp), exp.seed, {"model": exp.model, "data": exp.data})
    print(report.render_text(), end="")
    return 0


def cmd_ablate_weights(args, values, out):
    exp = _experiment(values)
    comparison = run_weight_ablation(exp)
    _write(out, "ablation.json", comparison.to_json())
    _write(out, "ablation.txt", comparison.render_text())
    _write_manifest(out, "ablate-weights", dataclasses.asdict(exp), exp.seed, {"model": exp.model, "data": exp.data})
    print(comparison.render_text(), end="")
    return 0


def cmd_ablate_oracle(args, values, out):
    exp = _experiment(values)
    comparison = run_oracle_comparison(exp)
    _write(out, "oracle_comparison.json", comparison.to_json())
    _write(out, "oracle_comparison.txt", comparison.render_text())
    _write_manifest(out, "ablate-oracle", dataclasses.asdict(exp), exp.seed, {"model": exp.model, "data": exp.data})
    print(comparison.render_text(), end="")
    return 0


def cmd_explain(args, values, out):
    """Classify one query of one sampled episode and write its explanation."""
    exp = _experiment(values)
    mode = WeightingMode(exp.mode)
    loaded = load_model(exp.model)
    if mode is not WeightingMode.ORACLE and not loaded.has_detectors:
        raise ConceptFSLError(f"{exp.model} has no detector section; run train-detectors first")
    bundle = load_experiment_data(exp)
    split = bundle.split(exp.split)
    episode_index = int(values.get("episode_index", 0))
    query_index = int(values.get("query_index", 0))
    episode = sample_episode(split, exp.episode_spec, episode_rng(exp.seed, episode_index), episode_index)
    if not 0 <= query_index < len(episode.query):
        raise ConceptFSLError(f"query_index {query_index} outside [0, {len(episode.query)})")
    members = episode.support_flat() + list(episode.query)
    features = SplitFeatures(loaded.backbone, loaded.detectors, members)
    bank = features.bank(episode)
    query = episode.query[query_index]
    i = features.index[query.image_id]
    scores = None if features.scores is None else features.scores[i]
    if mode is not WeightingMode.ORACLE:
        query = query.replace(annotations=())
    result = classify_from_maps(features.maps[i], scores, query, bank, mode, loaded.backbone.distance)
    doc = explain(result, bundle.concept_specs, episode.class_map, episode.fingerprint(), query.image_id)
    _write(out, "explanation.json", doc.to_json())
    _write(out, "explanation.txt", doc.render_text())
    settings = dict(dataclasses.asdict(exp), episode_index=episode_index, query_index=query_index)
    _write_manifest(out, "explain", settings, exp.seed, {"model": exp.model, "data": exp.data})
    true_label = episode.class_map[episode.query_labels[query_index]]
    print(doc.render_text(), end="")
    print(f"true label: {true_label}")
    return 0


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "write a synthetic dataset bundle"),
    "validate-data": (cmd_validate_data, "check dataset invariants"),
    "train": (cmd_train, "train the concept learners (backbone)"),
    "train-detectors": (cmd_train_detectors, "train per-concept detectors on a trained backbone"),
    "eval": (cmd_eval, "episodic evaluation on the novel split"),
    "ablate-weights": (cmd_ablate_weights, "equal vs probability weights on paired episodes"),
    "ablate-oracle": (cmd_ablate_oracle, "ground-truth vs detected concept cells on paired episodes"),
    "explain": (cmd_explain, "classify one query and write its explanation"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="root random seed (overrides config)")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--data", help="dataset bundle archive or CUB root")
    common.add_argument("--model", help="model container")
    common.add_argument("--mode", choices=[m.value for m in WeightingMode], help="concept weighting mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="conceptfsl", description="Concept-based few-shot classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        values = _settings(args)
        return handler(args, values, Path(args.out))
    except (ConceptFSLError, ValueError, KeyError, OSError) as exc:
        print(f"conceptfsl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
