"""When concepts go missing, trust the detector's confidence.

A third of the glyphs are removed from every image.  The detector still
reports a best cell for an absent concept, but with low probability; weighting
each concept's distance by that probability keeps the bogus embedding from
swamping the vote.  Equal weights and inverse weights are shown for contrast.

    python3 demos/missing_concepts.py [--drop 0.3] [--seeds 5]
"""

import argparse

import numpy as np
import torch

from conceptfsl import (
    AugmentationConfig,
    BackboneConfig,
    DetectorTrainConfig,
    EpisodeSpec,
    SyntheticConfig,
    TrainConfig,
    WeightingMode,
    generate_synthetic_dataset,
    train_concept_learners,
    train_detectors,
)
from conceptfsl.evaluation import compare_modes


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--drop", type=float, default=0.3)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--episodes", type=int, default=100)
    args = parser.parse_args()
    torch.set_num_threads(1)

    bundle = generate_synthetic_dataset(SyntheticConfig(drop_fraction=args.drop), seed=0)
    cfg = TrainConfig(episodes_per_epoch=50, max_epochs=3, val_episodes=50, episode_spec=EpisodeSpec(5, 5, 4))
    bcfg = BackboneConfig(input_size=bundle.image_size, channels=32, n_concepts=bundle.n_concepts)
    backbone, _ = train_concept_learners(bundle, cfg, AugmentationConfig(), bcfg)
    detectors = train_detectors(bundle, backbone, DetectorTrainConfig())

    arms = {m: (WeightingMode(m), 0.0) for m in ("equal", "probability", "inverse_probability", "oracle")}
    print(f"drop {args.drop:.0%}, {args.episodes} episodes per seed")
    print("seed " + " ".join(f"{m:>19}" for m in arms) + "   prob-equal")
    deltas = []
    for seed in range(args.seeds):
        comp = compare_modes(backbone, detectors, bundle.novel_split, EpisodeSpec(5, 5, 16), args.episodes, arms, seed, "drop")
        acc = {m: r.mean_accuracy for m, r in comp.arms.items()}
        deltas.append(acc["probability"] - acc["equal"])
        print(f"{seed:>4} " + " ".join(f"{acc[m]:>19.3f}" for m in arms) + f"   {deltas[-1]:+.3f}")
    print(f"probability weights won {sum(d >= 0 for d in deltas)}/{len(deltas)} seeds, mean gain {np.mean(deltas):+.3f}")


if __name__ == "__main__":
    main()
