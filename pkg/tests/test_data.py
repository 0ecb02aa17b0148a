import dataclasses

import numpy as np
import pytest

from conceptfsl.data import (
    AnnotatedImage,
    ConceptAnnotation,
    SyntheticConfig,
    bundle_digest,
    default_split,
    generate_synthetic_dataset,
    load_bundle,
    load_cub_dataset,
    parse_split_text,
    read_part_locs,
    rescale_coordinate,
    save_bundle,
    validate_dataset,
)
from conceptfsl.errors import ConfigError, DataError

from conftest import TINY_SYNTH, write_cub


def test_full_size_cub_gives_fifteen_concepts_and_100_50_50(tmp_path):
    bundle = load_cub_dataset(write_cub(tmp_path / "cub", 200), image_size=16)
    assert bundle.n_concepts == 15
    assert [len(bundle.labels(s)) for s in ("base", "val", "novel")] == [100, 50, 50]
    assert validate_dataset(bundle).passed


def test_part_row_with_flag_zero_is_invisible(tmp_path):
    path = tmp_path / "part_locs.txt"
    path.write_text("1 2 60.0 120.0 0\n")
    assert read_part_locs(path) == {1: [(2, 60.0, 120.0, False)]}

    locs = {1: [(p, 0.0, 0.0, 0) for p in range(1, 16)]}
    locs[1][1] = (2, 60.0, 120.0, 0)
    bundle = load_cub_dataset(write_cub(tmp_path / "cub", 2, locs=locs), {"base": ["001.Class_1"], "novel": ["002.Class_2"]}, 16)
    ann = bundle.base_split[0].annotation(1)  # part id 2 -> concept 1
    assert ann == ConceptAnnotation(1, 60.0, 120.0, False)


def test_resize_rescales_part_coordinates(tmp_path):
    locs = {1: [(1, 210.0, 140.0, 1)] + [(p, 5.0, 5.0, 0) for p in range(2, 16)]}
    root = write_cub(tmp_path / "cub", 2, locs=locs, sizes={1: (420, 280)})
    bundle = load_cub_dataset(root, {"base": ["001.Class_1"], "novel": ["002.Class_2"]}, 84)
    img = bundle.base_split[0]
    assert img.pixels.shape == (84, 84, 3)
    ann = img.annotation(0)
    assert (ann.x, ann.y, ann.visible) == (42.0, 42.0, True)


def test_rescale_rounds_half_up_and_clamps():
    assert rescale_coordinate(1.0, 8, 4) == 1  # 0.5 rounds up
    assert rescale_coordinate(419.9, 420, 84) == 83
    assert rescale_coordinate(-3.0, 420, 84) == 0


def test_missing_cub_file_is_named(tmp_path):
    root = write_cub(tmp_path / "cub", 2)
    (root / "parts" / "part_locs.txt").unlink()
    with pytest.raises(DataError, match="part_locs.txt"):
        load_cub_dataset(root)


def test_malformed_part_row_reports_line(tmp_path):
    path = tmp_path / "part_locs.txt"
    path.write_text("1 1 3.0 4.0 1\n1 2 oops 4.0 1\n")
    with pytest.raises(DataError, match=r"part_locs.txt:2"):
        read_part_locs(path)
    path.write_text("1 1 3.0 4.0 1\n1 2 3.0\n")
    with pytest.raises(DataError, match=r":2: malformed"):
        read_part_locs(path)


def test_split_file_with_unknown_class(tmp_path):
    root = write_cub(tmp_path / "cub", 3)
    split = tmp_path / "split.txt"
    split.write_text("[base]\n001.Class_1\n[novel]\nNo_Such_Bird\n")
    with pytest.raises(DataError, match="No_Such_Bird"):
        load_cub_dataset(root, split)


def test_split_text_parsing():
    parsed = parse_split_text("# comment\n[base]\na\nb\n\n[val]\nc\n[novel]\nd\n")
    assert parsed == {"base": ["a", "b"], "val": ["c"], "novel": ["d"]}
    with pytest.raises(DataError, match="unknown split"):
        parse_split_text("[test]\na\n")
    with pytest.raises(DataError, match="before any split header"):
        parse_split_text("a\n")


def test_default_split_is_disjoint_and_complete():
    out = default_split(range(1, 201))
    assert sorted(out["base"] + out["val"] + out["novel"]) == list(range(1, 201))
    assert [len(out[s]) for s in ("base", "val", "novel")] == [100, 50, 50]


def test_synthetic_is_deterministic():
    cfg = dataclasses.replace(TINY_SYNTH, n_base_classes=3, n_val_classes=2, n_novel_classes=2)
    a, b = generate_synthetic_dataset(cfg, 7), generate_synthetic_dataset(cfg, 7)
    assert bundle_digest(a) == bundle_digest(b)
    assert bundle_digest(a) != bundle_digest(generate_synthetic_dataset(cfg, 8))


def test_no_drop_means_every_concept_visible(tiny_bundle):
    for split in ("base", "val", "novel"):
        for img in tiny_bundle.split(split):
            assert len(img.annotations) == tiny_bundle.n_concepts
            assert all(a.visible for a in img.annotations)


def test_synthetic_annotations_point_at_glyphs(tiny_bundle):
    # background is grey-ish; saturated glyph pixels surround each annotated center
    for img in tiny_bundle.base_split[:20]:
        for ann in img.annotations:
            y, x = int(ann.y), int(ann.x)
            patch = img.pixels[max(y - 2, 0) : y + 3, max(x - 2, 0) : x + 3]
            assert (patch.max(axis=-1) - patch.min(axis=-1)).max() > 0.3


def test_drop_fraction_hides_concepts():
    cfg = dataclasses.replace(TINY_SYNTH, drop_fraction=0.3)
    bundle = generate_synthetic_dataset(cfg, 1)
    rates = validate_dataset(bundle).visibility_rates
    assert all(0.55 < r < 0.85 for r in rates.values())


def test_too_few_attribute_combinations():
    cfg = SyntheticConfig(n_concepts=3, n_attribute_values=2, n_base_classes=4, n_val_classes=3, n_novel_classes=3)
    with pytest.raises(ConfigError, match="8 attribute combinations"):
        generate_synthetic_dataset(cfg, 0)


def test_synthetic_config_from_file(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("n_concepts = 2  # fewer\nnoise_level = 0.1\n")
    cfg = SyntheticConfig.from_file(path)
    assert (cfg.n_concepts, cfg.noise_level, cfg.image_size) == (2, 0.1, 64)


def test_validation_flags_shared_class(tiny_bundle):
    leaked = dataclasses.replace(tiny_bundle, novel_split=tiny_bundle.novel_split + tiny_bundle.base_split[:1])
    report = validate_dataset(leaked)
    assert not report.passed
    assert any("share classes" in e for e in report.errors)


def test_valid_bundle_passes(tiny_bundle):
    report = validate_dataset(tiny_bundle)
    assert report.passed and not report.warnings
    assert "PASS" in report.render()


def test_never_visible_concept_warns(tiny_bundle):
    def hide(img):
        anns = tuple(dataclasses.replace(a, visible=False) if a.concept_id == 2 else a for a in img.annotations)
        return img.replace(annotations=anns)

    hidden = dataclasses.replace(
        tiny_bundle,
        base_split=[hide(i) for i in tiny_bundle.base_split],
        val_split=[hide(i) for i in tiny_bundle.val_split],
        novel_split=[hide(i) for i in tiny_bundle.novel_split],
    )
    report = validate_dataset(hidden)
    assert report.passed
    assert report.visibility_rates[2] == 0.0
    assert any("concept 2" in w and "0.0" in w for w in report.warnings)


def test_duplicate_annotation_rejected():
    ann = ConceptAnnotation(0, 1.0, 1.0, True)
    with pytest.raises(DataError, match="duplicate"):
        AnnotatedImage(np.zeros((4, 4, 3), np.float32), 0, (ann, ann), 0)


def test_bundle_round_trip(tmp_path, tiny_bundle):
    path = tmp_path / "b.zip"
    save_bundle(tiny_bundle, path)
    loaded = load_bundle(path)
    assert bundle_digest(loaded) == bundle_digest(tiny_bundle)
    first, again = tiny_bundle.novel_split[3], loaded.novel_split[3]
    assert np.array_equal(first.pixels, again.pixels)
    assert first.annotations == again.annotations
    save_bundle(loaded, tmp_path / "c.zip")
    assert path.read_bytes() == (tmp_path / "c.zip").read_bytes()


def test_corrupt_bundle(tmp_path, tiny_bundle):
    path = tmp_path / "b.zip"
    save_bundle(tiny_bundle, path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(DataError, match="corrupt"):
        load_bundle(path)
