import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from boundary_transfer.datamodel import Image, LabeledSample, Mask, SourceDataset
from boundary_transfer.datasets import (
    DatasetManifest,
    ManifestEntry,
    check_disjoint,
    exclude_category,
    export_samples,
    few_shot_split,
    load_dataset,
    load_labeled,
    load_mask,
    load_source,
    load_target,
    read_manifest,
    resplit,
    stem_in_eval_split,
)
from boundary_transfer.errors import CategoryError, DatasetError, DatasetLoadError


def _sample(rng, stem, category=None, size=16, fraction=0.4):
    image = np.rint(rng.random((size, size, 3)) * 255) / 255
    mask = (rng.random((size, size)) < fraction).astype(np.float32)
    return LabeledSample(
        Image.from_array(image.astype(np.float32)),
        Mask.from_array(mask, hard=True),
        stem=stem,
        category=category,
    )


def _source(rng, counts):
    samples = [
        _sample(rng, f"{category}_{i}", category)
        for category, n in counts.items()
        for i in range(n)
    ]
    return SourceDataset(tuple(samples), category_vocabulary=frozenset(counts))


def test_manifest_with_three_entries_loads_three_samples(rng, tmp_path):
    samples = [_sample(rng, f"s{i}", "cat") for i in range(3)]
    export_samples(samples, tmp_path)
    manifest = read_manifest(tmp_path)
    assert [e.stem for e in manifest.entries] == ["s0", "s1", "s2"]
    source = load_dataset(manifest, "source", image_size=16)
    assert len(source) == 3
    assert source.category_vocabulary == {"cat"}


def test_ingestion_round_trip_is_exact(rng, tmp_path):
    samples = [_sample(rng, f"s{i}") for i in range(3)]
    export_samples(samples, tmp_path / "a")
    first = load_source(read_manifest(tmp_path / "a"), image_size=16)
    for original, loaded in zip(samples, first.samples):
        assert torch.equal(original.image.data, loaded.image.data)
        assert torch.equal(original.mask.data, loaded.mask.data)
    export_samples(first.samples, tmp_path / "b")
    second = load_source(read_manifest(tmp_path / "b"), image_size=16)
    for a, b in zip(first.samples, second.samples):
        assert torch.equal(a.image.data, b.image.data)
        assert torch.equal(a.mask.data, b.mask.data)


def test_missing_mask_lands_in_the_unlabeled_pool(rng, tmp_path):
    samples = [_sample(rng, f"t{i}", "bird") for i in range(4)]
    export_samples(samples, tmp_path)
    (tmp_path / "masks" / "t3.png").unlink()
    target = load_target(read_manifest(tmp_path), image_size=16, budget=1)
    assert len(target.labeled) == 1
    assert len(target.unlabeled) == 3
    assert len(target.withheld_samples()) == 2
    assert target.categories == {"bird"}


def test_missing_mask_in_source_is_an_error(rng, tmp_path):
    export_samples([_sample(rng, "a"), _sample(rng, "b")], tmp_path)
    (tmp_path / "masks" / "b.png").unlink()
    (tmp_path / "images" / "a.png").write_bytes(b"not a png")
    with pytest.raises(DatasetLoadError) as info:
        load_source(read_manifest(tmp_path), image_size=16)
    assert len(info.value.errors) == 2


def test_eval_split_entries_are_held_out(rng, tmp_path):
    samples = [_sample(rng, f"t{i}") for i in range(5)]
    export_samples(samples, tmp_path, splits=["train", "train", "train", "eval", "eval"])
    target = load_target(read_manifest(tmp_path), image_size=16, budget=2, seed=1)
    assert [s.stem for s in target.evaluation_samples()] == ["t3", "t4"]
    assert len(target.labeled) == 2 and len(target.unlabeled) == 1
    assert len(load_labeled(read_manifest(tmp_path), image_size=16)) == 5


def test_manifest_without_split_column_uses_a_stable_hash(rng, tmp_path):
    export_samples([_sample(rng, f"s{i}") for i in range(40)], tmp_path)
    (tmp_path / "manifest.tsv").write_text(
        "stem\tcategory\n" + "".join(f"s{i}\tcat\n" for i in range(40))
    )
    manifest = read_manifest(tmp_path, seed=3)
    expected = {f"s{i}" for i in range(40) if stem_in_eval_split(f"s{i}", 3)}
    assert {e.stem for e in manifest.split("eval")} == expected
    assert read_manifest(tmp_path, seed=3) == manifest


def test_images_without_manifest(rng, tmp_path):
    export_samples([_sample(rng, "x"), _sample(rng, "y")], tmp_path)
    (tmp_path / "manifest.tsv").unlink()
    manifest = read_manifest(tmp_path)
    assert sorted(e.stem for e in manifest.entries) == ["x", "y"]
    assert manifest.categories == frozenset()
    with pytest.raises(DatasetError):
        read_manifest(tmp_path / "nowhere")


def test_duplicate_stems_rejected(tmp_path):
    with pytest.raises(DatasetError):
        DatasetManifest(tmp_path, (ManifestEntry("a"), ManifestEntry("a")))


def test_masks_are_rebinarized_after_resizing(tmp_path):
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:24, 8:24] = 255
    PILImage.fromarray(mask).save(tmp_path / "m.png")
    loaded = load_mask(tmp_path / "m.png", 16)
    assert loaded.hard and loaded.shape == (1, 16, 16)
    assert loaded.data.sum() == pytest.approx(64, abs=16)


def test_suspect_masks_are_flagged_not_dropped(rng, tmp_path):
    samples = [_sample(rng, "empty", fraction=0.0), _sample(rng, "normal")]
    export_samples(samples, tmp_path)
    source = load_source(read_manifest(tmp_path), image_size=16)
    assert len(source) == 2
    assert source.suspect_stems == ("empty",)


def test_exclude_category_examples(rng):
    source = _source(rng, {"a": 3, "b": 3})
    halved = exclude_category(source, "a")
    assert len(halved) == 3
    assert "a" not in halved.category_labels
    assert "a" not in halved.category_vocabulary

    declared = SourceDataset(source.samples, category_vocabulary=frozenset({"a", "b", "c"}))
    assert len(exclude_category(declared, "c")) == len(source)

    with pytest.raises(CategoryError):
        exclude_category(source, "zebra")
    with pytest.raises(CategoryError):
        exclude_category(SourceDataset((_sample(rng, "n"),)), "a")


def test_check_disjoint(rng):
    source = _source(rng, {"a": 1, "b": 1})
    pool = [_sample(rng, "t0", "a"), _sample(rng, "t1", "a")]
    with pytest.raises(CategoryError):
        check_disjoint(source, few_shot_split(pool, 1, 0))
    check_disjoint(exclude_category(source, "a"), few_shot_split(pool, 1, 0))


def test_few_shot_split_contract(rng):
    pool = [_sample(rng, f"t{i}", "q") for i in range(6)]
    a, b = few_shot_split(pool, 2, seed=5), few_shot_split(pool, 2, seed=5)
    assert [s.stem for s in a.labeled] == [s.stem for s in b.labeled]
    assert len(a.unlabeled) == 4
    labeled = {s.stem for s in a.labeled}
    assert labeled.isdisjoint(s.stem for s in a.withheld_samples())

    everything = few_shot_split(pool, 6, seed=5)
    assert len(everything.unlabeled) == 0 and everything.budget == 6
    nothing = few_shot_split(pool, 0, seed=5)
    assert len(nothing.labeled) == 0 and len(nothing.unlabeled) == 6
    with pytest.raises(DatasetError):
        few_shot_split(pool, 7, seed=5)


def test_resplit_keeps_evaluation_and_maskless_images(rng):
    pool = [_sample(rng, f"t{i}", "q") for i in range(5)]
    held_out = [_sample(rng, "e0", "q")]
    extra = [("q", _sample(rng, "u0").image)]
    target = few_shot_split(pool, 2, 0, extra_unlabeled=extra, evaluation=held_out)
    bigger = resplit(target, 4, seed=0)
    assert len(bigger.labeled) == 4
    assert len(bigger.unlabeled) == 2
    assert bigger.unlabeled[-1] is extra[0][1]
    assert bigger.evaluation_samples() == target.evaluation_samples()
