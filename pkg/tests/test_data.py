import json

import numpy as np
import pytest

from lafss.data import (
    SHAPES,
    Annotation,
    DatasetIndex,
    ImageRecord,
    SynthSpec,
    build_folds,
    shape_mask,
    synthesize_dataset,
)
from lafss.nn import ConfigError


@pytest.fixture(scope="module")
def small_index():
    return synthesize_dataset(SynthSpec(num_images=60), np.random.default_rng(0))


def test_round_robin_folds(small_index):
    folds = build_folds(small_index)
    assert [f.unseen for f in folds] == [[0, 4], [1, 5], [2, 6], [3, 7]]
    for f in folds:
        assert sorted(f.seen + f.unseen) == list(range(8))
        assert not set(f.seen) & set(f.unseen)
    # every class is held out exactly once
    assert sorted(c for f in folds for c in f.unseen) == list(range(8))


def test_uneven_folds_rejected(small_index):
    with pytest.raises(ConfigError):
        build_folds(small_index, num_folds=3)


def test_overlapping_split_rejected():
    img = {0: ImageRecord(0, "a.png", 8, 8)}
    with pytest.raises(ConfigError):
        DatasetIndex(img, [], ["a", "b"], seen=[0], unseen=[0, 1])
    with pytest.raises(ConfigError):
        DatasetIndex(img, [Annotation(0, 0, 5, "m.png")], ["a", "b"])


def test_synth_contract(small_index):
    idx = small_index
    assert len(idx.images) == 60
    assert idx.classes == list(SHAPES)
    for img_id, anns in idx.by_image.items():
        assert 1 <= len({a.class_id for a in anns}) <= 3
        img = idx.image(img_id)
        assert img.shape == (3, 64, 64) and img.dtype == np.float32
        assert 0.0 <= img.min() and img.max() <= 1.0
        union = np.zeros((64, 64), dtype=int)
        for a in anns:
            m = idx.mask(a)
            assert m.sum() >= 12
            union += m
        assert union.max() <= 1  # visible masks are disjoint after occlusion
    splits = {r.split for r in idx.images.values()}
    assert splits == {"train", "test"}


def test_synth_is_deterministic():
    a = synthesize_dataset(SynthSpec(num_images=12), np.random.default_rng(7))
    b = synthesize_dataset(SynthSpec(num_images=12), np.random.default_rng(7))
    assert a.content_hash() == b.content_hash()
    for i in a.images:
        np.testing.assert_array_equal(a.image(i), b.image(i))


def test_disk_round_trip(tmp_path):
    idx = synthesize_dataset(SynthSpec(num_images=6), np.random.default_rng(3), out_dir=tmp_path)
    loaded = DatasetIndex.load(tmp_path)
    assert loaded.content_hash() == idx.content_hash()
    for i in idx.images:
        np.testing.assert_array_equal(loaded.image(i), idx.image(i))
    for a in idx.annotations:
        np.testing.assert_array_equal(loaded.mask(a), idx.mask(a))
    raw = json.loads((tmp_path / "index.json").read_text())
    assert set(raw) == {"images", "annotations", "classes"}


def test_resized_access(small_index):
    ann = small_index.annotations[0]
    assert small_index.mask(ann).shape == (64, 64)


@pytest.mark.parametrize("kind", SHAPES)
def test_shapes_are_non_empty_and_centred(kind):
    m = shape_mask(kind, 64, 32.0, 32.0, 12.0, 0.3)
    assert m.sum() > 30
    ys, xs = np.nonzero(m)
    assert abs(xs.mean() + 0.5 - 32) < 3 and abs(ys.mean() + 0.5 - 32) < 3


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(num_classes=9)
    with pytest.raises(ConfigError):
        SynthSpec(min_classes=3, max_classes=2)
