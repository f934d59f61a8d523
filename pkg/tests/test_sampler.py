from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lafss.data import SynthSpec, build_folds, synthesize_dataset
from lafss.nn import ConfigError
from lafss.sampler import (
    PAPER_BATCH_CONFIGS,
    BatchConfig,
    EpisodeSampler,
    SamplingError,
    draw_pool_rows,
    make_batch,
    mask_box,
    point_count,
    query_labels,
    randomize_prompt_types,
    sample_episode_batch,
    sample_points,
    upsample_mask,
)


@pytest.fixture(scope="module")
def index():
    return synthesize_dataset(SynthSpec(num_images=120, min_classes=2), np.random.default_rng(0))


@pytest.fixture(scope="module")
def fold0(index):
    return build_folds(index)[0]


def test_episode_contract(fold0):
    s = EpisodeSampler(fold0, fold0.seen)
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, k = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        ep = s.sample_episode(n, k, rng)
        assert set(ep.classes) <= set(fold0.seen)
        assert len(set(ep.classes)) == ep.n
        assert ep.query_id not in ep.support_ids
        assert len(set(ep.support_ids)) == len(ep.support_ids)
        q_classes = {a.class_id for a in fold0.by_image[ep.query_id]}
        if ep.query_mode == "all":
            assert set(ep.classes) <= q_classes
        else:
            assert set(ep.classes) & q_classes
            assert ep.n == n
        for c in ep.classes:
            assert sum(c in anns for anns in ep.support_anns) >= k


def test_supports_are_deduplicated_when_shared():
    # every image holds both classes, so each support image serves both
    spec = SynthSpec(num_classes=2, num_images=10, min_classes=2, max_classes=2)
    idx = synthesize_dataset(spec, np.random.default_rng(1))
    s = EpisodeSampler(idx, [0, 1])
    ep = s.sample_episode(2, 3, np.random.default_rng(0))
    assert 3 <= ep.L <= 6
    assert len(set(ep.support_ids)) == ep.L


def test_excluded_classes_never_appear(index):
    s = EpisodeSampler(index, [1, 2, 3], exclude=[0, 4])
    rng = np.random.default_rng(0)
    for _ in range(100):
        ep = s.sample_episode(2, 1, rng)
        for img in [ep.query_id, *ep.support_ids]:
            assert not {a.class_id for a in index.by_image[img]} & {0, 4}


def test_split_restriction(index):
    s = EpisodeSampler(index, range(8), split="test")
    ep = s.sample_episode(1, 1, np.random.default_rng(0))
    assert all(index.images[i].split == "test" for i in [ep.query_id, *ep.support_ids])


def test_impossible_request_raises(index):
    s = EpisodeSampler(index, [0, 1])
    with pytest.raises(SamplingError):
        s.sample_episode(3, 1, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        s.sample_episode(1, 10_000, np.random.default_rng(0))


def test_all_mode_reduces_n_when_unsatisfiable():
    # classes never co-occur, so an "all" query can only hold one of them
    spec = SynthSpec(num_classes=3, num_images=30, min_classes=1, max_classes=1)
    idx = synthesize_dataset(spec, np.random.default_rng(2))
    s = EpisodeSampler(idx, range(3), all_prob=1.0, max_retries=5)
    ep = s.sample_episode(3, 1, np.random.default_rng(0))
    assert ep.query_mode == "all" and ep.n == 1 and ep.requested_n == 3


def test_must_include_classes(index):
    s = EpisodeSampler(index, range(8))
    rng = np.random.default_rng(0)
    for _ in range(50):
        ep = s.sample_episode(3, 1, rng, must_include=[0, 4])
        assert ep.classes[:2] == [0, 4]
        assert {a.class_id for a in index.by_image[ep.query_id]} & {0, 4}


def test_coin_is_fair(index):
    s = EpisodeSampler(index, range(8))
    rng = np.random.default_rng(5)
    modes = Counter(s.sample_episode(2, 1, rng).query_mode for _ in range(2000))
    assert abs(modes["all"] / 2000 - 0.5) < 0.04


def test_batch_config_draw_covers_paper_set(fold0):
    s = EpisodeSampler(fold0, fold0.seen)
    rng = np.random.default_rng(0)
    seen = Counter()
    for _ in range(300):
        cfg, eps = sample_episode_batch(s, PAPER_BATCH_CONFIGS, rng)
        assert len(eps) == cfg.B and all(ep.requested_n == cfg.N for ep in eps)
        seen[cfg] += 1
    assert set(seen) == set(PAPER_BATCH_CONFIGS)
    assert all(abs(v / 300 - 1 / 6) < 0.07 for v in seen.values())


def test_batch_config_validation():
    assert BatchConfig(2, 4, 2).max_images == 18
    with pytest.raises(ConfigError):
        BatchConfig(0, 1, 1)
    with pytest.raises(ConfigError):
        sample_episode_batch(None, (), np.random.default_rng(0))


# -- prompts -------------------------------------------------------------------------------


def test_box_is_tight():
    m = np.zeros((8, 8), dtype=bool)
    m[2:5, 1:7] = True
    assert mask_box(m) == ((1 / 8, 2 / 8), (7 / 8, 5 / 8))


def test_single_pixel_box_and_full_box():
    m = np.zeros((4, 4), dtype=bool)
    m[3, 0] = True
    assert mask_box(m) == ((0.0, 0.75), (0.25, 1.0))
    assert mask_box(np.ones((4, 4), bool)) == ((0.0, 0.0), (1.0, 1.0))


def test_point_count_rule():
    assert point_count(1, 4096) == 1
    assert point_count(256, 4096) == 10
    assert point_count(128, 4096) == 5
    assert point_count(4096, 4096) == 10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_points_lie_inside_mask(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((16, 16)) < rng.uniform(0.01, 0.6)
    m[rng.integers(16), rng.integers(16)] = True
    pts = sample_points(m, rng)
    assert 1 <= len(pts) <= 10
    assert len(set(pts)) == len(pts)
    for x, y in pts:
        assert m[int(y * 16), int(x * 16)]


def test_empty_mask_has_no_points():
    with pytest.raises(ValueError):
        sample_points(np.zeros((4, 4), bool), np.random.default_rng(0))


def test_upsample_nearest():
    m = np.array([[1, 0], [0, 1]], dtype=bool)
    np.testing.assert_array_equal(upsample_mask(m, 4), np.kron(m, np.ones((2, 2), int)).astype(bool))


@pytest.mark.parametrize(
    "mode,allowed",
    [
        ("masks_only", {"mask"}),
        ("boxes_only", {"box"}),
        ("points_only", {"points"}),
        ("boxes_and_points", {"box", "points"}),
        ("random", {"mask", "box", "points"}),
    ],
)
def test_prompt_modes(fold0, mode, allowed):
    s = EpisodeSampler(fold0, fold0.seen)
    rng = np.random.default_rng(0)
    types = Counter()
    for _ in range(40):
        ep = randomize_prompt_types(s.sample_episode(2, 2, rng), fold0, mode, rng, mask_size=64)
        types.update(ep.prompt_types)
        for row, anns in zip(ep.prompts, ep.support_anns):
            for c, p in zip(ep.classes, row):
                assert p.class_present == (c in anns)
    assert set(types) == allowed


def test_unknown_prompt_mode(fold0):
    ep = EpisodeSampler(fold0, fold0.seen).sample_episode(1, 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        randomize_prompt_types(ep, fold0, "scribbles", np.random.default_rng(0))


def test_query_labels_match_masks(fold0):
    ep = EpisodeSampler(fold0, fold0.seen).sample_episode(2, 1, np.random.default_rng(3))
    lab = query_labels(ep, fold0)
    for a in fold0.by_image[ep.query_id]:
        m = fold0.mask(a)
        expect = ep.classes.index(a.class_id) + 1 if a.class_id in ep.classes else 0
        assert np.all(lab[m] == expect)


def test_make_batch_shapes(fold0):
    s = EpisodeSampler(fold0, fold0.seen)
    rng = np.random.default_rng(0)
    eps = [s.sample_episode(2, 2, rng) for _ in range(3)]
    batch = make_batch(eps, fold0, "random", rng, mask_size=64, pool_size=16)
    B, L, N, M = batch.prompts.dims
    assert (B, N) == (3, 2) and L == max(ep.L for ep in eps)
    assert batch.support.shape == (3, L, 3, 64, 64)
    assert batch.labels.shape == (3, 64, 64) and batch.labels.max() <= 2
    assert all(len(set(r)) == 2 for r in batch.prompts.pool_rows)
    batch.check()


def test_pool_rows_exhausted():
    with pytest.raises(ConfigError):
        draw_pool_rows(20, 16, np.random.default_rng(0))
