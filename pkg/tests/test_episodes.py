"""
Episode tests
Class splits, K-way n-shot sampling, augmentation and the synthetic dataset
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from episodes import (
    ClassSplits,
    Episode,
    EpisodeSampler,
    ImageDataset,
    affine_warp,
    augment_image,
    build_class_splits,
    make_samplers,
    sample_episode,
    synth_dataset_generate,
)
from errors import DatasetError, EpisodeError, SplitError
from schemas import AugmentPolicy


def class_names(count: int):
    return [f"class_{i:03d}" for i in range(count)]


# ============================================================================
# CLASS SPLITS
# ============================================================================

class TestBuildClassSplits:
    """Random class partitions"""

    def test_cub_counts(self):
        splits = build_class_splits(class_names(200), (100, 50, 50), seed=0)
        assert splits.counts() == (100, 50, 50)
        assert set(splits.all_classes) == set(class_names(200))
        assert not set(splits.train) & set(splits.val)
        assert not set(splits.val) & set(splits.test)
        assert not set(splits.train) & set(splits.test)

    def test_mini_imagenet_counts(self):
        splits = build_class_splits(class_names(100), (64, 16, 20), seed=3)
        assert splits.counts() == (64, 16, 20)
        splits.check_covers(class_names(100))

    def test_deterministic_and_order_free(self):
        names = class_names(100)
        a = build_class_splits(names, (64, 16, 20), seed=7)
        b = build_class_splits(list(reversed(names)), (64, 16, 20), seed=7)
        assert a == b

    def test_seed_changes_partition(self):
        names = class_names(100)
        a = build_class_splits(names, (64, 16, 20), seed=1)
        b = build_class_splits(names, (64, 16, 20), seed=2)
        assert a.train != b.train

    def test_each_split_is_sorted(self):
        splits = build_class_splits(class_names(30), (20, 5, 5), seed=0)
        for split in ("train", "val", "test"):
            assert list(splits.get(split)) == sorted(splits.get(split))

    @pytest.mark.parametrize("counts", [(64, 16, 19), (64, 16, 21), (-1, 51, 50), (100, 0)])
    def test_bad_counts(self, counts):
        with pytest.raises(SplitError):
            build_class_splits(class_names(100), counts, seed=0)

    def test_duplicate_ids(self):
        with pytest.raises(SplitError):
            build_class_splits(["a", "a", "b"], (1, 1, 1), seed=0)


class TestClassSplits:

    def test_overlap_rejected(self):
        with pytest.raises(SplitError):
            ClassSplits(train=("a", "b"), val=("b",), test=("c",))

    def test_lookup(self):
        splits = ClassSplits(train=("a",), val=("b",), test=("c",))
        assert splits.split_of("b") == "val"
        assert splits.get("test") == ("c",)

    def test_invalid_split_name(self):
        splits = ClassSplits(train=("a",), val=("b",), test=("c",))
        with pytest.raises(SplitError) as exc:
            splits.get("holdout")
        assert "Valid options" in str(exc.value)
        with pytest.raises(SplitError):
            splits.split_of("z")

    def test_check_covers(self):
        splits = ClassSplits(train=("a",), val=("b",), test=("c",))
        splits.check_covers(["c", "b", "a"])
        with pytest.raises(SplitError):
            splits.check_covers(["a", "b", "c", "d"])


# ============================================================================
# DATA TYPES
# ============================================================================

class TestImageDataset:

    def test_class_ids_sorted_and_read_only(self, tiny_dataset):
        assert list(tiny_dataset.class_ids) == sorted(tiny_dataset.class_ids)
        assert tiny_dataset.image_shape == (8, 8, 3)
        assert tiny_dataset.num_images == 90
        with pytest.raises(ValueError):
            tiny_dataset.images["synth_000"][0, 0, 0, 0] = 0.5

    def test_empty_dataset(self):
        with pytest.raises(DatasetError):
            ImageDataset({})

    def test_mixed_shapes(self):
        with pytest.raises(DatasetError):
            ImageDataset({"a": np.zeros((2, 8, 8, 3)), "b": np.zeros((2, 9, 9, 3))})

    def test_empty_class(self):
        with pytest.raises(DatasetError):
            ImageDataset({"a": np.zeros((0, 8, 8, 3))})


class TestEpisode:

    def test_images_are_class_major_then_query(self):
        support = np.arange(5 * 2, dtype=np.float32).reshape(5, 2, 1, 1, 1) * np.ones((1, 1, 2, 2, 1))
        episode = Episode(support=support, query=np.full((2, 2, 1), 99.0), target=4)
        stacked = episode.images()
        assert stacked.shape == (11, 2, 2, 1)
        assert [float(img[0, 0, 0]) for img in stacked] == list(range(10)) + [99.0]

    def test_validation(self):
        support = np.zeros((5, 2, 4, 4, 3))
        with pytest.raises(EpisodeError):
            Episode(support=np.zeros((5, 4, 4, 3)), query=np.zeros((4, 4, 3)), target=0)
        with pytest.raises(EpisodeError):
            Episode(support=support, query=np.zeros((5, 5, 3)), target=0)
        with pytest.raises(EpisodeError):
            Episode(support=support, query=np.zeros((4, 4, 3)), target=5)
        with pytest.raises(EpisodeError):
            Episode(support=support, query=np.zeros((4, 4, 3)), target=0, class_ids=("a", "b"))

    def test_query_cannot_be_support(self):
        with pytest.raises(EpisodeError):
            Episode(
                support=np.zeros((5, 2, 4, 4, 3)),
                query=np.zeros((4, 4, 3)),
                target=1,
                support_indices=np.array([[0, 1]] * 5),
                query_index=1,
            )

    def test_shuffled_moves_target(self, tiny_dataset):
        episode = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=0).sample()
        perm = [4, 3, 2, 1, 0]
        shuffled = episode.shuffled(perm)
        assert shuffled.target == 4 - episode.target
        assert shuffled.class_ids == tuple(reversed(episode.class_ids))
        np.testing.assert_array_equal(shuffled.support[shuffled.target], episode.support[episode.target])

    def test_shuffled_rejects_non_permutation(self, tiny_dataset):
        episode = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=0).sample()
        with pytest.raises(EpisodeError):
            episode.shuffled([0, 0, 1, 2, 3])


# ============================================================================
# SAMPLING
# ============================================================================

class TestSampling:
    """Episode structure and sampling statistics"""

    def test_episode_structure(self, tiny_dataset):
        episode = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 3, seed=1).sample()
        assert episode.support.shape == (5, 3, 8, 8, 3)
        assert episode.query.shape == (8, 8, 3)
        assert len(set(episode.class_ids)) == 5
        for pos, class_id in enumerate(episode.class_ids):
            pool = tiny_dataset.images[class_id]
            for slot, index in enumerate(episode.support_indices[pos]):
                np.testing.assert_array_equal(episode.support[pos, slot], pool[index])
            assert len(set(episode.support_indices[pos].tolist())) == 3
        target_pool = tiny_dataset.images[episode.class_ids[episode.target]]
        np.testing.assert_array_equal(episode.query, target_pool[episode.query_index])

    def test_query_never_in_support_and_targets_uniform(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 5, seed=2)
        count = 100_000
        targets = np.zeros(5, dtype=np.int64)
        for _ in range(count):
            episode = sampler.sample()
            assert episode.query_index not in episode.support_indices[episode.target].tolist()
            targets[episode.target] += 1
        sigma = np.sqrt(count * 0.2 * 0.8)
        assert np.all(np.abs(targets - count / 5) < 3 * sigma)

    def test_no_split_leakage(self, tiny_dataset):
        splits = build_class_splits(tiny_dataset.class_ids, (5, 5, 5), seed=0)
        for split in ("train", "val", "test"):
            sampler = EpisodeSampler(tiny_dataset, splits.get(split), 5, 2, seed=4)
            allowed = set(splits.get(split))
            for _ in range(200):
                assert set(sampler.sample().class_ids) <= allowed

    def test_too_few_classes(self, tiny_dataset):
        with pytest.raises(EpisodeError):
            EpisodeSampler(tiny_dataset, tiny_dataset.class_ids[:4], 5, 1)
        with pytest.raises(EpisodeError):
            sample_episode(tiny_dataset, tiny_dataset.class_ids[:4], 5, 1, None, np.random.default_rng(0))

    def test_too_few_images(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 6, seed=0)
        with pytest.raises(EpisodeError):
            sampler.sample()

    def test_unknown_class(self, tiny_dataset):
        with pytest.raises(EpisodeError):
            EpisodeSampler(tiny_dataset, list(tiny_dataset.class_ids[:5]) + ["missing"], 5, 1)

    def test_same_seed_same_stream(self, tiny_dataset):
        a = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=9).sample_batch(20)
        b = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=9).sample_batch(20)
        for x, y in zip(a, b):
            assert x.class_ids == y.class_ids and x.target == y.target
            np.testing.assert_array_equal(x.support, y.support)
            np.testing.assert_array_equal(x.query, y.query)

    def test_clone_replays_stream(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=5)
        sampler.sample_batch(3)
        twin = sampler.clone()
        ahead = sampler.sample_batch(5)
        replay = twin.sample_batch(5)
        assert [e.class_ids for e in ahead] == [e.class_ids for e in replay]
        assert [e.query_index for e in ahead] == [e.query_index for e in replay]

    def test_fork_gives_distinct_reproducible_streams(self, tiny_dataset):
        def forked(seed):
            sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=seed)
            return [tuple(e.class_ids for e in worker.sample_batch(5)) for worker in sampler.fork(3)]

        first, second = forked(8), forked(8)
        assert first == second
        assert len(set(first)) == 3

    def test_with_shots_keeps_classes(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids[:6], 5, 5, seed=0)
        one_shot = sampler.with_shots(1, seed=3)
        episode = one_shot.sample()
        assert episode.shots == 1
        assert set(episode.class_ids) <= set(tiny_dataset.class_ids[:6])


class TestMakeSamplers:

    def test_only_train_augments(self, tiny_dataset):
        splits = build_class_splits(tiny_dataset.class_ids, (5, 5, 5), seed=0)
        samplers = make_samplers(tiny_dataset, splits, 5, 2, AugmentPolicy(), seed=0, eval_seed=10)
        assert samplers["train"].augmenting
        assert not samplers["val"].augmenting
        assert not samplers["test"].augmenting
        assert samplers["val"].class_ids == splits.val

    def test_disabled_policy_never_augments(self, tiny_dataset):
        splits = build_class_splits(tiny_dataset.class_ids, (5, 5, 5), seed=0)
        samplers = make_samplers(tiny_dataset, splits, 5, 2, AugmentPolicy(enabled=False), seed=0, eval_seed=10)
        assert not samplers["train"].augmenting

    def test_eval_stream_fixed_by_eval_seed(self, tiny_dataset):
        splits = build_class_splits(tiny_dataset.class_ids, (5, 5, 5), seed=0)
        a = make_samplers(tiny_dataset, splits, 5, 2, AugmentPolicy(), seed=0, eval_seed=10)
        b = make_samplers(tiny_dataset, splits, 5, 2, AugmentPolicy(), seed=99, eval_seed=10)
        for x, y in zip(a["val"].sample_batch(10), b["val"].sample_batch(10)):
            np.testing.assert_array_equal(x.support, y.support)
            assert x.target == y.target


# ============================================================================
# AUGMENTATION
# ============================================================================

class TestAugmentation:
    """Affine warps and random policies"""

    def test_disabled_policy_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
        out = augment_image(img, AugmentPolicy(enabled=False), np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_no_op_warp_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(6, 6, 3)).astype(np.float32)
        np.testing.assert_array_equal(affine_warp(img), img)

    def test_double_flip_exact(self):
        img = np.random.default_rng(1).uniform(size=(7, 5, 3)).astype(np.float32)
        once = affine_warp(img, flip=True)
        np.testing.assert_array_equal(once, img[:, ::-1])
        np.testing.assert_array_equal(affine_warp(once, flip=True), img)

    @pytest.mark.parametrize("shape", [(4, 4), (4, 4, 3)])
    def test_quarter_turn_matches_rot90(self, shape):
        img = np.random.default_rng(2).uniform(size=shape)
        np.testing.assert_allclose(affine_warp(img, angle_degrees=90.0), np.rot90(img, 1), atol=1e-12)

    def test_outside_pixels_are_zero(self):
        img = np.ones((8, 8, 3))
        out = affine_warp(img, translate=(0.0, 4.0))
        assert np.all(out[:, :4] == 0.0)
        assert np.all(out[:, 4:] == 1.0)

    @settings(max_examples=40, deadline=None)
    @given(
        rotation=st.floats(0.0, 180.0),
        translate=st.floats(0.0, 0.99),
        zoom_low=st.floats(0.5, 1.0),
        zoom_span=st.floats(0.0, 0.5),
        flip=st.floats(0.0, 1.0),
        seed=st.integers(0, 2 ** 16),
    )
    def test_random_policy_keeps_shape_and_range(self, rotation, translate, zoom_low, zoom_span, flip, seed):
        policy = AugmentPolicy(
            rotation_max_degrees=rotation,
            translate_max_fraction=translate,
            zoom_range=(zoom_low, zoom_low + zoom_span),
            hflip_probability=flip,
        )
        img = np.random.default_rng(seed).uniform(size=(8, 8, 3)).astype(np.float32)
        out = augment_image(img, policy, np.random.default_rng(seed))
        assert out.shape == img.shape
        assert out.dtype == img.dtype
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_ten_thousand_random_policies(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            zoom_low = rng.uniform(0.5, 1.0)
            policy = AugmentPolicy(
                rotation_max_degrees=rng.uniform(0.0, 180.0),
                translate_max_fraction=rng.uniform(0.0, 0.99),
                zoom_range=(zoom_low, zoom_low + rng.uniform(0.0, 0.5)),
                hflip_probability=rng.uniform(0.0, 1.0),
            )
            size = int(rng.integers(4, 13))
            img = rng.uniform(size=(size, size, 3)).astype(np.float32)
            out = augment_image(img, policy, rng)
            assert out.shape == img.shape
            assert np.all(np.isfinite(out))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_augmenting_sampler_changes_pixels(self, tiny_dataset):
        policy = AugmentPolicy(rotation_max_degrees=30.0, hflip_probability=0.0)
        sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, policy=policy, augment=True, seed=0)
        episode = sampler.sample()
        pool = tiny_dataset.images[episode.class_ids[0]]
        assert not np.array_equal(episode.support[0, 0], pool[episode.support_indices[0, 0]])

    @pytest.mark.parametrize("zoom", [(0.0, 1.0), (1.2, 1.1)])
    def test_invalid_zoom_range(self, zoom):
        with pytest.raises(ValueError):
            AugmentPolicy(zoom_range=zoom)


# ============================================================================
# SYNTHETIC DATASET
# ============================================================================

class TestSyntheticDataset:

    def test_size_and_range(self):
        dataset = synth_dataset_generate(20, 30, 84, seed=0)
        assert len(dataset) == 20
        assert dataset.num_images == 600
        assert dataset.image_shape == (84, 84, 3)
        stack = dataset.images["synth_007"]
        assert stack.dtype == np.float32
        assert stack.min() >= 0.0 and stack.max() <= 1.0

    def test_bitwise_reproducible(self):
        a = synth_dataset_generate(6, 4, 16, seed=5)
        b = synth_dataset_generate(6, 4, 16, seed=5)
        for class_id in a.class_ids:
            np.testing.assert_array_equal(a.images[class_id], b.images[class_id])

    def test_seed_changes_images(self):
        a = synth_dataset_generate(3, 2, 16, seed=1)
        b = synth_dataset_generate(3, 2, 16, seed=2)
        assert not np.array_equal(a.images["synth_000"], b.images["synth_000"])

    @pytest.mark.parametrize("args", [(0, 5, 8), (5, 0, 8), (5, 5, 1)])
    def test_invalid_sizes(self, args):
        with pytest.raises(DatasetError):
            synth_dataset_generate(*args, seed=0)


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
