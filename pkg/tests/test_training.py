"""
Training tests
Nadam, schedule arithmetic, the epoch loop, best-validation selection and checkpoints
"""
import numpy as np
import pytest

import checkpoint
import config
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from episodes import Episode, EpisodeSampler, build_class_splits, make_samplers
from errors import CheckpointError, CheckpointVersionError, ConfigError, OptimizerError, ShapeError
from ingest import load_dataset, resolve_splits
from maco_model import MacoModel
from nadam import Nadam, NadamState, nadam_step
from schemas import PRESET_NAMES, OptimizerConfig, RunConfig, Schedule, preset
from tensor_core import ParamStore
from training import MetricsRecord, evaluate, fit, steps_per_epoch, train_epoch


def single_param_store(values) -> ParamStore:
    params = ParamStore()
    params.add("theta", np.asarray(values, dtype=np.float64))
    return params


def snapshot_equal(a, b) -> bool:
    if a.params.keys() != b.params.keys() or a.running.keys() != b.running.keys():
        return False
    return all(np.array_equal(a.params[p], b.params[p]) for p in a.params) and all(
        np.array_equal(a.running[p][0], b.running[p][0]) and np.array_equal(a.running[p][1], b.running[p][1])
        for p in a.running
    )


@pytest.fixture
def sampler(tiny_dataset):
    return EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=21)


# ============================================================================
# NADAM
# ============================================================================

class TestNadam:
    """Nesterov-accelerated Adam updates"""

    def test_first_step_value(self, float64):
        params = single_param_store([1.0])
        state = NadamState.for_params(params, OptimizerConfig())
        nadam_step(params, {"theta": np.array([1.0])}, state)
        assert abs(params["theta"].data[0] - 0.998100000019) < 1e-12
        assert state.step == 1
        np.testing.assert_allclose(state.m["theta"], [0.1])
        np.testing.assert_allclose(state.v["theta"], [0.001])

    def test_zero_gradient_leaves_params(self, float64):
        params = single_param_store([0.3, -2.0, 5.0])
        state = NadamState.for_params(params, OptimizerConfig())
        nadam_step(params, {"theta": np.zeros(3)}, state)
        np.testing.assert_array_equal(params["theta"].data, [0.3, -2.0, 5.0])

    def test_zero_learning_rate_only_moves_moments(self, float64):
        params = single_param_store([1.0, 2.0])
        state = NadamState.for_params(params, OptimizerConfig(learning_rate=0.0))
        nadam_step(params, {"theta": np.array([0.5, -0.5])}, state)
        np.testing.assert_array_equal(params["theta"].data, [1.0, 2.0])
        assert np.all(state.m["theta"] != 0.0)
        assert np.all(state.v["theta"] > 0.0)

    def test_missing_gradient(self):
        params = single_param_store([1.0])
        with pytest.raises(OptimizerError) as exc:
            nadam_step(params, {}, NadamState.for_params(params, OptimizerConfig()))
        assert "theta" in str(exc.value)

    def test_gradient_shape_mismatch(self):
        params = single_param_store([1.0, 2.0])
        with pytest.raises(ShapeError):
            nadam_step(params, {"theta": np.ones(3)}, NadamState.for_params(params, OptimizerConfig()))

    def test_converges_on_quadratic(self, float64):
        rng = np.random.default_rng(0)
        scales = np.linspace(1.0, 10.0, 10)
        start = rng.uniform(0.5, 1.5, size=10) * rng.choice([-1.0, 1.0], size=10)
        params = single_param_store(start)
        optimizer = Nadam(params, OptimizerConfig(learning_rate=0.05))

        def loss(theta):
            return 0.5 * float(np.sum(scales * theta ** 2))

        initial = loss(params["theta"].data)
        for _ in range(200):
            optimizer.step({"theta": scales * params["theta"].data})
        assert loss(params["theta"].data) <= initial / 100.0
        assert optimizer.steps_taken == 200

    def test_state_copy_is_independent(self):
        params = single_param_store([1.0])
        state = NadamState.for_params(params, OptimizerConfig())
        frozen = state.copy()
        nadam_step(params, {"theta": np.array([1.0])}, state)
        assert frozen.step == 0
        assert frozen.m["theta"][0] == 0.0


# ============================================================================
# SCHEDULE AND METRICS
# ============================================================================

class TestSchedule:

    def test_benchmark_schedule(self):
        assert steps_per_epoch(60000, 32) == 1875
        assert preset("cub").schedule.total_steps == 93750

    def test_desk_schedule(self):
        assert preset("synthetic-quick").schedule.steps_per_epoch == 250

    def test_partial_batch_counts(self):
        assert steps_per_epoch(10, 3) == 4
        assert Schedule(epochs=1, episodes_per_epoch=10, batch_size=3).steps_per_epoch == 4

    def test_invalid(self):
        with pytest.raises(ConfigError):
            steps_per_epoch(0, 32)


class TestPresets:
    """Run presets shipped under configs/"""

    def test_names_follow_config_files(self):
        assert PRESET_NAMES == ["cub", "mini-dogsnet", "mini-imagenet", "synthetic-quick"]

    @pytest.mark.parametrize("path", sorted(config.CONFIGS_DIR.glob("*.json")), ids=lambda p: p.stem)
    def test_config_file_validates(self, path):
        run = RunConfig.from_file(path)
        assert run.name == path.stem
        assert preset(path.stem) == run

    def test_benchmark_split_counts(self):
        assert preset("cub").splits.counts == (100, 50, 50)
        assert preset("cub").model.relational_depth == 2
        assert preset("mini-imagenet").splits.counts == (64, 16, 20)
        assert preset("mini-dogsnet").model.conditioning_depth == 4

    def test_unknown_preset(self):
        with pytest.raises(ConfigError) as exc:
            preset("omniglot")
        assert "Valid options" in str(exc.value)


class TestMetricsRecord:

    def test_from_counts(self):
        record = MetricsRecord.from_counts(2, "val", loss_sum=8.0, correct=3, episodes=4)
        assert record.loss == 2.0
        assert record.accuracy == 0.75
        assert record.correct == 3

    @pytest.mark.parametrize("kwargs", [
        {"split": "holdout", "accuracy": 0.5, "episodes": 1},
        {"split": "val", "accuracy": 1.5, "episodes": 1},
        {"split": "val", "accuracy": 0.5, "episodes": -1},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            MetricsRecord(epoch=1, loss=1.0, **kwargs)

    def test_needs_episodes(self):
        with pytest.raises(ConfigError):
            MetricsRecord.from_counts(1, "train", 0.0, 0, 0)


# ============================================================================
# EPOCHS
# ============================================================================

class TestTrainEpoch:
    """Minibatch updates over one epoch"""

    def test_steps_and_counts(self, tiny_config, sampler):
        model = MacoModel(tiny_config, seed=0)
        optimizer = Nadam(model.params, OptimizerConfig())
        before = model.params.snapshot()
        losses = []

        record = train_epoch(model, sampler, 5, 2, optimizer, epoch=4,
                             on_batch=lambda step, loss: losses.append((step, loss)))

        assert record.split == "train" and record.epoch == 4
        assert record.episodes == 5
        assert 0 <= record.correct <= 5
        assert [s for s, _ in losses] == [0, 1, 2]
        assert all(np.isfinite(l) for _, l in losses)
        assert optimizer.steps_taken == 3
        assert not snapshot_equal(before, model.params.snapshot())

    @pytest.mark.slow
    def test_moving_average_loss_decreases(self, tiny_config, tiny_dataset):
        window, batches, runs = 20, 50, 20
        decreased = 0
        for seed in range(runs):
            model = MacoModel(tiny_config, seed=seed)
            optimizer = Nadam(model.params, OptimizerConfig(learning_rate=0.001))
            sampler = EpisodeSampler(tiny_dataset, tiny_dataset.class_ids, 5, 2, seed=100 + seed)
            losses = []
            train_epoch(model, sampler, batches * 8, 8, optimizer,
                        on_batch=lambda step, loss: losses.append(loss))
            assert len(losses) == batches
            moving = np.convolve(losses, np.ones(window) / window, mode="valid")
            decreased += moving[-1] < moving[0]
        assert decreased >= 0.95 * runs


class TestEvaluate:

    def test_repeatable_and_side_effect_free(self, tiny_config, sampler):
        model = MacoModel(tiny_config, seed=0)
        before = model.params.snapshot()
        a = evaluate(model, sampler.clone(), 6, batch_size=4, epoch=2)
        b = evaluate(model, sampler.clone(), 6, batch_size=4, epoch=2)
        assert a == b
        assert a.split == "val" and a.episodes == 6
        assert snapshot_equal(before, model.params.snapshot())

    @pytest.mark.slow
    def test_untrained_accuracy_near_chance(self, tiny_config):
        model = MacoModel(tiny_config, seed=0)
        rng = np.random.default_rng(0)

        class NoiseSampler:
            def sample_batch(self, count):
                return [
                    Episode(support=rng.uniform(size=(5, 2, 8, 8, 3)), query=rng.uniform(size=(8, 8, 3)),
                            target=int(rng.integers(5)))
                    for _ in range(count)
                ]

        record = evaluate(model, NoiseSampler(), 10_000, batch_size=50, split="test")
        assert record.episodes == 10_000
        assert abs(record.accuracy - 0.2) <= 0.02


# ============================================================================
# FIT
# ============================================================================

def stub_trainer(model, sampler, episodes, batch_size, optimizer, epoch=1):
    bias = model.params["classifier/output/bias"]
    bias.data = np.full_like(bias.data, float(epoch))
    return MetricsRecord(epoch=epoch, split="train", loss=1.0, accuracy=0.5, episodes=episodes)


def stub_evaluator(accuracies):
    def _evaluate(model, sampler, num_episodes, batch_size=32, epoch=0, split="val"):
        return MetricsRecord(epoch=epoch, split=split, loss=1.0, accuracy=accuracies[epoch - 1],
                             episodes=num_episodes)
    return _evaluate


class TestFit:
    """Best-validation selection"""

    @pytest.mark.parametrize("accuracies, best, improved", [
        ([0.5, 0.7, 0.6], 2, [True, True, False]),
        ([0.2, 0.3, 0.4], 3, [True, True, True]),
        ([0.6, 0.6, 0.5], 1, [True, False, False]),
        ([0.4, 0.6, 0.6], 2, [True, True, False]),
    ])
    def test_best_epoch(self, tiny_run_config, sampler, accuracies, best, improved):
        run = tiny_run_config.model_copy(update={"schedule": Schedule(
            epochs=len(accuracies), episodes_per_epoch=4, batch_size=2, val_episodes=4)})
        flags = []

        result = fit(run, {"train": sampler, "val": sampler}, trainer=stub_trainer,
                     evaluator=stub_evaluator(accuracies), on_epoch=lambda t, v, improved: flags.append(improved))

        assert result.best_epoch == best
        assert result.best.val_accuracy == accuracies[best - 1]
        assert np.all(result.best.params.params["classifier/output/bias"] == best)
        assert result.val_accuracies == accuracies
        assert len(result.history) == 2 * len(accuracies)
        assert flags == improved

    def test_validation_sees_same_episodes_each_epoch(self, tiny_run_config, sampler):
        seen = []

        def recording_evaluator(model, val_sampler, num_episodes, batch_size=32, epoch=0, split="val"):
            seen.append([e.query_index for e in val_sampler.sample_batch(num_episodes)])
            return MetricsRecord(epoch=epoch, split=split, loss=1.0, accuracy=0.5, episodes=num_episodes)

        fit(tiny_run_config, {"train": sampler, "val": sampler}, trainer=stub_trainer, evaluator=recording_evaluator)
        assert len(seen) == 2
        assert seen[0] == seen[1]

    def test_real_epochs(self, tiny_run_config, tiny_dataset):
        splits = build_class_splits(tiny_dataset.class_ids, (5, 5, 5), seed=0)
        samplers = make_samplers(tiny_dataset, splits, 5, 2, tiny_run_config.augment, seed=3, eval_seed=11)
        result = fit(tiny_run_config, samplers)
        assert [r.split for r in result.history] == ["train", "val", "train", "val"]
        assert result.best.epoch in (1, 2)
        assert result.best.optimizer.step in (2, 4)
        assert result.best.seeds["eval_seed"] == 11


# ============================================================================
# CHECKPOINTS
# ============================================================================

class TestCheckpoint:
    """Best-model persistence"""

    @pytest.fixture
    def trained(self, tiny_run_config, sampler):
        model = MacoModel(tiny_run_config.model, seed=0)
        optimizer = Nadam(model.params, tiny_run_config.optimizer)
        train_epoch(model, sampler, 4, 2, optimizer)
        return model, optimizer

    def test_round_trip_is_exact(self, trained, tiny_run_config, sampler, tmp_path):
        model, optimizer = trained
        ckpt = Checkpoint.capture(model, optimizer.state, epoch=3, val_accuracy=0.4, run_config=tiny_run_config)
        path = save_checkpoint(ckpt, tmp_path / "best.npz")
        loaded = load_checkpoint(path)

        assert snapshot_equal(loaded.params, ckpt.params)
        assert loaded.epoch == 3 and loaded.val_accuracy == 0.4
        assert loaded.model_config == tiny_run_config.model
        assert loaded.run_config == tiny_run_config
        assert loaded.augment == tiny_run_config.augment
        assert loaded.seeds == {"seed": 3, "eval_seed": 11, "split_seed": 0, "dataset_seed": 0}
        assert loaded.optimizer.hyperparameters() == optimizer.state.hyperparameters()
        assert loaded.optimizer.step == 2
        for p in optimizer.state.m:
            np.testing.assert_array_equal(loaded.optimizer.m[p], optimizer.state.m[p])
            np.testing.assert_array_equal(loaded.optimizer.v[p], optimizer.state.v[p])

        original = evaluate(model, sampler.clone(), 8, batch_size=4)
        restored = evaluate(loaded.build_model(), sampler.clone(), 8, batch_size=4)
        assert original == restored

    def test_paths_stored_with_dots(self, trained, tmp_path):
        model, optimizer = trained
        path = save_checkpoint(Checkpoint.capture(model, optimizer.state, 1, 0.2), tmp_path / "c.npz")
        with np.load(path) as npz:
            assert "param::feature.block1.conv.kernel" in npz.files
            assert "bn_mean::relational.block1.bn" in npz.files

    def test_capture_is_a_copy(self, trained):
        model, optimizer = trained
        ckpt = Checkpoint.capture(model, optimizer.state, 1, 0.2)
        model.params["feature/dense/bias"].data = model.params["feature/dense/bias"].data + 1.0
        assert not np.array_equal(ckpt.params.params["feature/dense/bias"], model.params["feature/dense/bias"].data)

    def test_code_major_version_mismatch(self, trained, tmp_path, monkeypatch):
        model, optimizer = trained
        path = save_checkpoint(Checkpoint.capture(model, optimizer.state, 1, 0.2), tmp_path / "c.npz")
        monkeypatch.setattr(config, "__version__", "2.0.0")
        with pytest.raises(CheckpointVersionError) as exc:
            load_checkpoint(path)
        assert exc.value.field == "code_version"

    def test_minor_version_change_loads(self, trained, tmp_path, monkeypatch):
        model, optimizer = trained
        path = save_checkpoint(Checkpoint.capture(model, optimizer.state, 1, 0.2), tmp_path / "c.npz")
        monkeypatch.setattr(config, "__version__", "1.9.0")
        assert load_checkpoint(path).epoch == 1

    def test_format_version_mismatch(self, trained, tmp_path, monkeypatch):
        model, optimizer = trained
        path = save_checkpoint(Checkpoint.capture(model, optimizer.state, 1, 0.2), tmp_path / "c.npz")
        monkeypatch.setattr(checkpoint, "FORMAT_VERSION", checkpoint.FORMAT_VERSION + 1)
        with pytest.raises(CheckpointVersionError) as exc:
            load_checkpoint(path)
        assert exc.value.field == "format_version"

    def test_missing_and_garbage_files(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.npz")
        garbage = tmp_path / "garbage.npz"
        garbage.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(garbage)
        bare = tmp_path / "bare.npz"
        np.savez(bare, x=np.zeros(3))
        with pytest.raises(CheckpointError):
            load_checkpoint(bare)

    def test_unwritable_destination(self, trained, tmp_path):
        model, optimizer = trained
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not a directory")
        with pytest.raises(CheckpointError):
            save_checkpoint(Checkpoint.capture(model, optimizer.state, 1, 0.2), blocker / "c.npz")


# ============================================================================
# LEARNING SMOKE TEST
# ============================================================================

@pytest.mark.slow
class TestLearning:
    """Desk-scale training on the synthetic preset"""

    def _best_val_accuracy(self, variant: str, seed: int) -> float:
        run = preset("synthetic-quick").with_variant(variant).with_seed(seed)
        dataset = load_dataset(run.dataset, run.model.image_size)
        splits = resolve_splits(run, dataset)
        samplers = make_samplers(dataset, splits, run.model.ways, run.model.shots, run.augment,
                                 run.seed, run.eval_seed)
        return fit(run, samplers).best.val_accuracy

    def test_maco_learns(self):
        accuracies = [self._best_val_accuracy("maco", seed) for seed in range(5)]
        assert sum(acc >= 0.6 for acc in accuracies) >= 4, accuracies

    def test_ablation_beats_chance(self):
        assert self._best_val_accuracy("no-cond", 0) > 0.4


if __name__ == "__main__":
    pytest.main([__file__, "-v", "--tb=short"])
