"""Tests for the alternating trainer: schedules, code updates, resume."""

import numpy as np
import pytest

from finehash.anchors import AnchorBank
from finehash.data import Dataset, SynthConfig, generate_synthetic
from finehash.errors import ContractError, DimensionError, DomainError, FileFormatError
from finehash.model import ModelConfig
from finehash.trainer import (
    AlternatingTrainer,
    TrainConfig,
    encode_images,
    frobenius_objective,
    learning_rate_at,
    load_checkpoint,
    save_checkpoint,
    sweep_codes,
    update_code_column,
    warmup_iters,
)
from helpers import enumerate_code_column, naive_frobenius_objective

SMALL_MODEL = ModelConfig(parts=2, bits=8, image_side=16, backbone_channels=(6, 8),
                          backbone_pools=(2, 2), refined_channels=8)
SMALL_SYNTH = SynthConfig(num_classes=3, per_class=6, queries_per_class=2, image_side=16,
                          parts_per_image=2, patch_size=4, position_jitter=0.5,
                          pixel_noise=0.01, pattern_scale=0.5, seed=9)


@pytest.fixture(scope="module")
def small_dataset():
    return generate_synthetic(SMALL_SYNTH)


def small_train(**overrides) -> TrainConfig:
    base = dict(outer_iters=3, epochs_per_iter=1, batch_size=6, samples_per_epoch=12,
                warmup_fraction=0.34, seed=7)
    base.update(overrides)
    return TrainConfig(**base)


class TestSchedules:
    def test_defaults(self):
        config = TrainConfig()
        assert config.outer_iters == 15
        assert config.epochs_per_iter == 2
        assert config.batch_size == 64
        assert config.learning_rate == 1e-3
        assert config.weight_decay == 1e-4
        assert config.lr_drop_points == (0.6, 0.8)
        assert config.exchange

    def test_lr_boundaries_fifteen_iters(self):
        config = TrainConfig(outer_iters=15)
        rates = [learning_rate_at(config, t) for t in range(15)]
        assert rates[:9] == [1e-3] * 9
        assert rates[9:12] == pytest.approx([1e-4] * 3)
        assert rates[12:] == pytest.approx([1e-5] * 3)

    def test_lr_boundaries_ten_iters(self):
        config = TrainConfig(outer_iters=10)
        assert learning_rate_at(config, 5) == 1e-3
        assert learning_rate_at(config, 6) == pytest.approx(1e-4)
        assert learning_rate_at(config, 8) == pytest.approx(1e-5)

    def test_lr_custom_factor(self):
        config = TrainConfig(outer_iters=10, lr_drop_points=(0.5,), lr_drop_factor=0.5)
        assert learning_rate_at(config, 4) == 1e-3
        assert learning_rate_at(config, 5) == pytest.approx(5e-4)

    def test_warmup_quarter_of_fifteen(self):
        assert warmup_iters(TrainConfig(outer_iters=15, warmup_fraction=0.25)) == 4

    def test_warmup_full_and_zero(self):
        assert warmup_iters(TrainConfig(outer_iters=4, warmup_fraction=1.0)) == 4
        assert warmup_iters(TrainConfig(outer_iters=4, warmup_fraction=0.0)) == 0

    @pytest.mark.parametrize("kwargs", [
        {"outer_iters": 0}, {"batch_size": 0}, {"samples_per_epoch": 0},
        {"learning_rate": 0.0}, {"lr_drop_factor": 0.0}, {"lr_drop_points": (1.5,)},
        {"weight_decay": -1.0}, {"warmup_fraction": 1.5}, {"spatial_weight": -0.1},
        {"margin": -0.1}, {"seed": -1}, {"epochs_per_iter": -1},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ContractError):
            TrainConfig(**kwargs)


def random_instance(rng, m, n, bits):
    relaxed = rng.uniform(-1.0, 1.0, size=(m, bits))
    codes = np.where(rng.random((n, bits)) < 0.5, -1.0, 1.0)
    sim = np.where(rng.random((m, n)) < 0.5, -1.0, 1.0)
    return relaxed, codes, sim


class TestCodeColumn:
    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            m = int(rng.integers(2, 7))
            n = int(rng.integers(2, 8))
            bits = int(rng.integers(2, 6))
            relaxed, codes, sim = random_instance(rng, m, n, bits)
            col = int(rng.integers(0, bits))
            fast = update_code_column(relaxed, codes, sim, bits, col)
            oracle = enumerate_code_column(relaxed, codes, sim, bits, col)
            assert np.array_equal(fast, oracle[:, col])

    def test_zero_relaxed_ties_keep_previous(self):
        rng = np.random.default_rng(3)
        _, codes, sim = random_instance(rng, 4, 5, 3)
        relaxed = np.zeros((4, 3))
        for col in range(3):
            assert np.array_equal(update_code_column(relaxed, codes, sim, 3, col),
                                  codes[:, col])

    def test_dead_bit_column_tie(self):
        # the updated column of relaxed is all zero, so every margin term
        # cancels exactly and the previous signs survive
        relaxed = np.array([[0.0, 0.7], [0.0, -0.3]])
        codes = np.array([[1.0, -1.0], [-1.0, -1.0]])
        sim = np.array([[1.0, -1.0], [1.0, -1.0]])
        assert np.array_equal(update_code_column(relaxed, codes, sim, 2, 0), codes[:, 0])

    def test_sample_permutation_invariance(self):
        rng = np.random.default_rng(5)
        relaxed, codes, sim = random_instance(rng, 6, 5, 4)
        perm = rng.permutation(6)
        direct = update_code_column(relaxed, codes, sim, 4, 2)
        permuted = update_code_column(relaxed[perm], codes, sim[perm], 4, 2)
        assert np.array_equal(direct, permuted)

    def test_single_pair_exact(self):
        # one sample, one database item: margin = bits*sim*u_k - u_k (u . v - u_k v_k)
        relaxed = np.array([[0.5, -0.5]])
        codes = np.array([[1.0, 1.0]])
        sim = np.array([[1.0]])
        # margin for col 0: 2*1*0.5 - 0.5*(-0.5*1) = 1.25 > 0
        assert update_code_column(relaxed, codes, sim, 2, 0)[0] == 1.0
        # margin for col 1: 2*1*(-0.5) - (-0.5)*(0.5*1) = -0.75 < 0
        assert update_code_column(relaxed, codes, sim, 2, 1)[0] == -1.0

    def test_validation(self):
        rng = np.random.default_rng(0)
        relaxed, codes, sim = random_instance(rng, 3, 4, 2)
        with pytest.raises(ContractError):
            update_code_column(relaxed, codes, sim, 2, 2)
        with pytest.raises(DimensionError):
            update_code_column(relaxed, codes, sim[:, :3], 2, 0)
        with pytest.raises(DomainError):
            update_code_column(relaxed, codes * 2.0, sim, 2, 0)


class TestSweep:
    def test_objective_never_increases(self):
        rng = np.random.default_rng(23)
        relaxed, codes, sim = random_instance(rng, 20, 30, 8)
        objective = frobenius_objective(relaxed, codes, sim, 8)
        for _ in range(3):
            for col in range(8):
                codes[:, col] = update_code_column(relaxed, codes, sim, 8, col)
                after = frobenius_objective(relaxed, codes, sim, 8)
                assert after <= objective + 1e-8
                objective = after

    def test_sweep_equals_column_loop(self):
        rng = np.random.default_rng(29)
        relaxed, codes, sim = random_instance(rng, 10, 12, 5)
        manual = codes.copy()
        for col in range(5):
            manual[:, col] = update_code_column(relaxed, manual, sim, 5, col)
        assert np.array_equal(sweep_codes(relaxed, codes, sim, 5, sweeps=1), manual)

    def test_zero_sweeps_identity(self):
        rng = np.random.default_rng(31)
        relaxed, codes, sim = random_instance(rng, 4, 6, 3)
        assert np.array_equal(sweep_codes(relaxed, codes, sim, 3, sweeps=0), codes)

    def test_sweep_input_not_mutated(self):
        rng = np.random.default_rng(37)
        relaxed, codes, sim = random_instance(rng, 5, 6, 4)
        before = codes.copy()
        sweep_codes(relaxed, codes, sim, 4, sweeps=2)
        assert np.array_equal(codes, before)

    def test_frobenius_matches_naive(self):
        rng = np.random.default_rng(41)
        relaxed, codes, sim = random_instance(rng, 7, 9, 4)
        fast = frobenius_objective(relaxed, codes, sim, 4)
        assert fast == pytest.approx(naive_frobenius_objective(relaxed, codes, sim, 4),
                                     rel=1e-12)


class TestTrainerLoop:
    def test_iteration_metrics_and_history(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        metrics = trainer.run_iteration()
        assert metrics["iteration"] == 0
        assert metrics["theta_loss"] > 0.0
        assert metrics["code_objective"] > 0.0
        assert metrics["anchor_drift"] == 0.0
        assert trainer.iteration == 1
        second = trainer.run_iteration()
        assert second["anchor_drift"] > 0.0

    def test_theta_loss_decreases(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL,
                                     small_train(outer_iters=4, epochs_per_iter=2))
        history = trainer.train()
        assert history[-1]["theta_loss"] < history[0]["theta_loss"]
        assert history[-1]["code_objective"] < history[0]["code_objective"]

    def test_database_codes_stay_binary(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        trainer.train()
        assert trainer.codes.shape == (18, 8)
        assert np.all(np.abs(trainer.codes) == 1.0)

    def test_epochs_zero_leaves_weights_untouched(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL,
                                     small_train(epochs_per_iter=0))
        before = {name: arr.copy() for name, arr in trainer.params.arrays().items()}
        metrics = trainer.run_iteration()
        assert metrics["theta_loss"] is None
        for name, arr in trainer.params.arrays().items():
            assert np.array_equal(arr, before[name])

    def test_single_iteration_schedule(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL,
                                     small_train(outer_iters=1))
        history = trainer.train()
        assert len(history) == 1
        with pytest.raises(ContractError):
            trainer.run_iteration()

    def test_full_warmup_matches_no_exchange(self, small_dataset):
        # with exchange never activating, the rng draws line up exactly
        config_a = small_train(outer_iters=3, exchange=True, warmup_fraction=1.0)
        config_b = small_train(outer_iters=3, exchange=False)
        a = AlternatingTrainer(small_dataset, SMALL_MODEL, config_a)
        b = AlternatingTrainer(small_dataset, SMALL_MODEL, config_b)
        a.train()
        b.train()
        for name, arr in a.params.arrays().items():
            assert np.array_equal(arr, b.params.arrays()[name])
        assert np.array_equal(a.codes, b.codes)

    def test_exchange_changes_trajectory(self, small_dataset):
        with_exchange = AlternatingTrainer(small_dataset, SMALL_MODEL,
                                           small_train(warmup_fraction=0.0))
        without = AlternatingTrainer(small_dataset, SMALL_MODEL,
                                     small_train(exchange=False))
        with_exchange.train()
        without.train()
        assert not np.array_equal(with_exchange.params.arrays()["hash.weight"],
                                  without.params.arrays()["hash.weight"])

    def test_image_shape_mismatch_rejected(self, small_dataset):
        with pytest.raises(ContractError):
            AlternatingTrainer(small_dataset, ModelConfig(image_side=32), small_train())

    def test_missing_query_split_rejected(self):
        images = np.zeros((4, 16, 16, 3))
        data = Dataset(images=images, labels=np.array([0, 0, 1, 1]),
                       splits=np.array(["train-db"] * 4))
        with pytest.raises(ContractError):
            AlternatingTrainer(data, SMALL_MODEL, small_train())


class TestResume:
    def test_checkpoint_round_trip(self, small_dataset, tmp_path):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        trainer.run_iteration()
        path = tmp_path / "ckpt.fht1"
        trainer.save(path)
        state = load_checkpoint(path)
        assert state.iteration == 1
        assert state.train_config == trainer.train_config
        assert state.params.config == SMALL_MODEL
        assert np.array_equal(state.codes, trainer.codes)
        for name, arr in trainer.params.arrays().items():
            assert np.array_equal(state.params.arrays()[name], arr)
        assert state.anchors is not None
        for class_id in state.anchors.classes:
            assert np.array_equal(state.anchors.get(class_id),
                                  trainer.anchors.get(class_id))

    def test_explicit_weights_round_trip(self, small_dataset, tmp_path):
        config = small_train(spatial_weight=0.5, channel_weight=0.0)
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, config)
        path = tmp_path / "ckpt.fht1"
        trainer.save(path)
        state = load_checkpoint(path)
        assert state.train_config.spatial_weight == 0.5
        assert state.train_config.channel_weight == 0.0
        assert state.anchors is None

    def test_resume_replays_exact_trajectory(self, small_dataset, tmp_path):
        config = small_train(outer_iters=4)
        straight = AlternatingTrainer(small_dataset, SMALL_MODEL, config)
        stopped = AlternatingTrainer(small_dataset, SMALL_MODEL, config)
        straight.run_iteration()
        straight.run_iteration()
        stopped.run_iteration()
        stopped.run_iteration()
        path = tmp_path / "ckpt.fht1"
        stopped.save(path)
        resumed = AlternatingTrainer.from_checkpoint(path, small_dataset)
        assert resumed.iteration == 2
        straight.train()
        resumed.train()
        for name, arr in straight.params.arrays().items():
            assert np.array_equal(resumed.params.arrays()[name], arr)
        assert np.array_equal(resumed.codes, straight.codes)
        for class_id in straight.anchors.classes:
            assert np.array_equal(resumed.anchors.get(class_id),
                                  straight.anchors.get(class_id))

    def test_checkpoint_missing_entry(self, tmp_path):
        from finehash.checkpoint import save_arrays

        path = tmp_path / "bad.fht1"
        save_arrays(path, {"config.model.parts": np.array(2.0)})
        with pytest.raises(FileFormatError):
            load_checkpoint(path)

    def test_wrong_database_size_rejected(self, small_dataset, tmp_path):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        path = tmp_path / "ckpt.fht1"
        trainer.save(path)
        other = generate_synthetic(SynthConfig(num_classes=3, per_class=4,
                                               queries_per_class=2, image_side=16,
                                               parts_per_image=2, patch_size=4, seed=1))
        with pytest.raises(ContractError):
            AlternatingTrainer.from_checkpoint(path, other)


class TestInitialization:
    def test_initial_codes_balanced_per_bit(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        assert np.all(np.abs(trainer.codes) == 1.0)
        assert np.array_equal(trainer.codes.sum(axis=0), np.zeros(SMALL_MODEL.bits))

    def test_hash_bias_is_mean_projection(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        descriptors = encode_images(trainer.params, small_dataset.train_images)[1]
        expected = trainer.params.hash_weight.data @ descriptors.mean(axis=0)
        np.testing.assert_allclose(trainer.params.hash_bias.data, expected, atol=1e-12)

    def test_zero_hash_row_keeps_plus_one_bit(self, small_dataset):
        # the sign(0) = +1 convention must survive threshold refreshes
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL,
                                     small_train(epochs_per_iter=0))
        trainer.params.hash_weight.data[0, :] = 0.0
        trainer.run_iteration()
        assert trainer.params.hash_bias.data[0] == 0.0
        codes = trainer.encode(small_dataset.query_images)
        assert np.all(codes[:, 0] == 1.0)

    def test_codes_track_thresholds_not_raw_projections(self, small_dataset):
        # with entrywise-positive descriptors, unthresholded projections
        # give every image the same sign pattern; the trained pipeline
        # must do better than one repeated code
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        codes = trainer.encode(small_dataset.train_images)
        assert len({row.tobytes() for row in codes.astype(np.int8)}) > 1


class TestEncoding:
    def test_encode_shapes_and_values(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        trainer.run_iteration()
        codes = trainer.encode(small_dataset.query_images)
        assert codes.shape == (6, 8)
        assert np.all(np.abs(codes) == 1.0)
        descriptors = trainer.encode_descriptors(small_dataset.query_images)
        assert descriptors.shape == (6, SMALL_MODEL.descriptor_dim)
        assert np.all(np.isfinite(descriptors))

    def test_encode_deterministic(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        first = trainer.encode(small_dataset.query_images)
        second = trainer.encode(small_dataset.query_images)
        assert np.array_equal(first, second)

    def test_encode_ignores_anchor_bank(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        trainer.train()
        baseline = trainer.encode(small_dataset.query_images)
        shifted = {c: trainer.anchors.get(c) + 100.0 for c in trainer.anchors.classes}
        trainer.anchors = AnchorBank(shifted)
        assert np.array_equal(trainer.encode(small_dataset.query_images), baseline)

    def test_encode_images_pair_consistent(self, small_dataset):
        trainer = AlternatingTrainer(small_dataset, SMALL_MODEL, small_train())
        codes, descriptors = encode_images(trainer.params, small_dataset.query_images[:2])
        assert np.array_equal(codes, trainer.encode(small_dataset.query_images[:2]))
        assert descriptors.shape == (2, SMALL_MODEL.descriptor_dim)
