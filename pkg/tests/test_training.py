import json

import numpy as np
import pytest

from app.core.errors import ConfigError, ContractError, DimensionError, NumericError, \
    TrainingDivergedError
from app.core.rng import Rng
from app.core.tensor import Tensor
from app.models import build_model
from app.services.oracles import nearest_centroid_accuracy
from app.services.toy_data import CLASS_NAMES, ToySpec, class_pattern, generate_toy_dataset
from app.services.training import (
    AdamWState, TrainHyperparams, TrainLog, TrainState, Trainer, TriangularSchedule, adamw_step,
    clip_grad_global_norm, evaluate, overfit_batch, predict, train_loop, triangular_lr,
)


@pytest.fixture
def small_toy():
    return generate_toy_dataset(ToySpec(train_per_class=4, test_per_class=2, seed=3))


class TestSchedule:
    def test_triangle(self):
        schedule = TriangularSchedule(peak_lr=1.0, total_steps=100)
        points = [triangular_lr(schedule, s) for s in (0, 25, 50, 75, 100)]
        assert points == pytest.approx([0.0, 0.5, 1.0, 0.5, 0.0])

    def test_floor(self):
        schedule = TriangularSchedule(peak_lr=1.0, total_steps=10, floor_lr=0.1)
        assert triangular_lr(schedule, 0) == pytest.approx(0.1)
        assert triangular_lr(schedule, 5) == pytest.approx(1.0)

    def test_peak_at_start(self):
        schedule = TriangularSchedule(peak_lr=2.0, total_steps=4, peak_fraction=0.0)
        assert [triangular_lr(schedule, s) for s in range(5)] == pytest.approx([2, 1.5, 1, 0.5, 0])

    def test_out_of_range_step(self):
        with pytest.raises(ContractError):
            triangular_lr(TriangularSchedule(peak_lr=1.0, total_steps=10), 11)

    def test_empty_schedule(self):
        with pytest.raises(ConfigError):
            TriangularSchedule(peak_lr=1.0, total_steps=0)


class TestClipping:
    def test_norm_above_limit_is_rescaled(self):
        clipped, norm = clip_grad_global_norm({"a": np.array([1.2, 0.0]), "b": np.array([1.6])})
        assert norm == pytest.approx(2.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
        np.testing.assert_allclose(clipped["b"], [0.8])

    def test_norm_below_limit_is_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_grad_global_norm(grads)
        assert clipped is grads and norm == pytest.approx(0.5)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        w = Tensor(np.array([[1.0, -1.0]]), requires_grad=True)
        adamw_step({"w": w}, {"w": np.array([[0.3, -5.0]])}, AdamWState(lr=0.1, weight_decay=0.0))
        np.testing.assert_allclose(w.data, [[0.9, -0.9]], atol=1e-6)

    def test_decay_is_decoupled_and_skips_vectors(self):
        matrix = Tensor(np.ones((2, 2)), requires_grad=True)
        vector = Tensor(np.ones(2), requires_grad=True)
        state = AdamWState(lr=0.1, weight_decay=0.5)
        adamw_step({"m": matrix, "v": vector}, {"m": np.zeros((2, 2)), "v": np.zeros(2)}, state)
        np.testing.assert_allclose(matrix.data, 0.95)
        np.testing.assert_allclose(vector.data, 1.0)

    def test_quadratic_converges(self):
        w = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
        state = AdamWState(lr=0.05, weight_decay=0.0)
        for _ in range(100):
            adamw_step({"w": w}, {"w": 2.0 * w.data}, state)
        assert np.linalg.norm(w.data) < 0.1 * np.linalg.norm([0.5, -2.0, 3.0])

    def test_non_finite_gradient_moves_nothing(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        state = AdamWState(lr=0.1)
        with pytest.raises(NumericError):
            adamw_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state)
        assert np.array_equal(a.data, np.ones(2)) and state.step == 0

    def test_gradient_contract(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError):
            adamw_step({"a": a}, {}, AdamWState(lr=0.1))
        with pytest.raises(DimensionError):
            adamw_step({"a": a}, {"a": np.ones(3)}, AdamWState(lr=0.1))

    def test_state_round_trip(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = AdamWState(lr=0.1)
        adamw_step({"w": w}, {"w": np.array([0.5, -0.5])}, state)
        train_state = TrainState(state, Rng(1).state, epoch=2)
        data = json.loads(json.dumps(train_state.to_dict(include_moments=True)))
        restored = TrainState.from_dict(data)
        assert restored.step == 1 and restored.epoch == 2
        np.testing.assert_array_equal(restored.optimizer.exp_avg["w"], state.exp_avg["w"])


class TestToyData:
    def test_shapes_and_balance(self, small_toy):
        assert small_toy.train_images.shape == (16, 3, 32, 32)
        assert small_toy.test_images.shape == (8, 3, 32, 32)
        assert small_toy.class_counts()["train"] == {0: 4, 1: 4, 2: 4, 3: 4}
        assert small_toy.class_names == CLASS_NAMES
        assert 0.0 <= small_toy.train_images.min() and small_toy.train_images.max() <= 1.0

    def test_seeded(self, small_toy):
        again = generate_toy_dataset(ToySpec(train_per_class=4, test_per_class=2, seed=3))
        other = generate_toy_dataset(ToySpec(train_per_class=4, test_per_class=2, seed=4))
        assert np.array_equal(small_toy.train_images, again.train_images)
        assert not np.array_equal(small_toy.train_images, other.train_images)

    def test_classes_are_centroid_separable(self):
        data = generate_toy_dataset(ToySpec(train_per_class=8, test_per_class=8))
        assert nearest_centroid_accuracy(data.train_images, data.train_labels,
                                         data.test_images, data.test_labels) == 1.0

    def test_stripe_patterns_are_transposes(self):
        spec = ToySpec()
        np.testing.assert_array_equal(class_pattern(0, spec), class_pattern(1, spec).T)

    @pytest.mark.parametrize("field,value", [("num_classes", 5), ("noise", -0.1),
                                             ("train_per_class", 0), ("image_size", 1)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(ConfigError):
            generate_toy_dataset(ToySpec(**{field: value}))


class TestTrainer:
    def test_hyperparams_validation(self):
        with pytest.raises(ConfigError):
            TrainHyperparams(schedule="cosine").validate()
        with pytest.raises(ConfigError):
            TrainHyperparams(max_grad_norm=0.0).validate()

    def test_one_epoch_log(self, micro_config, small_toy):
        hp = TrainHyperparams(epochs=1, batch_size=6, progress=False)
        log = train_loop(build_model(micro_config), small_toy, hp, Rng(0))
        steps = log.steps
        assert [r["step"] for r in steps] == [1, 2, 3]
        schedule = TriangularSchedule(hp.peak_lr, 3)
        assert [r["lr"] for r in steps] == pytest.approx([triangular_lr(schedule, k)
                                                          for k in (1, 2, 3)])
        assert log.epochs[0]["epoch"] == 1
        assert log.final_test_accuracy is not None
        lines = [json.loads(line) for line in log.to_jsonl().splitlines()]
        assert [line["kind"] for line in lines] == ["step", "step", "step", "epoch"]

    def test_training_is_deterministic(self, micro_config, small_toy):
        hp = TrainHyperparams(epochs=1, batch_size=8, progress=False)
        first = train_loop(build_model(micro_config, seed=1), small_toy, hp, Rng(2))
        second = train_loop(build_model(micro_config, seed=1), small_toy, hp, Rng(2))
        assert first.records == second.records

    def test_zero_learning_rate_leaves_weights(self, micro_config, small_toy):
        model = build_model(micro_config)
        before = {name: np.array(p.data) for name, p in model.named_parameters()}
        hp = TrainHyperparams(epochs=1, batch_size=8, peak_lr=0.0, progress=False)
        train_loop(model, small_toy, hp, Rng(0))
        for name, param in model.named_parameters():
            assert np.array_equal(param.data, before[name]), name

    def test_divergence_reports_step(self, micro_config, small_toy):
        model = build_model(micro_config)
        model.head.fc.weight.assign(np.full(model.head.fc.weight.shape, 1e38))
        trainer = Trainer(model, TrainHyperparams(progress=False), Rng(0))
        with pytest.raises(TrainingDivergedError) as info:
            trainer.train_step(small_toy.train_images[:4], small_toy.train_labels[:4], 1e-3,
                               "train")
        assert info.value.step == 1

    def test_overfit_reaches_half_the_chance_loss(self, micro_config):
        # same seeded batch and model as the full overfit run, stopped early
        batch = generate_toy_dataset(ToySpec(train_per_class=2, test_per_class=0))
        losses = overfit_batch(build_model(micro_config), batch.train_images, batch.train_labels,
                               steps=200, target_loss=0.7)
        assert losses[0] == pytest.approx(np.log(4), abs=0.4)
        assert losses[-1] < 0.7 and len(losses) < 200

    def test_predict_and_evaluate(self, micro_config, small_toy):
        model = build_model(micro_config)
        assert predict(model, small_toy.test_images, batch_size=3).shape == (8, 4)
        accuracy = evaluate(model, small_toy.test_images, small_toy.test_labels)
        assert 0.0 <= accuracy <= 1.0
        with pytest.raises(DimensionError):
            evaluate(model, small_toy.test_images, small_toy.test_labels[:3])


@pytest.mark.slow
def test_single_batch_overfit(micro_config):
    batch = generate_toy_dataset(ToySpec(train_per_class=2, test_per_class=0))
    losses = overfit_batch(build_model(micro_config), batch.train_images, batch.train_labels,
                           steps=200, target_loss=0.01)
    assert losses[-1] < 0.01


@pytest.mark.slow
def test_micro_model_learns_toy_task(micro_config):
    data = generate_toy_dataset(ToySpec())
    hp = TrainHyperparams(epochs=30, batch_size=32, progress=False)
    log = train_loop(build_model(micro_config), data, hp, Rng(0))
    assert log.final_test_accuracy >= 0.95
