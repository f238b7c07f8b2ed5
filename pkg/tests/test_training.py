import numpy as np
import pytest

from app.core.setnn import SetBatch, predict
from app.core.training import (EPOCH_CSV_HEADER, OptimizerState, TrainState, adam_step, clamp_p,
                               cross_entropy_loss, epoch_rows, evaluate, mse_loss, train)
from app.schemas import AggregatorKind, LossEnum, OptimizerSpec, TrainConfig
from app.utils.error_handler import ConfigurationError, NumericalAbortError, ShapeError
from app.utils.numerics import Rng
from tests.conftest import make_model


@pytest.fixture
def mean_task():
    """目标为第 0 坐标均值的小数据集"""
    rng = Rng(31)
    sets = [rng.child(i).uniform(0.5, 1.5, size=(int(2 + i % 4), 2)) for i in range(24)]
    return SetBatch.from_sets(sets, [float(np.mean(s[:, 0])) for s in sets])


def small_config(**overrides):
    base = dict(epochs=5, batch_size=8, seed=3, optimizer=OptimizerSpec(kind='adam', lr=0.01), log_every=100)
    base.update(overrides)
    return TrainConfig(**base)


class TestLosses:
    def test_mse_value_and_gradient(self):
        loss, grad = mse_loss(np.array([[1.0], [3.0]]), np.array([0.0, 1.0]))
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [[1.0], [2.0]])

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((2, 2)), np.zeros(3))

    def test_mse_target_width_mismatch(self):
        with pytest.raises(ShapeError) as excinfo:
            mse_loss(np.zeros((3, 1)), np.zeros((3, 2)))
        assert excinfo.value.left == (3, 1)
        assert excinfo.value.right == (3, 2)

    def test_cross_entropy_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy_loss(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_cross_entropy_gradient_matches_finite_difference(self):
        logits = np.array([[0.2, -1.0, 0.5], [1.5, 0.1, -0.3]])
        labels = np.array([2, 0])
        _, grad = cross_entropy_loss(logits, labels)
        h = 1e-6
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(*logits.shape):
            lp, lm = logits.copy(), logits.copy()
            lp[idx] += h
            lm[idx] -= h
            numeric[idx] = (cross_entropy_loss(lp, labels)[0] - cross_entropy_loss(lm, labels)[0]) / (2 * h)
        np.testing.assert_allclose(grad, numeric, atol=1e-8)

    def test_cross_entropy_stable_for_large_logits(self):
        loss, _ = cross_entropy_loss(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ShapeError):
            cross_entropy_loss(np.zeros((1, 2)), np.array([2]))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params, state = adam_step(np.array([1.0, -1.0]), np.array([0.5, -3.0]), OptimizerState(), lr=0.1)
        np.testing.assert_allclose(params, [0.9, -0.9], atol=1e-7)
        assert state.t == 1

    def test_zero_gradient_leaves_parameters_unchanged(self):
        params, _ = adam_step(np.array([0.5, -2.0]), np.zeros(2), OptimizerState(), lr=0.1)
        np.testing.assert_array_equal(params, [0.5, -2.0])

    def test_converges_on_quadratic(self):
        x, state = np.array([0.0]), OptimizerState()
        for _ in range(500):
            x, state = adam_step(x, 2.0 * (x - 3.0), state, lr=0.1)
        assert abs(x[0] - 3.0) < 1e-3

    def test_state_round_trip(self):
        _, state = adam_step(np.zeros(3), np.ones(3), OptimizerState(), lr=0.1)
        restored = OptimizerState.from_dict(state.to_dict())
        assert restored.t == 1
        assert np.array_equal(restored.m, state.m)
        assert np.array_equal(restored.v, state.v)


class TestEvaluate:
    def test_perfect_regressor(self, mean_task):
        model = make_model(seed=4)
        exact = SetBatch(elements=mean_task.elements, offsets=mean_task.offsets,
                         targets=predict(model, mean_task).reshape(-1))
        metrics = evaluate(model, exact)
        assert metrics.rmse == 0.0
        assert metrics.mae == 0.0

    def test_constant_mean_predictor_rmse_is_target_std(self, mean_task):
        model = make_model(seed=4)
        theta = np.zeros(model.parameter_count())
        theta[model.flat_parameter_names().index('rho.b1[0]')] = float(np.mean(mean_task.targets))
        model.set_flat(theta)
        metrics = evaluate(model, mean_task)
        assert metrics.rmse == pytest.approx(float(np.std(mean_task.targets)), rel=1e-12)

    def test_perfect_classifier(self, mean_task):
        model = make_model(out=3, seed=4)
        labels = np.argmax(predict(model, mean_task), axis=1)
        batch = SetBatch(elements=mean_task.elements, offsets=mean_task.offsets, targets=labels)
        assert evaluate(model, batch, loss=LossEnum.CROSS_ENTROPY).accuracy == 1.0

    def test_target_shape_mismatch(self, mean_task):
        model = make_model(seed=4)
        wide = SetBatch(elements=mean_task.elements, offsets=mean_task.offsets,
                        targets=np.zeros((mean_task.n_sets, 2)))
        with pytest.raises(ShapeError):
            evaluate(model, wide)


class TestTrain:
    def test_loss_decreases(self, mean_task):
        model = make_model(seed=1)
        before = evaluate(model, mean_task).loss
        _, report = train(model, mean_task, None, small_config(epochs=40))
        assert report.final_train.loss < before

    def test_same_seed_is_bit_identical(self, mean_task):
        a, _ = train(make_model(seed=2), mean_task, mean_task, small_config())
        b, _ = train(make_model(seed=2), mean_task, mean_task, small_config())
        assert np.array_equal(a.get_flat(), b.get_flat())

    def test_resume_matches_uninterrupted(self, mean_task):
        full, _ = train(make_model(seed=2), mean_task, None, small_config(epochs=4))
        state = TrainState()
        half, _ = train(make_model(seed=2), mean_task, None, small_config(epochs=2), state=state)
        state = TrainState.from_dict(state.to_dict())
        resumed, _ = train(half, mean_task, None, small_config(epochs=2), state=state)
        assert state.epochs_done == 4
        assert np.array_equal(full.get_flat(), resumed.get_flat())

    def test_records_train_and_val_per_epoch(self, mean_task):
        _, report = train(make_model(), mean_task, mean_task, small_config(epochs=3))
        assert [(r.epoch, r.split) for r in report.epochs] == [
            (1, 'train'), (1, 'val'), (2, 'train'), (2, 'val'), (3, 'train'), (3, 'val')]
        rows = epoch_rows(report)
        assert len(rows[0]) == len(EPOCH_CSV_HEADER)

    def test_huge_learning_rate_aborts(self, mean_task):
        cfg = small_config(epochs=5, batch_size=4, optimizer=OptimizerSpec(kind='sgd', lr=1e200))
        with pytest.raises(NumericalAbortError) as excinfo:
            train(make_model(), mean_task, None, cfg)
        assert excinfo.value.tensor is not None

    def test_cross_entropy_needs_two_outputs(self, mean_task):
        with pytest.raises(ConfigurationError):
            train(make_model(out=1), mean_task, None, small_config(loss=LossEnum.CROSS_ENTROPY))


class TestLearnableP:
    def test_clamp(self):
        model = make_model(AggregatorKind.POWER_MEAN, p=1.0, learnable=True)
        model.p = 25.0
        clamp_p(model, (-10.0, 10.0))
        assert model.p == 10.0

    def test_p_stays_inside_clamp_during_training(self, mean_task):
        model = make_model(AggregatorKind.POWER_MEAN, p=1.0, learnable=True)
        cfg = small_config(epochs=10, optimizer=OptimizerSpec(kind='adam', lr=0.5), p_clamp=(0.9, 1.1))
        _, report = train(model, mean_task, None, cfg)
        assert len(report.p_trajectory) == 10
        assert all(0.9 <= p <= 1.1 for p in report.p_trajectory)
        assert report.final_p == model.p
