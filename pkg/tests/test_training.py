"""
Unit tests for losses, the training loop and near-miss balancing.
"""

import numpy as np
import pytest

from src.exporter import read_table
from src.layers import Dense
from src.network import Model, build_breakage_net
from src.training import (
    EmptyDataset,
    NonFiniteLoss,
    NoPositives,
    TrainConfig,
    balanced_accuracy,
    bce_loss,
    mse_loss,
    near_miss_undersample,
    train,
)


def linear_model(seed=0) -> Model:
    model = Model('custom', 0.0, seed)
    x = model.add_input('x', 0, 3, sequence=False)
    model.add_layer('out', Dense(3, 1), x)
    return model.initialize()


def linear_problem(rng, n=64):
    X = rng.normal(size=(n, 3))
    return X, X @ np.array([[0.5], [-1.0], [2.0]]) + 0.3


def exhaustive_near_miss(X, y, target, k):
    """Negatives ranked by mean distance to their k nearest positives."""
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    d = np.linalg.norm(X[neg][:, None] - X[pos][None], axis=2)
    score = np.sort(d, axis=1)[:, :k].mean(axis=1)
    chosen = neg[np.argsort(score, kind='stable')[:target]]
    return np.sort(np.concatenate([pos, chosen]))


class TestLosses:
    """Test loss values and gradients."""

    def test_mse(self):
        loss, grad = mse_loss(np.array([[1.0], [2.0]]), np.zeros((2, 1)))
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [[1.0], [2.0]])

    def test_bce(self):
        loss, grad = bce_loss(np.array([[0.5]]), np.array([[1.0]]))
        assert loss == pytest.approx(np.log(2.0))
        assert grad[0, 0] == pytest.approx(-2.0)

    def test_bce_clamped(self):
        loss, _ = bce_loss(np.array([[0.0]]), np.array([[1.0]]))
        assert np.isfinite(loss)
        assert loss == pytest.approx(-np.log(1e-7))


class TestTrain:
    """Test the seeded mini-batch loop."""

    def test_fits_linear_map(self, rng):
        X, Y = linear_problem(rng)
        cfg = TrainConfig(epochs=100, batch_size=16, lr=0.05, lr_decay=0.0, seed=1)
        result = train(linear_model(), X, Y, cfg)
        assert len(result.losses) == 100
        assert result.losses[-1] < 1e-3 * result.losses[0]

    def test_adam(self, rng):
        X, Y = linear_problem(rng)
        cfg = TrainConfig(epochs=200, batch_size=16, lr=0.05, optimizer='adam', seed=1)
        result = train(linear_model(), X, Y, cfg)
        assert result.losses[-1] < 1e-2 * result.losses[0]

    def test_deterministic_with_dropout(self, rng):
        """Test that identical seeds give identical weights."""
        X = rng.normal(size=(40, 104))
        y = (X[:, 0] > 0).astype(float)
        cfg = TrainConfig(epochs=3, batch_size=8, loss='bce', seed=7)
        a = train(build_breakage_net(hidden=6, dropout_rate=0.3, seed=2), X, y, cfg).model
        b = train(build_breakage_net(hidden=6, dropout_rate=0.3, seed=2), X, y, cfg).model
        for key, value in a.parameters().items():
            np.testing.assert_array_equal(value, b.parameters()[key])

    def test_zero_epochs(self, rng):
        X, Y = linear_problem(rng)
        model = linear_model()
        before = {k: v.copy() for k, v in model.parameters().items()}
        result = train(model, X, Y, TrainConfig(epochs=0))
        assert result.losses == []
        for key, value in model.parameters().items():
            np.testing.assert_array_equal(value, before[key])

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train(linear_model(), np.zeros((0, 3)), np.zeros((0, 1)), TrainConfig(epochs=1))

    def test_divergence(self, rng):
        X, Y = linear_problem(rng)
        with pytest.raises(NonFiniteLoss):
            train(linear_model(), X * 1e3, Y, TrainConfig(epochs=50, batch_size=16, lr=1e30, lr_decay=0.0))

    def test_invalid_config(self, rng):
        X, Y = linear_problem(rng)
        with pytest.raises(ValueError):
            train(linear_model(), X, Y, TrainConfig(batch_size=0))

    def test_loss_curve_file(self, tmp_path, rng):
        X, Y = linear_problem(rng)
        path = tmp_path / "loss.csv"
        result = train(linear_model(), X, Y, TrainConfig(epochs=4, batch_size=32), loss_path=path)
        rows = read_table(path)
        assert [int(r['epoch']) for r in rows] == [1, 2, 3, 4]
        assert float(rows[-1]['loss']) == pytest.approx(result.losses[-1], rel=1e-8)

    def test_callback(self, rng):
        X, Y = linear_problem(rng)
        seen = []
        train(linear_model(), X, Y, TrainConfig(epochs=3), on_epoch=lambda e, loss: seen.append(e))
        assert seen == [1, 2, 3]


class TestNearMiss:
    """Test class balancing."""

    def test_matches_exhaustive_ranking(self, rng):
        X = rng.normal(size=(120, 5))
        y = np.zeros(120, dtype=int)
        y[rng.choice(120, 15, replace=False)] = 1
        kept = near_miss_undersample(X, y)
        np.testing.assert_array_equal(kept, exhaustive_near_miss(X, y, 15, 3))

    def test_ratio(self, rng):
        X = rng.normal(size=(100, 4))
        y = np.zeros(100)
        y[:10] = 1
        kept = near_miss_undersample(X, y, ratio=2.0)
        assert len(kept) == 30
        assert set(range(10)) <= set(kept.tolist())

    def test_already_balanced(self, rng):
        X = rng.normal(size=(10, 2))
        y = np.array([1, 0] * 5)
        np.testing.assert_array_equal(near_miss_undersample(X, y), np.arange(10))

    def test_no_positives(self, rng):
        with pytest.raises(NoPositives):
            near_miss_undersample(rng.normal(size=(10, 2)), np.zeros(10))


class TestBalancedAccuracy:

    def test_perfect_and_constant(self):
        model = linear_model()
        model.parameters()['out.W'][:] = [[1.0], [0.0], [0.0]]
        model.parameters()['out.b'][:] = 0.5
        X = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        assert balanced_accuracy(model, X, np.array([1.0, 0.0])) == 1.0
        assert balanced_accuracy(model, X, np.array([0.0, 1.0])) == 0.0
