"""
Unit tests for the layer graph, the three predictor networks and model files.
"""

import json

import numpy as np
import pytest

from src.layers import LSTM, Dense, DimMismatch, MissingCache
from src.network import (
    CorruptFile,
    Model,
    VersionMismatch,
    build_breakage_net,
    build_contour_net,
    build_gradient_net,
    load_model,
    numerical_gradient,
    save_model,
)


def branching_model(seed=0) -> Model:
    """Two inputs through separate LSTMs, merged, then a Dense head."""
    model = Model('custom', 0.0, seed)
    a = model.add_input('a', 0, 2)
    b = model.add_input('b', 2, 5)
    a = model.add_layer('a_lstm', LSTM(2, 3), a)
    b = model.add_layer('b_lstm', LSTM(3, 2), b)
    h = model.add_merge('merge', [a, b])
    h = model.add_layer('top', LSTM(5, 3, 'tanh', returns_sequence=False), h)
    model.add_layer('out', Dense(3, 2), h)
    return model.initialize()


class TestModelGraph:
    """Test graph construction and gradients."""

    def test_gradients_through_merge(self, rng):
        """Test end-to-end parameter gradients against central differences."""
        model = branching_model()
        x = rng.normal(size=(2, 4, 5))
        weights = rng.normal(size=(2, 2))

        def loss() -> float:
            return float(np.sum(model.predict(x) * weights))

        _, cache = model.forward(x)
        grads, dx = model.backward(weights, cache)
        for key, param in model.parameters().items():
            numeric = numerical_gradient(loss, param)
            err = np.linalg.norm(grads[key] - numeric) / max(np.linalg.norm(grads[key]) + np.linalg.norm(numeric), 1e-12)
            assert err < 1e-4, key
        numeric_dx = numerical_gradient(loss, x)
        assert np.linalg.norm(dx - numeric_dx) / (np.linalg.norm(dx) + np.linalg.norm(numeric_dx)) < 1e-4

    def test_validate_single_output(self):
        assert branching_model().validate() == []

    def test_input_shape_checked(self):
        with pytest.raises(DimMismatch):
            branching_model().forward(np.zeros((2, 4, 6)))

    def test_backward_without_cache(self):
        with pytest.raises(MissingCache):
            branching_model().backward(np.zeros((1, 2)), None)

    def test_seeded_initialization(self):
        a, b = branching_model(seed=3), branching_model(seed=3)
        for key, value in a.parameters().items():
            np.testing.assert_array_equal(value, b.parameters()[key])

    def test_dropout_only_in_training(self, rng):
        model = build_breakage_net(hidden=8, dropout_rate=0.5, seed=0)
        x = rng.normal(size=(3, 104))
        np.testing.assert_array_equal(model.predict(x), model.predict(x))
        train_out, cache = model.forward(x, train=True, rng=np.random.default_rng(0))
        assert cache['masks']
        assert 'output' not in cache['masks']


class TestArchitectures:
    """Test the inventory of the three predictor networks."""

    def test_contour_net(self):
        model = build_contour_net()
        rows = {r['name']: r for r in model.describe()}
        lstms = [r for r in rows.values() if r.get('layer') == 'lstm']
        assert len(lstms) == 11
        assert all(r['dim'] == 260 for r in lstms)
        assert rows['output']['layer'] == 'dense'
        assert rows['output']['activation'] == 'linear'
        assert rows['output']['dim'] == 106
        assert rows['lstm2']['returns_sequence'] is False
        assert rows['xy_merge']['dim'] == 520
        assert model.input_dim == 106

    def test_gradient_net(self):
        rows = build_gradient_net().describe()
        lstms = [r for r in rows if r.get('layer') == 'lstm']
        assert len(lstms) == 6
        assert all(r['dim'] == 250 for r in lstms)
        assert rows[-1]['dim'] == 52

    def test_breakage_net(self):
        rows = build_breakage_net().describe()
        dense = [r for r in rows if r.get('layer') == 'dense']
        assert len(dense) == 7
        assert all(r['activation'] == 'relu' and r['dim'] == 150 for r in dense[:6])
        assert dense[-1]['activation'] == 'sigmoid'
        assert dense[-1]['dim'] == 1

    def test_output_shapes(self, tiny_models, rng):
        contour, gradient, breakage = tiny_models
        assert contour.predict(rng.normal(size=(2, 5, 106))).shape == (2, 106)
        assert gradient.predict(rng.normal(size=(2, 5, 52))).shape == (2, 52)
        out = breakage.predict(rng.normal(size=(2, 104)))
        assert out.shape == (2, 1)
        assert np.all((out > 0) & (out < 1))


class TestModelFiles:
    """Test the "nd-model v1" format."""

    def test_save_load_predictions(self, tmp_path, tiny_models, rng):
        model = tiny_models[0]
        model.meta['K'] = 5
        path = save_model(model, tmp_path / "contour.json")
        restored = load_model(path)
        assert restored.meta['K'] == 5
        x = rng.normal(size=(1, 5, 106))
        np.testing.assert_array_equal(restored.predict(x), model.predict(x))

    def test_version_mismatch(self, tmp_path, tiny_models):
        path = save_model(tiny_models[2], tmp_path / "b.json")
        data = json.loads(path.read_text())
        data['format'] = 'nd-model v2'
        path.write_text(json.dumps(data))
        with pytest.raises(VersionMismatch):
            load_model(path)

    def test_truncated_file(self, tmp_path, tiny_models):
        path = save_model(tiny_models[1], tmp_path / "g.json")
        path.write_text(path.read_text()[:100])
        with pytest.raises(CorruptFile):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "absent.json")
