"""
Property-based tests for layers and optimizers.
Tests correctness properties using Hypothesis.
"""

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from src.layers import LSTM, Dense, activate
from src.network import numerical_gradient
from src.optimizers import adam_step, sgd_nesterov_step


seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)
sizes = st.integers(min_value=1, max_value=4)
smooth_activations = st.sampled_from(['linear', 'sigmoid', 'tanh'])


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def gradient_errors(layer, x: np.ndarray, rng: np.random.Generator) -> list:
    weights = rng.normal(size=layer.forward(x)[0].shape)

    def loss() -> float:
        return float(np.sum(layer.forward(x)[0] * weights))

    dx, grads = layer.backward(weights, layer.forward(x)[1])
    errors = [relative_error(grads[key], numerical_gradient(loss, param)) for key, param in layer.params.items()]
    errors.append(relative_error(dx, numerical_gradient(loss, x)))
    return errors


# ============================================
# Property 1: Dense gradients match finite differences
# ============================================

@given(seeds, sizes, sizes, sizes, smooth_activations)
@settings(max_examples=30, deadline=None)
def test_property_dense_gradients(seed, batch, n_in, n_out, activation):
    """
    Property 1: Dense gradients match finite differences
    """
    rng = np.random.default_rng(seed)
    layer = Dense(n_in, n_out, activation)
    layer.initialize(rng)
    layer.params['b'] = rng.normal(size=n_out)
    assert max(gradient_errors(layer, rng.normal(size=(batch, n_in)), rng)) < 1e-4


# ============================================
# Property 2: LSTM gradients match finite differences
# ============================================

@given(seeds, sizes, sizes, sizes, st.integers(min_value=1, max_value=4), smooth_activations, st.booleans())
@settings(max_examples=20, deadline=None)
def test_property_lstm_gradients(seed, batch, n_in, units, steps, activation, returns_sequence):
    """
    Property 2: LSTM gradients match finite differences
    Holds for every sequence length and for both sequence and last-step output.
    """
    rng = np.random.default_rng(seed)
    layer = LSTM(n_in, units, activation, returns_sequence=returns_sequence)
    layer.initialize(rng)
    layer.params['b'] = layer.params['b'] + rng.normal(scale=0.1, size=4 * units)
    assert max(gradient_errors(layer, rng.normal(size=(batch, steps, n_in)), rng)) < 1e-4


# ============================================
# Property 3: Sigmoid outputs are probabilities
# ============================================

@given(arrays(np.float64, st.integers(min_value=1, max_value=20),
              elements=st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)))
@settings(max_examples=100, deadline=None)
def test_property_sigmoid_range(z):
    """
    Property 3: Sigmoid outputs are probabilities
    """
    out = activate(z, 'sigmoid')
    assert np.all(np.isfinite(out))
    assert np.all((out >= 0.0) & (out <= 1.0))


# ============================================
# Property 4: Zero gradients leave fresh parameters unchanged
# ============================================

@given(arrays(np.float64, (3, 4), elements=st.floats(min_value=-10, max_value=10, allow_nan=False)),
       st.floats(min_value=1e-6, max_value=1.0))
@settings(max_examples=100, deadline=None)
def test_property_zero_gradient_is_noop(theta, lr):
    """
    Property 4: Zero gradients leave fresh parameters unchanged
    Neither optimizer moves parameters that have no gradient and no history.
    """
    for step in (sgd_nesterov_step, adam_step):
        params = {'W': theta.copy()}
        step(params, {'W': np.zeros_like(theta)}, {}, lr)
        np.testing.assert_array_equal(params['W'], theta)


# ============================================
# Property 5: The first Adam step is bounded by the learning rate
# ============================================

@given(arrays(np.float64, (5,), elements=st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)),
       st.floats(min_value=1e-6, max_value=1.0))
@settings(max_examples=100, deadline=None)
def test_property_adam_first_step_bounded(grad, lr):
    """
    Property 5: The first Adam step is bounded by the learning rate
    """
    params = {'W': np.zeros(5)}
    adam_step(params, {'W': grad}, {}, lr)
    assert np.all(np.abs(params['W']) <= lr * (1 + 1e-9))
    assert np.all(params['W'] * grad <= 0.0)
