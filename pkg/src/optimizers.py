"""
Optimizer module for the Rivulet drop simulator.
SGD with Nesterov momentum, Adam, and the inverse-time learning-rate decay.
"""

import logging
from typing import Dict, Optional

import numpy as np

from src.layers import NeuralError


logger = logging.getLogger(__name__)


class ShapeMismatch(NeuralError, ValueError):
    """Raised when parameter and gradient shapes disagree."""
    pass


def _check_shapes(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    if set(params) != set(grads):
        raise ShapeMismatch(f"Parameter and gradient keys differ: {sorted(set(params) ^ set(grads))}")
    for key, value in params.items():
        if np.shape(grads[key]) != np.shape(value):
            raise ShapeMismatch(f"Gradient for '{key}' has shape {np.shape(grads[key])}, expected {np.shape(value)}")


def decayed_lr(lr0: float, decay: float, t: int) -> float:
    """lr_t = lr0 / (1 + decay * t) with t the number of completed updates."""
    return lr0 / (1.0 + decay * t)


def sgd_nesterov_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: Dict[str, np.ndarray],
                      lr: float, momentum: float = 0.9) -> Dict[str, np.ndarray]:
    """
    One Nesterov momentum update, in place.

    Uses the form that evaluates gradients at the current parameters:
    v <- mu*v - lr*g, theta <- theta + mu*v - lr*g, which is algebraically
    the look-ahead update expressed in shifted variables.

    Args:
        params: Parameter arrays, updated in place
        grads: Gradients with matching keys and shapes
        state: Velocity arrays, created on first use
        lr: Learning rate for this step
        momentum: Momentum coefficient mu

    Returns:
        The updated params dict

    Raises:
        ShapeMismatch: If shapes or keys differ
    """
    _check_shapes(params, grads)
    for key, theta in params.items():
        g = grads[key]
        v = state.get(key)
        if v is None:
            v = np.zeros_like(theta)
        v = momentum * v - lr * g
        state[key] = v
        theta += momentum * v - lr * g
    return params


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: Dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update, in place.

    ``state`` holds the step count under 't' and the moment estimates
    under 'm:<key>' and 'v:<key>'.
    """
    _check_shapes(params, grads)
    t = state.get('t', 0) + 1
    state['t'] = t
    for key, theta in params.items():
        g = grads[key]
        m = beta1 * state.get(f'm:{key}', 0.0) + (1.0 - beta1) * g
        v = beta2 * state.get(f'v:{key}', 0.0) + (1.0 - beta2) * g * g
        state[f'm:{key}'] = m
        state[f'v:{key}'] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


class Optimizer:
    """Applies one update rule with the decayed learning rate."""

    def __init__(self, kind: str = 'sgd_nesterov', lr: float = 1e-2, decay: float = 1e-6,
                 momentum: float = 0.9, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ('sgd_nesterov', 'adam'):
            raise ValueError(f"Unknown optimizer: {kind}")
        self.kind = kind
        self.lr = lr
        self.decay = decay
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.iterations = 0
        self.state: Dict = {}

    def current_lr(self) -> float:
        return decayed_lr(self.lr, self.decay, self.iterations)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             lr: Optional[float] = None) -> Dict[str, np.ndarray]:
        rate = self.current_lr() if lr is None else lr
        if self.kind == 'sgd_nesterov':
            sgd_nesterov_step(params, grads, self.state, rate, self.momentum)
        else:
            adam_step(params, grads, self.state, rate, self.beta1, self.beta2, self.eps)
        self.iterations += 1
        return params
