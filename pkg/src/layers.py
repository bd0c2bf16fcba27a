"""
Layer module for the Rivulet drop simulator.
Dense and LSTM layers with explicit forward caches and backpropagation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit


logger = logging.getLogger(__name__)


ACTIVATIONS = ('linear', 'relu', 'sigmoid', 'tanh')


class NeuralError(Exception):
    """Base exception for network errors."""
    pass


class DimMismatch(NeuralError, ValueError):
    """Raised when array dimensions do not match a layer or graph."""
    pass


class MissingCache(NeuralError):
    """Raised when backward is called without the matching forward cache."""
    pass


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == 'linear':
        return z
    if kind == 'relu':
        return np.maximum(z, 0.0)
    if kind == 'sigmoid':
        return expit(z)
    if kind == 'tanh':
        return np.tanh(z)
    raise ValueError(f"Unknown activation: {kind}")


def activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation given pre-activation z and output a."""
    if kind == 'linear':
        return np.ones_like(z)
    if kind == 'relu':
        return (z > 0).astype(z.dtype)
    if kind == 'sigmoid':
        return a * (1.0 - a)
    if kind == 'tanh':
        return 1.0 - a * a
    raise ValueError(f"Unknown activation: {kind}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Dense:
    """
    Fully connected layer on (batch, in_dim) inputs.

    Attributes:
        in_dim: Input width
        out_dim: Output width
        activation: One of linear, relu, sigmoid
        params: {'W': (in_dim, out_dim), 'b': (out_dim,)}
    """

    in_dim: int
    out_dim: int
    activation: str = 'linear'
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    kind = 'dense'
    returns_sequence = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimMismatch(f"Dense dimensions must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation: {self.activation}")
        if not self.params:
            self.params = {'W': np.zeros((self.in_dim, self.out_dim)), 'b': np.zeros(self.out_dim)}
        self._check_shapes()

    def _check_shapes(self):
        if self.params['W'].shape != (self.in_dim, self.out_dim) or self.params['b'].shape != (self.out_dim,):
            raise DimMismatch(f"Dense weights do not match {self.in_dim}->{self.out_dim}")

    def initialize(self, rng: np.random.Generator):
        self.params['W'] = glorot_uniform(rng, self.in_dim, self.out_dim, (self.in_dim, self.out_dim))
        self.params['b'] = np.zeros(self.out_dim)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Dict]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimMismatch(f"Dense expects (batch, {self.in_dim}), got {x.shape}")
        z = x @ self.params['W'] + self.params['b']
        a = activate(z, self.activation)
        return a, {'x': x, 'z': z, 'a': a}

    def backward(self, dout: np.ndarray, cache: Optional[Dict]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        if cache is None:
            raise MissingCache("Dense.backward called without a forward cache")
        dz = dout * activation_grad(cache['z'], cache['a'], self.activation)
        grads = {'W': cache['x'].T @ dz, 'b': dz.sum(axis=0)}
        return dz @ self.params['W'].T, grads


@dataclass
class LSTM:
    """
    LSTM layer on (batch, steps, in_dim) inputs.

    Gates are stacked as [input, forget, cell, output] along the last axis of
    ``W_x`` (in_dim, 4H), ``W_h`` (H, 4H) and ``b`` (4H,). Gates use sigmoid,
    the cell candidate uses tanh and ``activation`` is applied to the cell
    state before the output gate. State starts at zero for every sequence.
    """

    in_dim: int
    out_dim: int
    activation: str = 'linear'
    returns_sequence: bool = True
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    kind = 'lstm'

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DimMismatch(f"LSTM dimensions must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation: {self.activation}")
        H = self.out_dim
        if not self.params:
            self.params = {'W_x': np.zeros((self.in_dim, 4 * H)), 'W_h': np.zeros((H, 4 * H)), 'b': np.zeros(4 * H)}
        self._check_shapes()

    def _check_shapes(self):
        H = self.out_dim
        if (self.params['W_x'].shape != (self.in_dim, 4 * H) or self.params['W_h'].shape != (H, 4 * H)
                or self.params['b'].shape != (4 * H,)):
            raise DimMismatch(f"LSTM weights do not match {self.in_dim}->{H}")

    def initialize(self, rng: np.random.Generator):
        H = self.out_dim
        self.params['W_x'] = glorot_uniform(rng, self.in_dim, 4 * H, (self.in_dim, 4 * H))
        self.params['W_h'] = glorot_uniform(rng, H, 4 * H, (H, 4 * H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate
        self.params['b'] = b

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Dict]:
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise DimMismatch(f"LSTM expects (batch, steps, {self.in_dim}), got {x.shape}")
        B, T, _ = x.shape
        H = self.out_dim
        W_x, W_h, b = self.params['W_x'], self.params['W_h'], self.params['b']

        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.zeros((B, T, H))
        steps = []
        x_proj = x @ W_x + b
        for t in range(T):
            z = x_proj[:, t] + h @ W_h
            i = expit(z[:, :H])
            f = expit(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = expit(z[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            a = activate(c, self.activation)
            h = o * a
            hs[:, t] = h
            steps.append((i, f, g, o, c_prev, c, a, h_prev))

        out = hs if self.returns_sequence else hs[:, -1]
        return out, {'x': x, 'steps': steps}

    def backward(self, dout: np.ndarray, cache: Optional[Dict]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Backpropagation through time over the cached sequence."""
        if cache is None:
            raise MissingCache("LSTM.backward called without a forward cache")
        x, steps = cache['x'], cache['steps']
        B, T, _ = x.shape
        H = self.out_dim
        W_x, W_h = self.params['W_x'], self.params['W_h']

        if self.returns_sequence:
            dhs = dout
        else:
            dhs = np.zeros((B, T, H))
            dhs[:, -1] = dout

        dx = np.zeros_like(x)
        dW_x = np.zeros_like(W_x)
        dW_h = np.zeros_like(W_h)
        db = np.zeros(4 * H)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))

        for t in reversed(range(T)):
            i, f, g, o, c_prev, c, a, h_prev = steps[t]
            dh = dhs[:, t] + dh_next
            do = dh * a
            dc = dh * o * activation_grad(c, a, self.activation) + dc_next
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dW_x += x[:, t].T @ dz
            dW_h += h_prev.T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ W_x.T
            dh_next = dz @ W_h.T
            dc_next = dc * f

        return dx, {'W_x': dW_x, 'W_h': dW_h, 'b': db}


LAYER_TYPES = {'dense': Dense, 'lstm': LSTM}
