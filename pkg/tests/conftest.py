"""
Pytest configuration and shared fixtures for Rivulet tests.
"""

import logging

import numpy as np
import pytest

from src.drops import DropSnapshot, incline_scale
from src.geometry import N_CTRL, canonicalize, circle_contour
from src.imaging import GradientProfile
from src.network import build_breakage_net, build_contour_net, build_gradient_net


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running numerical checks")


def peanut_points(center=(0.5, 0.5), length=0.25, height=0.2, neck=0.15) -> np.ndarray:
    """Control points of a two-lobed outline symmetric about both axes through ``center``."""
    phi = np.pi / 2 - 2.0 * np.pi * np.arange(N_CTRL) / N_CTRL
    x = center[0] + length * np.cos(phi)
    y = center[1] + height * np.sin(phi) * (neck + np.cos(phi) ** 2)
    return np.column_stack([x, y])


class ScriptedPredictor:
    """
    Deterministic stand-in for the trained networks.

    Every drop is translated by ``velocity_fn(state)`` (or a fixed
    velocity); drops whose id is in ``split_ids`` report breakage.
    """

    def __init__(self, velocity=(0.0, -0.01), split_ids=(), velocity_fn=None):
        self.velocity = np.asarray(velocity, dtype=float)
        self.split_ids = set(split_ids)
        self.velocity_fn = velocity_fn

    def predict(self, state, theta):
        incline_scale(theta)
        snap = state.current
        v = self.velocity if self.velocity_fn is None else np.asarray(self.velocity_fn(state), dtype=float)
        return DropSnapshot(snap.contour.translated(v), snap.profile, snap.center + v)

    def breaks(self, state):
        return state.drop_id in self.split_ids


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop handlers installed by setup_logging so log files close between tests."""
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        handler.close()
        root.removeHandler(handler)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def circle():
    """Circle of radius 0.25 centred in the unit domain."""
    return circle_contour((0.5, 0.5), 0.25)


@pytest.fixture
def small_circle():
    return circle_contour((0.5, 0.5), 0.1)


@pytest.fixture
def peanut():
    """Symmetric two-lobed contour whose neck sits on x = 0.5."""
    return canonicalize(peanut_points())


@pytest.fixture
def make_peanut():
    def make(center=(0.5, 0.5), scale=1.0):
        return canonicalize(peanut_points(center, 0.25 * scale, 0.2 * scale))
    return make


@pytest.fixture
def uniform_profile():
    return GradientProfile.uniform(1.0)


@pytest.fixture
def scripted():
    return ScriptedPredictor


@pytest.fixture
def tiny_models():
    """Untrained networks of width 4 for fast shape and plumbing checks."""
    return (build_contour_net(hidden=4, dropout_rate=0.0, seed=0),
            build_gradient_net(hidden=4, dropout_rate=0.0, seed=0),
            build_breakage_net(hidden=4, dropout_rate=0.0, seed=0))
