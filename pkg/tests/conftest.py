"""
Pytest configuration and shared fixtures for the latent-action identification tests
"""

import os
import sys

import numpy as np
import pytest

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from identify.env_core import random_finite_env, smooth_path_env  # noqa: E402


@pytest.fixture
def rng():
    """Fixed numpy generator; tests needing independent streams use utils.rng."""
    return np.random.default_rng(20240611)


@pytest.fixture
def finite_env():
    """Identifiable-by-construction finite env (n=6, k=3, m=5, one state)."""
    return random_finite_env(6, 3, 5, num_states=1, seed=7)


@pytest.fixture
def path_env():
    """Smooth continuous env with Dirac transitions on a 20-node path."""
    return smooth_path_env(20, 3, 5, dim=2, seed=3)


@pytest.fixture
def clean_env(monkeypatch):
    """Process environment without any LATENTACT_* variables."""
    for key in list(os.environ):
        if key.startswith("LATENTACT_"):
            monkeypatch.delenv(key, raising=False)
    return monkeypatch


# Pytest configuration
def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line("markers", "unit: Fast tests of a single operation")
    config.addinivalue_line("markers", "slow: Tests that take longer to execute")
    config.addinivalue_line(
        "markers", "property: Quantified property suites driven by hypothesis or seeded loops"
    )
