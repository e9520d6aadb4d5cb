"""Shared helpers: dense reference contractions and model builders."""

import numpy as np
import pytest

from blockpeps import exact


def dense_members(state) -> np.ndarray:
    """Stack of the dense vectors of all block members, shape (p, dim)."""
    return np.stack([exact.contract_network_to_vector(state, a)
                     for a in range(state.p)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
